//! Row-level numeric kernels.
//!
//! Every batched forward op on the tape is a loop over these functions, and
//! the streaming enhancer calls the same functions one frame at a time. Both
//! paths therefore perform identical floating-point operations in identical
//! order, which is what makes streaming output bitwise equal to batch output.

use super::tensor::Real;

/// `out = row · w + bias`, where `w` is `[k, n]` row-major.
#[inline]
pub fn affine_row<T: Real>(row: &[T], w: &[T], bias: Option<&[T]>, n: usize, out: &mut [T]) {
    debug_assert_eq!(w.len(), row.len() * n);
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = T::zero()),
    }
    for (p, &a) in row.iter().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += a * wv;
        }
    }
}

/// One output frame of a causal 1-D convolution.
///
/// `window[j]` is input frame `t - K + 1 + j`, or `None` where that frame
/// lies before the start of the signal. `w` is `[K, c_in, c_out]`.
#[inline]
pub fn conv_frame<T: Real>(window: &[Option<&[T]>], w: &[T], bias: &[T], c_in: usize, out: &mut [T]) {
    let c_out = bias.len();
    out.copy_from_slice(bias);
    for (j, frame) in window.iter().enumerate() {
        let Some(frame) = frame else { continue };
        let wj = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
        for (ci, &xv) in frame.iter().enumerate() {
            let wrow = &wj[ci * c_out..(ci + 1) * c_out];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
}

/// Normalises one frame to zero mean and unit variance, then applies the
/// affine gain and bias. Returns `(mean, 1/std)` for the backward pass.
#[inline]
pub fn layer_norm_row<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Multi-head scaled dot-product attention for a single query row.
///
/// `keys` and `values` hold `n_keys` contiguous rows of width `d`; only those
/// rows are visible to the query. Under causal masking the caller passes the
/// rows `0..=t`, so masked positions never enter the softmax normaliser and
/// their weights are exactly zero. `probs` receives `heads * n_keys` weights.
pub fn attention_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    heads: usize,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = q.len();
    let hd = d / heads;
    let n_keys = keys.len() / d;
    let scale = T::one() / T::of(hd as f64).sqrt();
    out.iter_mut().for_each(|o| *o = T::zero());
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let ph = &mut probs[h * n_keys..(h + 1) * n_keys];
        let mut max = T::neg_infinity();
        for (j, p) in ph.iter_mut().enumerate() {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let s = dot(qh, kh) * scale;
            *p = s;
            if s > max {
                max = s;
            }
        }
        let mut sum = T::zero();
        for p in ph.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        let inv = T::one() / sum;
        for p in ph.iter_mut() {
            *p *= inv;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, &p) in ph.iter().enumerate() {
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
