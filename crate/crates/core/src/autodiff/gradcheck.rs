//! Central finite-difference verification of tape gradients (64-bit only).

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences at `h = 1e-5` carry roughly `1e-10` of
/// truncation and rounding noise.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Elements probed.
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Set when a gradient was non-finite.
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    /// Reason the check was not run, e.g. an L1 term sitting at a kink.
    pub skipped: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.skipped.is_none() && self.params.iter().all(|p| p.failure.is_none() && p.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(why) = &self.skipped {
            return writeln!(f, "skipped: {why}");
        }
        for p in &self.params {
            let status = match &p.failure {
                Some(msg) => format!("FAIL ({msg})"),
                None if p.max_rel_err < self.tol => "ok".to_string(),
                None => "FAIL".to_string(),
            };
            writeln!(
                f,
                "{:<28} n={:<6} max_rel_err={:.3e} @{:<6} {status}",
                p.name, p.elements, p.max_rel_err, p.worst_index
            )?;
        }
        Ok(())
    }
}

/// Relative error with the [`GRAD_FLOOR`] denominator floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of the scalar `f` against central
/// differences with step `h` for every element of every parameter.
///
/// `f` receives one [`Var`] per parameter, in order.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_subset(f, params, h, tol, usize::MAX, 0)
}

/// As [`grad_check`], but probes at most `per_param` seeded random elements
/// of each parameter.
pub fn grad_check_subset<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    h: f64,
    tol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if let Some(m) = tape.l1_margin() {
        if m <= 10.0 * h {
            return Ok(GradCheckReport {
                params: Vec::new(),
                tol,
                skipped: Some(format!("non-differentiable point (L1 margin {m:.3e} <= 10h)")),
            });
        }
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let zeros = vec![0.0; t.len()];
        let analytic = grads.get(vars[pi]).unwrap_or(&zeros);
        let mut check = ParamCheck {
            name: name.clone(),
            elements: t.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            failure: None,
        };
        let probes: Vec<usize> = if t.len() <= per_param {
            (0..t.len()).collect()
        } else {
            let mut idx = index::sample(&mut rng, t.len(), per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        check.elements = probes.len();
        for i in probes {
            let orig = t.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !analytic[i].is_finite() || !numeric.is_finite() {
                check.failure = Some(format!("non-finite gradient at {name}[{i}]"));
                check.worst_index = i;
                break;
            }
            let e = rel_err(analytic[i], numeric);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst_index = i;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        params: out,
        tol,
        skipped: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_vec(vec![3.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[("x".into(), x)],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn l1_at_kink_is_skipped() {
        let x = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let y = tape.constant(Tensor::from_vec(vec![1.0, 0.0])?);
                tape.l1_mean_loss(v[0], y)
            },
            &[("x".into(), x)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.skipped.as_deref().unwrap().contains("non-differentiable point"));
        assert!(!report.passed());
    }
}
