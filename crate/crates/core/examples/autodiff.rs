//! Reverse-mode gradients on a small tape, verified by central differences.

use ossem::autodiff::{grad_check, Tape, Tensor};

fn main() -> ossem::Result<()> {
    let w = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6])?;
    let x = Tensor::matrix(4, 2, vec![1.0, 0.5, -0.3, 0.8, 0.2, -1.1, 0.7, 0.0])?;
    let y = Tensor::matrix(4, 3, vec![0.2; 12])?;

    let loss = |tape: &mut Tape<f64>, v: &[ossem::autodiff::Var]| {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let h = tape.matmul(xv, v[0])?;
        let s = tape.sigmoid(h)?;
        tape.l1_mean_loss(s, yv)
    };

    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let l = loss(&mut tape, &[wv])?;
    println!("loss = {:.6}", tape.value(l).item());
    let grads = tape.backward(l)?;
    println!("dL/dw = {:?}", grads.get(wv).unwrap_or_default());

    let report = grad_check(loss, &[("w".into(), w)], 1e-6, 1e-6)?;
    print!("{report}");
    Ok(())
}
