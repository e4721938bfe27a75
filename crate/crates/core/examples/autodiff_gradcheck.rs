//! Differentiates a small attention-like expression on the tape and checks
//! every input gradient against central finite differences.
//!
//! cargo run --release --example autodiff_gradcheck

use threephase::tensor::gradcheck::check_gradient;
use threephase::tensor::{Rng, Tape, Tensor};

fn loss(q: &Tensor<f64>, k: &Tensor<f64>, targets: &[usize]) -> threephase::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let qv = tape.param(q.clone());
    let kv = tape.param(k.clone());
    let kt = tape.transpose(kv)?;
    let scores = tape.matmul(qv, kt)?;
    let scores = tape.reshape(scores, &[1, 4, 4])?;
    let ce = tape.cross_entropy(scores, targets, None)?;
    let grads = tape.backward(ce)?;
    Ok((tape.value(ce).item()?, grads.tensor(qv).into_data()))
}

fn main() -> threephase::Result<()> {
    let mut rng = Rng::new(7);
    let q = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng)?;
    let k = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng)?;
    let targets = [0, 3, 1, 2];
    let (value, grad_q) = loss(&q, &k, &targets)?;
    println!("cross-entropy of q·kᵀ: {value:.6}");

    let f = |x: &[f64]| {
        let q = Tensor::from_vec(&[4, 6], x.to_vec())?;
        Ok(loss(&q, &k, &targets)?.0)
    };
    let all: Vec<usize> = (0..q.len()).collect();
    let report = check_gradient(f, q.data(), &grad_q, &all, 1e-5)?;
    println!("{} probes, max relative error {:.2e}", report.probes.len(), report.max_rel_err());
    for p in report.probes.iter().take(5) {
        println!("  dq[{:>2}]  tape {:+.8}  numeric {:+.8}", p.index, p.analytic, p.numeric);
    }
    Ok(())
}
