//! Central finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

/// Relative error with a denominator floored at `1e-6`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `d/dinputs Σ w ⊙ f(inputs)` against central differences with step `h`.
///
/// `w` is a fixed pseudo-random weighting so that every output entry
/// contributes with a distinct coefficient.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        Tensor::uniform(out.shape().to_vec(), 0.5, 1.5, &mut rng)
    };
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(&out, &w)?;
        Ok(tape.sum(&prod))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = objective(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        objective(&mut tape, &vars)?.value().item()
    };

    let mut report = GradCheck::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.wrt(var).unwrap_or(&zeros);
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.entries += 1;
        }
    }
    Ok(report)
}
