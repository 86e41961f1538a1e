//! Central finite-difference verification of reverse-mode gradients.
//!
//! The oracle only re-evaluates the forward function at perturbed inputs,
//! so it is independent of every backward closure it checks. All checks
//! run at f64.

use super::{Rng, Tensor};
use crate::error::Result;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over leaves of ||analytic - numeric||_inf / (||numeric||_inf + 1e-12)
    pub max_rel_err: f64,
    pub checked_scalars: usize,
}

/// Compare the analytic gradient of `f` (a scalar function of the given
/// leaves) against central finite differences.
///
/// `f` is called with fresh leaf tensors each time; it must be pure.
pub fn check<F>(f: F, shapes: &[&[usize]], rng: &mut Rng, h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|sh| {
            let n: usize = sh.iter().product();
            (0..n).map(|_| rng.normal()).collect()
        })
        .collect();
    check_at(f, shapes, &inputs, h)
}

/// As [`check`] but at caller-supplied input values.
pub fn check_at<F>(f: F, shapes: &[&[usize]], inputs: &[Vec<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = shapes
        .iter()
        .zip(inputs)
        .map(|(sh, data)| Tensor::leaf(sh, data.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().expect("leaf gradient populated by backward"))
        .collect();

    let eval = |perturbed: &[Vec<f64>]| -> Result<f64> {
        let consts: Vec<Tensor<f64>> = shapes
            .iter()
            .zip(perturbed)
            .map(|(sh, data)| Tensor::from_vec(sh, data.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&consts)?.item())
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let step = h * input[i].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[li][i] += step;
            let mut minus = inputs.to_vec();
            minus[li][i] -= step;
            numeric[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            checked += 1;
        }
        let num_inf = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff_inf = numeric
            .iter()
            .zip(&analytic[li])
            .fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
        let rel = diff_inf / (num_inf + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck {
        max_rel_err: max_rel,
        checked_scalars: checked,
    })
}
