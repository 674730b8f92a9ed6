//! Central finite-difference oracle for unit tests. Evaluates only forward
//! passes, so it stays independent of the backward rules it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

/// Pushes values with `|x| < margin` out to `±margin` so a relu kink cannot
/// fall inside the difference stencil.
pub fn shift_away_from_zero(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&g, &vars).unwrap().value().item()
}

/// Checks every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, tol: f64, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| g.variable(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&g, &vars).unwrap();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("input reached by the loss");
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (evaluate(&plus, &f) - evaluate(&minus, &f)) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            assert!(
                err < tol,
                "input {k} coord {i}: analytic {} vs numeric {numeric} (rel err {err:e})",
                analytic.data()[i]
            );
            worst = worst.max(err);
        }
    }
    eprintln!("gradcheck worst relative error {worst:e}");
}
