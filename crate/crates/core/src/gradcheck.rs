//! Central finite-difference gradient checking in 64-bit.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`, worst input.
    pub rel_error: f64,
    /// Number of scalar entries perturbed.
    pub checked: usize,
}

/// Checks every entry of every input of `f`. The builder must return a
/// tensor; it is reduced to a scalar by a fixed random projection so that
/// every output element contributes.
pub fn check<F>(inputs: &[Tensor<f64>], rng: &mut impl Rng, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let proj = Tensor::<f64>::randn(probe, 1.0, rng);

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g
            .value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let p = g.input(proj.clone());
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            checked += 1;
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheck {
        rel_error: worst,
        checked,
    })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
