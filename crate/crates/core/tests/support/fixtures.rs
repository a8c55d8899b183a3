//! Small models with exactly computable answers.

use effectppl::distributions::Distribution;
use effectppl::effects::{Constraint, Context};
use effectppl::error::Result;
use effectppl::inference::elbo_estimate;
use effectppl::tensor::Tensor;

pub const PRIOR_P: f64 = 0.3;
pub const X_OBS: f64 = 0.4;
pub const PHI_INIT: f64 = 0.2;

/// `b ~ Bernoulli(0.3)`, `x ~ N(2b - 1, 1)` observed at 0.4.
pub fn coin_model(ctx: &mut Context, _: &()) -> Result<Tensor> {
    let b = ctx.draw("b", &Distribution::bernoulli(PRIOR_P)?)?;
    let loc = b.mul_scalar(2.0).add_scalar(-1.0);
    ctx.observe("x", &Distribution::normal(loc, 1.0)?, &Tensor::scalar(X_OBS))?;
    Ok(b)
}

/// `b ~ Bernoulli(sigmoid(phi))`.
pub fn coin_guide(ctx: &mut Context, _: &()) -> Result<Tensor> {
    let phi = ctx.param("phi", PHI_INIT, Constraint::Real)?;
    ctx.draw("b", &Distribution::bernoulli(phi.sigmoid())?)
}

fn log_normal(x: f64, loc: f64) -> f64 {
    -0.5 * (x - loc).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// dELBO/dphi by summing over both values of `b`.
pub fn coin_exact_gradient(phi: f64) -> f64 {
    let q1 = 1.0 / (1.0 + (-phi).exp());
    let q0 = 1.0 - q1;
    let f1 = PRIOR_P.ln() + log_normal(X_OBS, 1.0) - q1.ln();
    let f0 = (1.0 - PRIOR_P).ln() + log_normal(X_OBS, -1.0) - q0.ln();
    q1 * q0 * (f1 - f0)
}

/// Per-particle surrogate gradients of the ELBO w.r.t. `phi`; returns
/// `(mean, standard error)`.
pub fn coin_surrogate_gradient(seed: u64, particles: usize) -> (f64, f64) {
    let mut ctx = Context::new(seed);
    let mut grads = Vec::with_capacity(particles);
    for _ in 0..particles {
        ctx.params().zero_grad();
        let est = elbo_estimate(&mut ctx, &coin_model, &coin_guide, &(), 1).unwrap();
        est.surrogate_loss.backward().unwrap();
        let g = ctx.params().get("phi").unwrap().unconstrained().grad().unwrap()[0];
        grads.push(-g);
    }
    mean_and_se(&grads)
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Standard error of the mean of a correlated chain by batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = xs.chunks(size).take(batches).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    mean_and_se(&means).1
}

/// Total-variation distance between the empirical site-count histogram and
/// Geometric(p) on {1, 2, ...}, including the unobserved tail.
pub fn geometric_tv(counts: &[usize], p: f64) -> f64 {
    let n = counts.len() as f64;
    let max = *counts.iter().max().unwrap_or(&1);
    let mut hist = vec![0.0; max + 1];
    for &c in counts {
        hist[c] += 1.0 / n;
    }
    let mut tv = 0.0;
    let mut covered = 0.0;
    for (k, &freq) in hist.iter().enumerate().skip(1) {
        let exact = p * (1.0 - p).powi(k as i32 - 1);
        covered += exact;
        tv += (freq - exact).abs();
    }
    0.5 * (tv + (1.0 - covered))
}
