//! Gaussian pair with a closed-form posterior, used as an inference oracle.

use crate::distributions::Distribution;
use crate::effects::{Constraint, Context, ScaleHandler};
use crate::error::Result;
use crate::tensor::Tensor;

/// Initial value of the guide location param.
pub const Q_LOC_INIT: f64 = 1.0;
/// Initial value of the guide scale param.
pub const Q_SCALE_INIT: f64 = 1.0;

/// `z ~ N(0, 1)`, `x ~ N(z, 1)` observed at `x_obs`.
pub fn conjugate_model(ctx: &mut Context, x_obs: &f64) -> Result<Tensor> {
    let z = ctx.draw("z", &Distribution::normal(0.0, 1.0)?)?;
    ctx.observe("x", &Distribution::normal(&z, 1.0)?, &Tensor::scalar(*x_obs))?;
    Ok(z)
}

/// `z ~ N(q_loc, q_scale)` with learnable params.
pub fn conjugate_guide(ctx: &mut Context, _x_obs: &f64) -> Result<Tensor> {
    let loc = ctx.param("q_loc", Q_LOC_INIT, Constraint::Real)?;
    let scale = ctx.param("q_scale", Q_SCALE_INIT, Constraint::Positive)?;
    ctx.draw("z", &Distribution::normal(loc, scale)?)
}

/// The prior used as a proposal.
pub fn conjugate_prior_guide(ctx: &mut Context, _x_obs: &f64) -> Result<Tensor> {
    ctx.draw("z", &Distribution::normal(0.0, 1.0)?)
}

/// The exact posterior used as a proposal.
pub fn conjugate_exact_guide(ctx: &mut Context, x_obs: &f64) -> Result<Tensor> {
    let (loc, scale) = conjugate_posterior(*x_obs);
    ctx.draw("z", &Distribution::normal(loc, scale)?)
}

/// Posterior `(mean, std)` of `z` given `x_obs`: `N(x/2, 1/√2)`.
pub fn conjugate_posterior(x_obs: f64) -> (f64, f64) {
    (x_obs / 2.0, std::f64::consts::FRAC_1_SQRT_2)
}

/// `log N(x_obs; 0, √2)`.
pub fn conjugate_log_marginal(x_obs: f64) -> f64 {
    -0.5 * (4.0 * std::f64::consts::PI).ln() - x_obs * x_obs / 4.0
}

/// Unconditioned forward draw of `(z, x)`.
pub fn conjugate_prior_predictive(ctx: &mut Context, _: &()) -> Result<(Tensor, Tensor)> {
    let z = ctx.draw("z", &Distribution::normal(0.0, 1.0)?)?;
    let x = ctx.draw("x", &Distribution::normal(&z, 1.0)?)?;
    Ok((z, x))
}

/// Shared latent over a mini-batch: `z ~ N(0, 1)` at "z" and `x_i ~ N(z, 1)`
/// at "x", with the observations weighted by `num_total / len(xs)`.
pub fn conjugate_batch_model(ctx: &mut Context, (xs, num_total): &(Tensor, usize)) -> Result<Tensor> {
    let z = ctx.draw("z", &Distribution::normal(0.0, 1.0)?)?;
    let likelihood = Distribution::normal(z.broadcast_to(xs.shape())?, 1.0)?;
    let factor = *num_total as f64 / xs.numel() as f64;
    ctx.with_handler(ScaleHandler::new(factor)?, |ctx| ctx.observe("x", &likelihood, xs))?;
    Ok(z)
}
