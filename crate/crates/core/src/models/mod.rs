//! Example programs: a VAE, a conjugate Gaussian pair, a branching
//! program and Bayesian linear regression.

use crate::distributions::Distribution;
use crate::effects::Context;
use crate::error::Result;
use crate::tensor::Tensor;

pub mod branching;
pub mod conjugate;
pub mod demo;
pub mod linreg;
pub mod mlp;
pub mod vae;

pub use branching::branching_model;
pub use conjugate::{conjugate_guide, conjugate_log_marginal, conjugate_model, conjugate_posterior};
pub use linreg::{bayes_linreg_model, LinregData};
pub use mlp::{Head, Mlp, MlpOutput};
pub use vae::{vae_generate, vae_guide, vae_model, HandCodedVae, VaeConfig};

/// A single standard-normal latent at "z", a simple sampler target.
pub fn standard_normal_model(ctx: &mut Context, _: &()) -> Result<Tensor> {
    ctx.draw("z", &Distribution::normal(0.0, 1.0)?)
}
