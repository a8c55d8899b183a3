//! A direct transcription of the classic small example: a single latent
//! code decoded by one raw affine layer into Bernoulli pixel probabilities.
//! Kept as a test model; the working VAE uses registered MLP modules.

use crate::distributions::Distribution;
use crate::effects::{Constraint, Context, ParamInit};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DemoArgs {
    pub z_dim: usize,
    /// `[B, x_dim]` binary pixels.
    pub x: Tensor,
}

/// Sites in order: "z", param "weight", param "bias", "x".
pub fn demo_model(ctx: &mut Context, args: &DemoArgs) -> Result<Tensor> {
    let (b, x_dim) = (args.x.shape()[0], args.x.shape()[1]);
    let z_dim = args.z_dim;
    let z = ctx.draw(
        "z",
        &Distribution::normal(Tensor::zeros(&[b, z_dim]), Tensor::ones(&[b, z_dim]))?,
    )?;
    let w = ctx.param(
        "weight",
        ParamInit::lazy(move |rng| Tensor::new(rng.normal_vec(z_dim * x_dim), &[z_dim, x_dim]).expect("sized")),
        Constraint::Real,
    )?;
    let bias = ctx.param("bias", Tensor::zeros(&[x_dim]), Constraint::Real)?;
    let ps = z.matmul(&w)?.add(&bias)?.sigmoid();
    ctx.observe("x", &Distribution::bernoulli(ps)?, &args.x)
}

/// `z ~ N(x W_loc, softplus(x W_scale))` with raw params.
pub fn demo_guide(ctx: &mut Context, args: &DemoArgs) -> Result<Tensor> {
    let (x_dim, z_dim) = (args.x.shape()[1], args.z_dim);
    let w_loc = ctx.param("guide_loc", Tensor::zeros(&[x_dim, z_dim]), Constraint::Real)?;
    let w_scale = ctx.param("guide_scale", Tensor::zeros(&[x_dim, z_dim]), Constraint::Real)?;
    let loc = args.x.matmul(&w_loc)?;
    let scale = args.x.matmul(&w_scale)?.softplus();
    ctx.draw("z", &Distribution::normal(loc, scale)?)
}
