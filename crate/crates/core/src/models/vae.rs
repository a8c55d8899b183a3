//! Variational autoencoder over binarized images, written as a model/guide
//! pair, plus a hand-coded version of the same ELBO that calls the tensor
//! and distribution layers directly with no handler dispatch.

use indexmap::IndexMap;

use crate::distributions::Distribution;
use crate::effects::{Context, ParamStore, ScaleHandler};
use crate::error::{PplError, Result};
use crate::inference::AdamState;
use crate::random::RandomStream;
use crate::tensor::{Tensor, TensorError};

use super::mlp::{Head, Mlp, MlpOutput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    pub z_dim: usize,
    pub hidden_dim: usize,
    pub data_dim: usize,
    pub batch_size: usize,
    /// Dataset size; observations are scaled by `num_total / B`.
    pub num_total: usize,
}

impl VaeConfig {
    pub fn new(z_dim: usize, hidden_dim: usize, batch_size: usize, num_total: usize) -> Result<Self> {
        let cfg = Self {
            z_dim,
            hidden_dim,
            data_dim: 784,
            batch_size,
            num_total,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.hidden_dim == 0 || self.data_dim == 0 || self.batch_size == 0 || self.num_total == 0 {
            return Err(PplError::InvalidArgument(format!("VAE sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder(&self) -> Mlp {
        Mlp::new(
            "encoder",
            vec![self.data_dim, self.hidden_dim, self.hidden_dim, self.z_dim],
            Head::LocScale,
        )
        .expect("validated sizes")
    }

    pub fn decoder(&self) -> Mlp {
        Mlp::new(
            "decoder",
            vec![self.z_dim, self.hidden_dim, self.hidden_dim, self.data_dim],
            Head::Probs,
        )
        .expect("validated sizes")
    }

    fn obs_scale(&self, rows: usize) -> f64 {
        self.num_total as f64 / rows as f64
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.rank() != 2 || batch.shape()[1] != self.data_dim || batch.shape()[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "vae batch",
                lhs: batch.shape().to_vec(),
                rhs: vec![self.batch_size, self.data_dim],
            }
            .into());
        }
        Ok(batch.shape()[0])
    }
}

fn decode(ctx: &mut Context, cfg: &VaeConfig, z: &Tensor) -> Result<Tensor> {
    match cfg.decoder().forward(ctx, z)? {
        MlpOutput::Probs(p) => Ok(p),
        MlpOutput::LocScale { .. } => unreachable!("decoder has a probs head"),
    }
}

/// Generative half: `z ~ N(0, I)` at "z", pixels `x ~ Bernoulli(decoder(z))`
/// at "x". With `obs` the pixels are observed and weighted by
/// `num_total / rows`; without it, `rows` images are drawn.
pub fn vae_generate(ctx: &mut Context, cfg: &VaeConfig, rows: usize, obs: Option<&Tensor>) -> Result<Tensor> {
    let prior = Distribution::normal(Tensor::zeros(&[rows, cfg.z_dim]), Tensor::ones(&[rows, cfg.z_dim]))?;
    let z = ctx.draw("z", &prior)?;
    let probs = decode(ctx, cfg, &z)?;
    let likelihood = Distribution::bernoulli(probs)?;
    ctx.with_handler(ScaleHandler::new(cfg.obs_scale(rows))?, |ctx| {
        ctx.sample("x", &likelihood, obs)
    })
}

/// Model conditioned on a `[B, data_dim]` batch of binary pixels.
pub fn vae_model(ctx: &mut Context, batch: &Tensor, cfg: &VaeConfig) -> Result<Tensor> {
    let rows = cfg.check_batch(batch)?;
    vae_generate(ctx, cfg, rows, Some(batch))
}

/// Amortized guide: `z ~ N(loc(x), scale(x))` from the encoder.
pub fn vae_guide(ctx: &mut Context, batch: &Tensor, cfg: &VaeConfig) -> Result<Tensor> {
    cfg.check_batch(batch)?;
    let MlpOutput::LocScale { loc, scale } = cfg.encoder().forward(ctx, batch)? else {
        unreachable!("encoder has a loc/scale head")
    };
    ctx.draw("z", &Distribution::normal(loc, scale)?)
}

/// Resolves `{prefix}.*` entries of a store into local-name → constrained tensor.
fn module_params(store: &ParamStore, mlp: &Mlp) -> Result<IndexMap<String, Tensor>> {
    let prefix = format!("{}.", mlp.prefix());
    let params: IndexMap<String, Tensor> = store
        .iter()
        .filter_map(|(name, e)| name.strip_prefix(&prefix).map(|local| (local.to_string(), e.constrained())))
        .collect();
    if params.is_empty() {
        return Err(PplError::InvalidArgument(format!(
            "no `{}` params in the store; run the framework VAE once to initialize them",
            mlp.prefix()
        )));
    }
    Ok(params)
}

/// Single-particle ELBO of the VAE computed with direct tensor calls.
/// Consumes `rng` exactly like one framework particle, so on the same
/// params and stream state it reproduces the framework ELBO bit for bit.
pub struct HandCodedVae {
    cfg: VaeConfig,
    encoder: Mlp,
    decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct HandCodedElbo {
    pub elbo: Tensor,
}

impl HandCodedVae {
    pub fn new(cfg: VaeConfig) -> Self {
        Self {
            encoder: cfg.encoder(),
            decoder: cfg.decoder(),
            cfg,
        }
    }

    pub fn elbo(&self, store: &ParamStore, rng: &mut RandomStream, batch: &Tensor) -> Result<HandCodedElbo> {
        let rows = self.cfg.check_batch(batch)?;
        let enc = module_params(store, &self.encoder)?;
        let dec = module_params(store, &self.decoder)?;
        let MlpOutput::LocScale { loc, scale } = self.encoder.apply(&enc, batch)? else {
            unreachable!()
        };
        let q = Distribution::normal(loc, scale)?;
        let z = q.rsample(rng)?;
        let log_q = q.log_prob(&z)?.sum();
        let prior = Distribution::normal(
            Tensor::zeros(&[rows, self.cfg.z_dim]),
            Tensor::ones(&[rows, self.cfg.z_dim]),
        )?;
        let log_pz = prior.log_prob(&z)?.sum();
        let MlpOutput::Probs(probs) = self.decoder.apply(&dec, &z)? else {
            unreachable!()
        };
        let log_px = Distribution::bernoulli(probs)?
            .log_prob(batch)?
            .mul_scalar(self.cfg.obs_scale(rows))
            .sum();
        let elbo = log_pz.add(&log_px)?.sub(&log_q)?;
        Ok(HandCodedElbo { elbo })
    }

    /// Gradient step on every encoder/decoder param. Returns `-elbo`.
    pub fn step(&self, store: &ParamStore, rng: &mut RandomStream, batch: &Tensor, adam: &mut AdamState) -> Result<f64> {
        store.zero_grad();
        let out = self.elbo(store, rng, batch)?;
        let elbo = out.elbo.item();
        if !elbo.is_finite() {
            return Err(PplError::NonFinite {
                what: "ELBO".into(),
                site: None,
            });
        }
        out.elbo.neg().backward()?;
        adam.update(store.iter().map(|(n, e)| (n, e.unconstrained())))?;
        Ok(-elbo)
    }
}
