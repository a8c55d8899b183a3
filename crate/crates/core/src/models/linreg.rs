//! Bayesian linear regression.

use crate::distributions::Distribution;
use crate::effects::Context;
use crate::error::{PplError, Result};
use crate::tensor::{Tensor, TensorError};

/// Bounds of the uniform prior on the noise scale when it is latent.
pub const SIGMA_PRIOR: (f64, f64) = (0.01, 10.0);

#[derive(Debug, Clone)]
pub struct LinregData {
    /// `[N, D]`
    pub x: Tensor,
    /// `[N]`
    pub y: Tensor,
    /// Known noise scale; `None` makes it a latent at "sigma".
    pub sigma: Option<f64>,
}

impl LinregData {
    pub fn new(x: Tensor, y: Tensor, sigma: Option<f64>) -> Result<Self> {
        if x.rank() != 2 || y.shape() != [x.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linreg data",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            }
            .into());
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n == 0 || d == 0 || n < d {
            return Err(PplError::InvalidArgument(format!("need N >= D >= 1, got N={n}, D={d}")));
        }
        if let Some(s) = sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(PplError::InvalidArgument(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(Self { x, y, sigma })
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }
}

/// `w ~ N(0, I_D)` at "w", optional `sigma ~ Uniform` at "sigma", and
/// `y ~ N(X w, sigma)` observed at "y".
pub fn bayes_linreg_model(ctx: &mut Context, data: &LinregData) -> Result<Tensor> {
    let d = data.dim();
    let w = ctx.draw("w", &Distribution::normal(Tensor::zeros(&[d]), Tensor::ones(&[d]))?)?;
    let sigma = match data.sigma {
        Some(s) => Tensor::scalar(s),
        None => ctx.draw("sigma", &Distribution::uniform(SIGMA_PRIOR.0, SIGMA_PRIOR.1)?)?,
    };
    let mean = data.x.matmul(&w.reshape(&[d, 1])?)?.reshape(&[data.x.shape()[0]])?;
    ctx.observe("y", &Distribution::normal(mean, sigma)?, &data.y)?;
    Ok(w)
}

/// Posterior `(mean, std)` of `w` for `D = 1`, `X = 1`, `sigma = 1`:
/// `N(Σy / (N+1), 1/√(N+1))`.
pub fn intercept_posterior(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    (y.iter().sum::<f64>() / (n + 1.0), 1.0 / (n + 1.0).sqrt())
}
