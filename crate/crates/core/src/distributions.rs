//! Normal, Bernoulli, Categorical and Uniform distributions over [`Tensor`]s.
//!
//! Parameters are validated once at construction. `log_prob` is built from
//! tensor ops so it is differentiable with respect to every continuous
//! parameter (and the value, for the continuous kinds). `sample` is always
//! detached; `rsample` exists for Normal and Uniform only.

use thiserror::Error;

use crate::random::RandomStream;
use crate::tensor::{broadcast_shapes, numel, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("{dist}: parameter `{param}` is NaN at flat index {index}")]
    NanParameter {
        dist: &'static str,
        param: &'static str,
        index: usize,
    },
    #[error("{dist}: parameter `{param}` = {value} at flat index {index} violates {constraint}")]
    InvalidParameter {
        dist: &'static str,
        param: &'static str,
        index: usize,
        value: f64,
        constraint: &'static str,
    },
    #[error("{dist}: value {value} at flat index {index} is outside the support {support}")]
    Support {
        dist: &'static str,
        index: usize,
        value: f64,
        support: &'static str,
    },
    #[error("{dist} has no reparameterized sampler")]
    RsampleUnsupported { dist: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DistributionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistKind {
    Normal,
    Bernoulli,
    Categorical,
    Uniform,
}

impl DistKind {
    pub fn name(self) -> &'static str {
        match self {
            DistKind::Normal => "Normal",
            DistKind::Bernoulli => "Bernoulli",
            DistKind::Categorical => "Categorical",
            DistKind::Uniform => "Uniform",
        }
    }
}

#[derive(Debug, Clone)]
enum Params {
    Normal { loc: Tensor, scale: Tensor },
    Bernoulli { probs: Tensor },
    Categorical { probs: Tensor },
    Uniform { low: Tensor, high: Tensor },
}

/// Immutable, validated distribution. Cloning aliases the parameter tensors.
#[derive(Debug, Clone)]
pub struct Distribution {
    params: Params,
    batch_shape: Vec<usize>,
}

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Clamp applied to Bernoulli probabilities before taking logs.
const PROB_EPS: f64 = f64::EPSILON;

fn check_nan(dist: &'static str, param: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| v.is_nan()) {
        Some(index) => Err(DistributionError::NanParameter { dist, param, index }),
        None => Ok(()),
    }
}

fn check_each(
    dist: &'static str,
    param: &'static str,
    t: &Tensor,
    constraint: &'static str,
    ok: impl Fn(f64) -> bool,
) -> Result<()> {
    check_nan(dist, param, t)?;
    match t.data().iter().position(|&v| !ok(v)) {
        Some(index) => Err(DistributionError::InvalidParameter {
            dist,
            param,
            index,
            value: t.data()[index],
            constraint,
        }),
        None => Ok(()),
    }
}

fn joint_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    broadcast_shapes(a, b).ok_or_else(|| {
        TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
        .into()
    })
}

impl Distribution {
    pub fn normal(loc: impl Into<Tensor>, scale: impl Into<Tensor>) -> Result<Self> {
        let (loc, scale) = (loc.into(), scale.into());
        check_nan("Normal", "loc", &loc)?;
        check_each("Normal", "scale", &scale, "scale > 0", |v| v > 0.0)?;
        let batch_shape = joint_shape("Normal", loc.shape(), scale.shape())?;
        Ok(Self {
            params: Params::Normal { loc, scale },
            batch_shape,
        })
    }

    pub fn bernoulli(probs: impl Into<Tensor>) -> Result<Self> {
        let probs = probs.into();
        check_each("Bernoulli", "probs", &probs, "0 <= probs <= 1", |v| {
            (0.0..=1.0).contains(&v)
        })?;
        let batch_shape = probs.shape().to_vec();
        Ok(Self {
            params: Params::Bernoulli { probs },
            batch_shape,
        })
    }

    /// Probabilities over the last axis; each row must sum to one (within 1e-6).
    pub fn categorical(probs: impl Into<Tensor>) -> Result<Self> {
        let probs = probs.into();
        check_each("Categorical", "probs", &probs, "probs >= 0", |v| v >= 0.0)?;
        let Some((&k, batch)) = probs.shape().split_last() else {
            return Err(TensorError::AxisOutOfRange { axis: 0, rank: 0 }.into());
        };
        if k == 0 {
            return Err(TensorError::DataLength {
                shape: probs.shape().to_vec(),
                expected: 1,
                actual: 0,
            }
            .into());
        }
        for (row, chunk) in probs.data().chunks(k).enumerate() {
            let total: f64 = chunk.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(DistributionError::InvalidParameter {
                    dist: "Categorical",
                    param: "probs",
                    index: row * k,
                    value: total,
                    constraint: "rows summing to 1",
                });
            }
        }
        let batch_shape = batch.to_vec();
        Ok(Self {
            params: Params::Categorical { probs },
            batch_shape,
        })
    }

    pub fn uniform(low: impl Into<Tensor>, high: impl Into<Tensor>) -> Result<Self> {
        let (low, high) = (low.into(), high.into());
        check_nan("Uniform", "low", &low)?;
        check_nan("Uniform", "high", &high)?;
        let batch_shape = joint_shape("Uniform", low.shape(), high.shape())?;
        let width = high.sub(&low)?;
        check_each("Uniform", "high", &width, "low < high", |v| v > 0.0)?;
        Ok(Self {
            params: Params::Uniform { low, high },
            batch_shape,
        })
    }

    pub fn kind(&self) -> DistKind {
        match self.params {
            Params::Normal { .. } => DistKind::Normal,
            Params::Bernoulli { .. } => DistKind::Bernoulli,
            Params::Categorical { .. } => DistKind::Categorical,
            Params::Uniform { .. } => DistKind::Uniform,
        }
    }

    pub fn batch_shape(&self) -> &[usize] {
        &self.batch_shape
    }

    pub fn has_rsample(&self) -> bool {
        matches!(self.kind(), DistKind::Normal | DistKind::Uniform)
    }

    /// True when the support is all of ℝ (the only kind HMC can move through).
    pub fn is_unbounded_continuous(&self) -> bool {
        self.kind() == DistKind::Normal
    }

    /// Number of categories for a Categorical, `None` otherwise.
    pub fn num_categories(&self) -> Option<usize> {
        match &self.params {
            Params::Categorical { probs } => probs.shape().last().copied(),
            _ => None,
        }
    }

    /// Checks that every element of `x` lies in the support.
    pub fn check_support(&self, x: &Tensor) -> Result<()> {
        let dist = self.kind().name();
        let xs = x.data();
        let bad = |support: &'static str, pred: &dyn Fn(usize, f64) -> bool| -> Result<()> {
            match xs.iter().enumerate().position(|(i, &v)| !pred(i, v)) {
                Some(index) => Err(DistributionError::Support {
                    dist,
                    index,
                    value: xs[index],
                    support,
                }),
                None => Ok(()),
            }
        };
        match &self.params {
            Params::Normal { .. } => bad("real numbers", &|_, v| v.is_finite()),
            Params::Bernoulli { .. } => bad("{0, 1}", &|_, v| v == 0.0 || v == 1.0),
            Params::Categorical { probs } => {
                let k = *probs.shape().last().expect("rank >= 1") as f64;
                bad("integer codes in [0, K)", &|_, v| {
                    v >= 0.0 && v < k && v.fract() == 0.0
                })
            }
            Params::Uniform { low, high } => {
                let out = joint_shape("Uniform", &self.batch_shape, x.shape())?;
                let lo = low.broadcast_to(&out)?.to_vec();
                let hi = high.broadcast_to(&out)?.to_vec();
                let xb = x.broadcast_to(&out)?.to_vec();
                match (0..xb.len()).find(|&i| !(xb[i] >= lo[i] && xb[i] < hi[i])) {
                    Some(index) => Err(DistributionError::Support {
                        dist,
                        index,
                        value: xb[index],
                        support: "[low, high)",
                    }),
                    None => Ok(()),
                }
            }
        }
    }

    /// Elementwise log density (or mass) with shape `broadcast(batch_shape, x.shape)`.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        self.check_support(x)?;
        let out_shape = joint_shape(self.kind().name(), &self.batch_shape, x.shape())?;
        match &self.params {
            Params::Normal { loc, scale } => {
                let z = x.sub(loc)?.div(scale)?;
                let lp = z
                    .square()
                    .mul_scalar(-0.5)
                    .sub(&scale.log()?)?
                    .add_scalar(-HALF_LOG_TWO_PI);
                Ok(lp.broadcast_to(&out_shape)?)
            }
            Params::Bernoulli { probs } => {
                let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let log_p = p.log()?;
                let log_q = p.neg().add_scalar(1.0).log()?;
                let not_x = x.neg().add_scalar(1.0);
                let lp = x.mul(&log_p)?.add(&not_x.mul(&log_q)?)?;
                Ok(lp.broadcast_to(&out_shape)?)
            }
            Params::Categorical { probs } => {
                let k = *probs.shape().last().expect("rank >= 1");
                let mut full = out_shape.clone();
                full.push(k);
                let probs = if probs.shape() == full.as_slice() {
                    probs.clone()
                } else {
                    probs.broadcast_to(&full)?
                };
                let codes: Vec<usize> = x
                    .broadcast_to(&out_shape)?
                    .data()
                    .iter()
                    .map(|&v| v as usize)
                    .collect();
                // zero-probability codes map to log(MIN_POSITIVE) ≈ -708
                Ok(probs.gather_last(&codes)?.clamp(f64::MIN_POSITIVE, 1.0).log()?)
            }
            Params::Uniform { low, high } => {
                let lp = high.sub(low)?.log()?.neg();
                Ok(lp.broadcast_to(&out_shape)?)
            }
        }
    }

    /// Detached draw of shape `batch_shape`.
    pub fn sample(&self, rng: &mut RandomStream) -> Tensor {
        let shape = &self.batch_shape;
        let n = numel(shape);
        let data = match &self.params {
            Params::Normal { loc, scale } => {
                let loc = loc.broadcast_to(shape).expect("validated").to_vec();
                let scale = scale.broadcast_to(shape).expect("validated").to_vec();
                (0..n)
                    .map(|i| loc[i] + scale[i] * rng.standard_normal())
                    .collect()
            }
            Params::Bernoulli { probs } => probs
                .data()
                .iter()
                .map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 })
                .collect(),
            Params::Categorical { probs } => {
                let k = *probs.shape().last().expect("rank >= 1");
                probs
                    .data()
                    .chunks(k)
                    .map(|row| inverse_cdf(row, 1.0 - rng.uniform()) as f64)
                    .collect()
            }
            Params::Uniform { low, high } => {
                let low = low.broadcast_to(shape).expect("validated").to_vec();
                let high = high.broadcast_to(shape).expect("validated").to_vec();
                (0..n)
                    .map(|i| low[i] + (high[i] - low[i]) * rng.uniform())
                    .collect()
            }
        };
        Tensor::new(data, shape).expect("batch shape")
    }

    /// Reparameterized draw connected to the graph through the parameters.
    pub fn rsample(&self, rng: &mut RandomStream) -> Result<Tensor> {
        let shape = &self.batch_shape;
        let n = numel(shape);
        match &self.params {
            Params::Normal { loc, scale } => {
                let eps = Tensor::new(rng.normal_vec(n), shape)?;
                Ok(loc.add(&scale.mul(&eps)?)?)
            }
            Params::Uniform { low, high } => {
                let u = Tensor::new(rng.uniform_vec(n), shape)?;
                Ok(low.add(&high.sub(low)?.mul(&u)?)?)
            }
            _ => Err(DistributionError::RsampleUnsupported {
                dist: self.kind().name(),
            }),
        }
    }
}

/// First index whose running sum reaches `u`, for `u ∈ (0, 1]`. Rounding can
/// leave the total just below `u`; the last positive-mass index is used then.
fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if acc >= u {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl From<f64> for Tensor {
    fn from(v: f64) -> Self {
        Tensor::scalar(v)
    }
}

impl From<&Tensor> for Tensor {
    fn from(t: &Tensor) -> Self {
        t.clone()
    }
}

/// `-½ log 2π`, exposed for hand-computed oracles in tests and benchmarks.
pub fn normal_log_normalizer() -> f64 {
    -HALF_LOG_TWO_PI
}
