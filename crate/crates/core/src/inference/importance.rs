use crate::effects::{Context, Trace};
use crate::error::{PplError, Result};

use super::elbo::run_particle;

/// Guide traces with importance log-weights `log p(x, z) - log q(z)`.
#[derive(Debug, Clone)]
pub struct WeightedTraces {
    pub traces: Vec<Trace>,
    pub log_weights: Vec<f64>,
    normalized: Vec<f64>,
    ess: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl WeightedTraces {
    pub fn new(traces: Vec<Trace>, log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(PplError::InvalidArgument("need at least one weighted trace".into()));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(PplError::NonFinite {
                what: "importance log-weight".into(),
                site: None,
            });
        }
        let lse = log_sum_exp(&log_weights);
        if lse == f64::NEG_INFINITY {
            return Err(PplError::DegenerateWeights);
        }
        let normalized: Vec<f64> = log_weights.iter().map(|w| (w - lse).exp()).collect();
        // relative to the largest weight the terms are O(1), which keeps
        // the sums accurate when the weights are (nearly) equal
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rel: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
        let ess = rel.iter().sum::<f64>().powi(2) / rel.iter().map(|u| u * u).sum::<f64>();
        Ok(Self {
            traces,
            log_weights,
            normalized,
            ess,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn normalized_weights(&self) -> &[f64] {
        &self.normalized
    }

    /// `(Σw)² / Σw²`, in `[1, N]`.
    pub fn ess(&self) -> f64 {
        self.ess
    }

    /// `log (1/N Σ exp(log_w))`.
    pub fn log_evidence(&self) -> f64 {
        log_sum_exp(&self.log_weights) - (self.len() as f64).ln()
    }

    /// Self-normalized estimate of `E[f]` under the posterior.
    pub fn expectation(&self, f: impl Fn(&Trace) -> f64) -> f64 {
        self.traces
            .iter()
            .zip(&self.normalized)
            .map(|(t, w)| w * f(t))
            .sum()
    }

    /// Estimate of `E[f]` with its delta-method standard error
    /// `sqrt(Σ w̄ᵢ² (fᵢ − μ̂)²)`.
    pub fn expectation_with_stderr(&self, f: impl Fn(&Trace) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.traces.iter().map(&f).collect();
        let mean: f64 = values.iter().zip(&self.normalized).map(|(v, w)| v * w).sum();
        let var: f64 = values
            .iter()
            .zip(&self.normalized)
            .map(|(v, w)| w * w * (v - mean).powi(2))
            .sum();
        (mean, var.sqrt())
    }
}

/// Draws `n` guide traces as proposals and weights them by the model.
pub fn importance_sample<A, M, G, TM, TG>(
    ctx: &mut Context,
    model: &M,
    guide: &G,
    args: &A,
    n: usize,
) -> Result<WeightedTraces>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<TM>,
    G: Fn(&mut Context, &A) -> Result<TG>,
{
    if n == 0 {
        return Err(PplError::InvalidArgument("importance sampling needs N >= 1".into()));
    }
    let mut traces = Vec::with_capacity(n);
    let mut log_weights = Vec::with_capacity(n);
    for _ in 0..n {
        let particle = run_particle(ctx, model, guide, args)?;
        log_weights.push(particle.log_weight()?.item());
        traces.push(std::rc::Rc::try_unwrap(particle.guide).unwrap_or_else(|rc| (*rc).clone()));
    }
    WeightedTraces::new(traces, log_weights)
}
