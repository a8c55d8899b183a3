//! Hamiltonian Monte Carlo with a fixed step size and trajectory length.
//!
//! The model's unobserved sites are flattened into one position vector. The
//! potential is the negative log joint evaluated by running the model with
//! every latent forced to a gradient-tracking leaf; its gradient comes from
//! the autodiff graph. Each transition draws `p ~ N(0, I)`, integrates `L`
//! leapfrog steps and applies a Metropolis correction.

use indexmap::IndexMap;

use crate::effects::{trace_run, Context, Handler, Message, MsgType, Trace};
use crate::error::{PplError, Result};
use crate::random::RandomStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub step_size: f64,
    pub num_leapfrog_steps: usize,
    pub num_warmup: usize,
    pub num_samples: usize,
    /// Starting values per latent site; sites left out start at a prior draw.
    pub initial: IndexMap<String, Tensor>,
}

impl HmcConfig {
    pub fn new(step_size: f64, num_leapfrog_steps: usize, num_warmup: usize, num_samples: usize) -> Self {
        Self {
            step_size,
            num_leapfrog_steps,
            num_warmup,
            num_samples,
            initial: IndexMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(PplError::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.num_leapfrog_steps == 0 {
            return Err(PplError::InvalidArgument("num_leapfrog_steps must be >= 1".into()));
        }
        if self.num_samples == 0 {
            return Err(PplError::InvalidArgument("num_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Position together with its potential energy and gradient.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub position: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
}

/// A potential energy `U(q)` with gradient.
pub trait Potential {
    fn evaluate(&mut self, position: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn point(&mut self, position: Vec<f64>) -> Result<PhasePoint> {
        let (potential, grad) = self.evaluate(&position)?;
        Ok(PhasePoint {
            position,
            potential,
            grad,
        })
    }
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Potential for F {
    fn evaluate(&mut self, position: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(position)
    }
}

pub fn kinetic_energy(momentum: &[f64]) -> f64 {
    0.5 * momentum.iter().map(|p| p * p).sum::<f64>()
}

/// `num_steps` rounds of half-kick, drift, half-kick. Returns the final
/// phase point and momentum.
pub fn leapfrog(
    potential: &mut impl Potential,
    start: &PhasePoint,
    momentum: &[f64],
    step_size: f64,
    num_steps: usize,
) -> Result<(PhasePoint, Vec<f64>)> {
    let mut point = start.clone();
    let mut p = momentum.to_vec();
    for _ in 0..num_steps {
        for (pi, g) in p.iter_mut().zip(&point.grad) {
            *pi -= 0.5 * step_size * g;
        }
        let q: Vec<f64> = point.position.iter().zip(&p).map(|(q, p)| q + step_size * p).collect();
        point = potential.point(q)?;
        for (pi, g) in p.iter_mut().zip(&point.grad) {
            *pi -= 0.5 * step_size * g;
        }
        if !point.potential.is_finite() {
            break;
        }
    }
    Ok((point, p))
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub point: PhasePoint,
    pub accept_prob: f64,
    pub accepted: bool,
}

/// One HMC transition from `current`.
pub fn hmc_transition(
    potential: &mut impl Potential,
    current: &PhasePoint,
    step_size: f64,
    num_steps: usize,
    rng: &mut RandomStream,
) -> Result<Transition> {
    let momentum = rng.normal_vec(current.position.len());
    let h_old = current.potential + kinetic_energy(&momentum);
    let (proposal, p_new) = leapfrog(potential, current, &momentum, step_size, num_steps)?;
    let h_new = proposal.potential + kinetic_energy(&p_new);
    let accept_prob = if h_new.is_finite() {
        (h_old - h_new).exp().min(1.0)
    } else {
        0.0
    };
    let accepted = rng.uniform() < accept_prob;
    Ok(Transition {
        point: if accepted { proposal } else { current.clone() },
        accept_prob,
        accepted,
    })
}

#[derive(Debug, Clone)]
pub struct HmcRun {
    /// Post-warmup traces, one per iteration.
    pub samples: Vec<Trace>,
    /// Fraction of accepted proposals during the sampling phase.
    pub acceptance_rate: f64,
    /// `(site, shape)` in flattening order.
    pub layout: Vec<(String, Vec<usize>)>,
}

impl HmcRun {
    /// Flattened values of one site across all samples.
    pub fn site_values(&self, name: &str) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .filter_map(|t| t.get(name).map(|s| s.value.to_vec()))
            .collect()
    }
}

/// Replaces unobserved sample values with the given tensors.
struct Substitute {
    values: IndexMap<String, Tensor>,
}

impl Handler for Substitute {
    fn process(&mut self, msg: &mut Message) -> Result<()> {
        if msg.msg_type == MsgType::Sample && !msg.is_observed {
            if let Some(v) = self.values.get(&msg.name) {
                msg.value = Some(v.clone());
                msg.done = true;
            }
        }
        Ok(())
    }
}

fn latent_layout(trace: &Trace) -> Result<Vec<(String, Vec<usize>)>> {
    trace
        .latent_sites()
        .map(|s| {
            let dist = s.dist.as_ref().expect("sample site");
            if !dist.is_unbounded_continuous() {
                return Err(PplError::ConstrainedLatent {
                    name: s.name.clone(),
                    dist: dist.kind().name(),
                });
            }
            Ok((s.name.clone(), s.value.shape().to_vec()))
        })
        .collect()
}

struct ModelPotential<'a, A: ?Sized, M> {
    ctx: &'a mut Context,
    model: &'a M,
    args: &'a A,
    layout: &'a [(String, Vec<usize>)],
    last_trace: Option<Trace>,
}

impl<A, M, T> ModelPotential<'_, A, M>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<T>,
{
    fn run(&mut self, position: &[f64]) -> Result<(f64, Vec<f64>, Trace)> {
        let mut values = IndexMap::new();
        let mut leaves = Vec::with_capacity(self.layout.len());
        let mut offset = 0;
        for (name, shape) in self.layout {
            let n: usize = shape.iter().product();
            let leaf = Tensor::leaf(position[offset..offset + n].to_vec(), shape)?;
            offset += n;
            values.insert(name.clone(), leaf.clone());
            leaves.push(leaf);
        }
        let (model, args) = (self.model, self.args);
        let traced = self.ctx.with_handler(Substitute { values }, |ctx| {
            trace_run(ctx, model, args)
        })?;
        let trace = traced.trace;
        let names: Vec<&str> = trace.latent_sites().map(|s| s.name.as_str()).collect();
        if names.len() != self.layout.len() || names.iter().zip(self.layout).any(|(a, (b, _))| a != b) {
            return Err(PplError::DynamicStructure(format!(
                "latent sites changed between runs: {:?}",
                names
            )));
        }
        let log_joint = trace.log_prob_sum()?;
        let potential = -log_joint.item();
        let mut grad = Vec::with_capacity(position.len());
        if log_joint.requires_grad() {
            log_joint.neg().backward()?;
        }
        for leaf in &leaves {
            match leaf.grad() {
                Some(g) => grad.extend(g),
                None => grad.extend(std::iter::repeat(0.0).take(leaf.numel())),
            }
        }
        Ok((potential, grad, trace))
    }
}

impl<A, M, T> Potential for ModelPotential<'_, A, M>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<T>,
{
    fn evaluate(&mut self, position: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (u, g, trace) = self.run(position)?;
        self.last_trace = Some(trace);
        Ok((u, g))
    }
}

/// Runs HMC on a conditioned model whose latent sites are static and all
/// Normal-distributed.
pub fn hmc_run<A, M, T>(ctx: &mut Context, model: &M, args: &A, cfg: &HmcConfig) -> Result<HmcRun>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<T>,
{
    cfg.validate()?;
    let probe_a = trace_run(ctx, model, args)?.trace;
    let probe_b = trace_run(ctx, model, args)?.trace;
    let layout = latent_layout(&probe_a)?;
    if layout != latent_layout(&probe_b)? {
        return Err(PplError::DynamicStructure(
            "probe runs disagree on latent sites or shapes".into(),
        ));
    }
    if let Some(name) = cfg.initial.keys().find(|k| !layout.iter().any(|(n, _)| n == *k)) {
        return Err(PplError::InvalidArgument(format!(
            "initial value for unknown latent site `{name}`"
        )));
    }
    let mut position = Vec::new();
    for (name, shape) in &layout {
        let value = match cfg.initial.get(name) {
            Some(v) if v.shape() == shape.as_slice() => v.to_vec(),
            Some(v) => {
                return Err(PplError::InvalidArgument(format!(
                    "initial value for `{name}` has shape {:?}, expected {shape:?}",
                    v.shape()
                )))
            }
            None => probe_a.get(name).expect("in layout").value.to_vec(),
        };
        position.extend(value);
    }

    let mut rng = ctx.rng.split();
    let mut potential = ModelPotential {
        ctx,
        model,
        args,
        layout: &layout,
        last_trace: None,
    };
    let mut current = potential.point(position)?;
    if !current.potential.is_finite() {
        return Err(PplError::NonFinite {
            what: "potential energy at initialization".into(),
            site: potential.last_trace.as_ref().and_then(|t| t.first_non_finite_site()).map(str::to_string),
        });
    }
    let mut current_trace = potential.last_trace.take().expect("evaluated");

    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut accepted = 0usize;
    for i in 0..cfg.num_warmup + cfg.num_samples {
        let t = hmc_transition(&mut potential, &current, cfg.step_size, cfg.num_leapfrog_steps, &mut rng)?;
        if t.accepted {
            current_trace = potential.last_trace.take().expect("evaluated");
        }
        current = t.point;
        if i >= cfg.num_warmup {
            accepted += t.accepted as usize;
            samples.push(current_trace.clone());
        }
    }
    Ok(HmcRun {
        acceptance_rate: accepted as f64 / cfg.num_samples as f64,
        samples,
        layout,
    })
}
