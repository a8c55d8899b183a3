use std::rc::Rc;

use indexmap::IndexSet;

use crate::effects::{replay, trace_run, Context, Trace};
use crate::error::{MatchReport, PplError, Result};
use crate::tensor::{broadcast_shapes, Tensor};

use super::adam::AdamState;

/// Checks that the guide supplies exactly the model's unobserved sample sites.
pub fn check_model_guide_match(model_trace: &Trace, guide_trace: &Trace) -> Result<()> {
    let mut report = MatchReport::default();
    for site in model_trace.latent_sites() {
        match guide_trace.get(&site.name).filter(|g| g.is_sample()) {
            None => report.missing_in_guide.push(site.name.clone()),
            Some(g) => {
                if broadcast_shapes(site.value.shape(), g.value.shape()).is_none() {
                    report.shape_mismatch.push((
                        site.name.clone(),
                        site.value.shape().to_vec(),
                        g.value.shape().to_vec(),
                    ));
                }
            }
        }
    }
    for site in guide_trace.sample_sites() {
        if !model_trace.get(&site.name).is_some_and(|m| m.is_sample()) {
            report.extra_in_guide.push(site.name.clone());
        }
    }
    if report.is_empty() {
        Ok(())
    } else {
        Err(PplError::ModelGuideMismatch(report))
    }
}

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    /// Mean over particles of `log p(x, z) - log q(z)`, in nats.
    pub elbo: f64,
    /// Scalar whose gradient estimates `-∇ELBO`.
    pub surrogate_loss: Tensor,
    pub num_particles: usize,
    pub particle_elbos: Vec<f64>,
    /// Param names seen by the guide or the model, in first-touch order.
    pub touched_params: Vec<String>,
}

impl ElboEstimate {
    /// Monte-Carlo standard error of `elbo` across particles.
    pub fn standard_error(&self) -> f64 {
        let n = self.particle_elbos.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let var = self
            .particle_elbos
            .iter()
            .map(|e| (e - self.elbo).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

/// One guide run followed by the model replayed against it.
pub(crate) struct Particle {
    pub guide: Rc<Trace>,
    pub model: Trace,
}

pub(crate) fn run_particle<A, M, G, TM, TG>(ctx: &mut Context, model: &M, guide: &G, args: &A) -> Result<Particle>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<TM>,
    G: Fn(&mut Context, &A) -> Result<TG>,
{
    // the guide always finishes before the model starts
    let guide_trace = Rc::new(trace_run(ctx, guide, args)?.trace);
    let replayed = replay(model, guide_trace.clone());
    let model_trace = trace_run(ctx, &replayed, args)?.trace;
    check_model_guide_match(&model_trace, &guide_trace)?;
    Ok(Particle {
        guide: guide_trace,
        model: model_trace,
    })
}

impl Particle {
    pub(crate) fn log_weight(&self) -> Result<Tensor> {
        let lw = self.model.log_prob_sum()?.sub(&self.guide.log_prob_sum()?)?;
        if !lw.item().is_finite() && !(lw.item() == f64::NEG_INFINITY) {
            return Err(self.non_finite("ELBO"));
        }
        Ok(lw)
    }

    fn non_finite(&self, what: &str) -> PplError {
        let site = self
            .model
            .first_non_finite_site()
            .or_else(|| self.guide.first_non_finite_site())
            .map(str::to_string);
        PplError::NonFinite {
            what: what.to_string(),
            site,
        }
    }
}

/// Monte-Carlo ELBO with a surrogate loss combining the pathwise gradient
/// (through reparameterized draws and all log-densities) and the
/// score-function term `log q(site) * detach(elbo)` for every guide site
/// drawn without reparameterization.
pub fn elbo_estimate<A, M, G, TM, TG>(
    ctx: &mut Context,
    model: &M,
    guide: &G,
    args: &A,
    num_particles: usize,
) -> Result<ElboEstimate>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<TM>,
    G: Fn(&mut Context, &A) -> Result<TG>,
{
    if num_particles == 0 {
        return Err(PplError::InvalidArgument("num_particles must be >= 1".into()));
    }
    let mut particle_elbos = Vec::with_capacity(num_particles);
    let mut surrogate: Option<Tensor> = None;
    let mut touched = IndexSet::new();
    for _ in 0..num_particles {
        let particle = run_particle(ctx, model, guide, args)?;
        for site in particle.guide.param_sites().chain(particle.model.param_sites()) {
            touched.insert(site.name.clone());
        }
        let elbo_p = particle.log_weight()?;
        if !elbo_p.item().is_finite() {
            return Err(particle.non_finite("ELBO"));
        }
        let cost = elbo_p.detach();
        let mut objective = elbo_p.clone();
        for site in particle.guide.latent_sites().filter(|s| !s.reparameterized) {
            let lq = site.log_prob.as_ref().expect("recorded by trace");
            if lq.requires_grad() {
                objective = objective.add(&lq.sum().mul(&cost)?)?;
            }
        }
        particle_elbos.push(elbo_p.item());
        let loss = objective.neg();
        surrogate = Some(match surrogate {
            None => loss,
            Some(acc) => acc.add(&loss)?,
        });
    }
    let n = num_particles as f64;
    let surrogate = surrogate.expect("num_particles >= 1");
    let surrogate_loss = if num_particles == 1 { surrogate } else { surrogate.mul_scalar(1.0 / n) };
    Ok(ElboEstimate {
        elbo: particle_elbos.iter().sum::<f64>() / n,
        surrogate_loss,
        num_particles,
        particle_elbos,
        touched_params: touched.into_iter().collect(),
    })
}

/// One SVI update. Returns the loss `-elbo`. On a non-finite loss or
/// gradient the step is aborted and no param changes.
pub fn svi_step<A, M, G, TM, TG>(
    ctx: &mut Context,
    model: &M,
    guide: &G,
    args: &A,
    optimizer: &mut AdamState,
    num_particles: usize,
) -> Result<f64>
where
    A: ?Sized,
    M: Fn(&mut Context, &A) -> Result<TM>,
    G: Fn(&mut Context, &A) -> Result<TG>,
{
    ctx.params().zero_grad();
    let est = elbo_estimate(ctx, model, guide, args, num_particles)?;
    if est.surrogate_loss.requires_grad() {
        est.surrogate_loss.backward()?;
    }
    let store = ctx.params();
    let leaves: Vec<(&str, &Tensor)> = est
        .touched_params
        .iter()
        .filter_map(|name| store.get(name).map(|e| (name.as_str(), e.unconstrained())))
        .collect();
    for (name, leaf) in &leaves {
        if leaf.grad_ref().as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(PplError::NonFinite {
                what: format!("gradient of param `{name}`"),
                site: None,
            });
        }
    }
    optimizer.update(leaves)?;
    Ok(-est.elbo)
}

/// Model, guide and optimizer bundled for repeated [`svi_step`] calls.
pub struct Svi<M, G> {
    pub model: M,
    pub guide: G,
    pub optimizer: AdamState,
    pub num_particles: usize,
}

impl<M, G> Svi<M, G> {
    pub fn new(model: M, guide: G, optimizer: AdamState) -> Self {
        Self {
            model,
            guide,
            optimizer,
            num_particles: 1,
        }
    }

    pub fn with_particles(mut self, num_particles: usize) -> Self {
        self.num_particles = num_particles;
        self
    }

    pub fn step<A, TM, TG>(&mut self, ctx: &mut Context, args: &A) -> Result<f64>
    where
        A: ?Sized,
        M: Fn(&mut Context, &A) -> Result<TM>,
        G: Fn(&mut Context, &A) -> Result<TG>,
    {
        svi_step(ctx, &self.model, &self.guide, args, &mut self.optimizer, self.num_particles)
    }
}
