//! SVI with a Monte-Carlo ELBO, importance sampling and HMC over traced programs.

mod adam;
mod elbo;
mod hmc;
mod importance;

pub use adam::{AdamConfig, AdamState};
pub use elbo::{check_model_guide_match, elbo_estimate, svi_step, ElboEstimate, Svi};
pub use hmc::{
    hmc_run, hmc_transition, kinetic_energy, leapfrog, HmcConfig, HmcRun, PhasePoint, Potential,
    Transition,
};
pub use importance::{importance_sample, WeightedTraces};
