use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const DEFAULT_DATA: &str = "data/mnist-512-images.idx3-ubyte";

#[derive(Debug, Parser)]
#[command(name = "ppl", version, about = "Train and query small probabilistic programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fit a guide by stochastic variational inference.
    Train(RunConfig),
    /// Time VAE updates through the handler stack against a hand-coded ELBO.
    Benchmark(RunConfig),
    /// Print forward draws as CSV.
    Sample(RunConfig),
    /// Importance sampling: log evidence, ESS and posterior means.
    Is(RunConfig),
    /// Hamiltonian Monte Carlo: posterior means, variances and acceptance rate.
    Hmc(RunConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// VAE over binarized images.
    Vae,
    /// z ~ N(0,1), x ~ N(z,1) observed at --x-obs.
    Conjugate,
    /// Bernoulli(--prob) trials until the first success.
    Branching,
    /// Bayesian linear regression on a CSV whose last column is y.
    Linreg,
    /// A single standard-normal latent.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Proposal {
    /// The model's prior.
    Prior,
    /// The exact posterior (conjugate model only).
    Posterior,
    /// The trained guide; load its params with --params-in.
    Guide,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must be in (0, 1], got {s}"))
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Model to run; each subcommand has its own default.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Dataset: IDX images, or CSV when the extension is `.csv`.
    #[arg(long, default_value = DEFAULT_DATA)]
    pub data: PathBuf,
    /// Treat the first CSV line as a header.
    #[arg(long)]
    pub csv_header: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.001, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128, value_parser = at_least_one)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    pub num_particles: usize,
    #[arg(long)]
    pub params_out: Option<PathBuf>,
    #[arg(long)]
    pub params_in: Option<PathBuf>,
    /// Comma-separated hidden sizes for the benchmark.
    #[arg(long, value_delimiter = ',', default_value = "64,256,512", value_parser = at_least_one)]
    pub hidden_sizes: Vec<usize>,
    #[arg(long, default_value_t = 64, value_parser = at_least_one)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    pub z_dim: usize,
    /// Observation for the conjugate model.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub x_obs: f64,
    /// SVI steps per epoch for models without a dataset.
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    pub steps_per_epoch: usize,
    /// Draws for `sample`, particles for `is`, kept iterations for `hmc`.
    #[arg(long, value_parser = at_least_one)]
    pub num_samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = Proposal::Prior)]
    pub proposal: Proposal,
    /// Success probability of the branching model.
    #[arg(long, default_value_t = 0.5, value_parser = probability)]
    pub prob: f64,
    /// Known noise scale for linear regression.
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub step_size: f64,
    #[arg(long, default_value_t = 20, value_parser = at_least_one)]
    pub num_steps: usize,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
}

impl RunConfig {
    /// Defaults as parsed from an empty flag list.
    pub fn defaults() -> Self {
        match Cli::parse_from(["ppl", "train"]).command {
            Command::Train(c) => c,
            _ => unreachable!(),
        }
    }
}
