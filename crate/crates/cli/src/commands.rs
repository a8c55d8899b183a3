use std::io::Write;
use std::time::Instant;

use anyhow::{bail, ensure, Context as _, Result};
use effectppl::effects::{Context, ParamStore, Trace};
use effectppl::error::PplError;
use effectppl::inference::{elbo_estimate, hmc_run, importance_sample, svi_step, AdamState, HmcConfig, WeightedTraces};
use effectppl::models::conjugate::{
    conjugate_exact_guide, conjugate_guide, conjugate_model, conjugate_prior_guide, conjugate_prior_predictive,
};
use effectppl::models::{
    bayes_linreg_model, branching_model, standard_normal_model, vae_generate, vae_guide, vae_model, HandCodedVae,
    LinregData, VaeConfig,
};
use effectppl::tensor::Tensor;

use crate::archive::{load_params, save_params};
use crate::config::{Cli, Command, ModelKind, Proposal, RunConfig};
use crate::data::{binarize, load_matrix};

/// Consecutive failed SVI steps tolerated before training aborts.
pub const MAX_FAILED_STEPS: usize = 5;
/// Pixel threshold for binarizing image data.
pub const BINARIZE_AT: f64 = 0.5;

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(c) => train(c, out).map(drop),
        Command::Benchmark(c) => benchmark(c, out).map(drop),
        Command::Sample(c) => sample(c, out),
        Command::Is(c) => importance(c, out).map(drop),
        Command::Hmc(c) => hmc(c, out).map(drop),
    }
}

fn new_context(cfg: &RunConfig) -> Result<Context> {
    let mut ctx = Context::new(cfg.seed);
    if let Some(path) = &cfg.params_in {
        load_params(path, ctx.params_mut()).with_context(|| format!("loading params from {}", path.display()))?;
    }
    Ok(ctx)
}

fn finish(cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    if let Some(path) = &cfg.params_out {
        save_params(path, store).with_context(|| format!("saving params to {}", path.display()))?;
    }
    Ok(())
}

/// Binarized images, `[N, D]`.
pub fn load_images(cfg: &RunConfig) -> Result<Tensor> {
    let raw = load_matrix(&cfg.data, cfg.csv_header).with_context(|| format!("reading {}", cfg.data.display()))?;
    ensure!(raw.rank() == 2 && raw.shape()[0] > 0, "{} holds no images", cfg.data.display());
    Ok(binarize(&raw, BINARIZE_AT))
}

/// Rows `start..end` of a matrix.
pub fn row_slice(t: &Tensor, start: usize, end: usize) -> Tensor {
    let width = t.shape()[1];
    let data = t.data()[start * width..end * width].to_vec();
    Tensor::new(data, &[end - start, width]).expect("in range")
}

fn batches(images: &Tensor, batch_size: usize) -> Vec<Tensor> {
    let n = images.shape()[0];
    (0..n)
        .step_by(batch_size)
        .map(|s| row_slice(images, s, (s + batch_size).min(n)))
        .collect()
}

fn vae_config(cfg: &RunConfig, hidden_dim: usize, images: &Tensor) -> Result<VaeConfig> {
    let vc = VaeConfig {
        z_dim: cfg.z_dim,
        hidden_dim,
        data_dim: images.shape()[1],
        batch_size: cfg.batch_size,
        num_total: images.shape()[0],
    };
    vc.validate()?;
    Ok(vc)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean ELBO per epoch; per datapoint for the VAE.
    pub epoch_elbos: Vec<f64>,
    pub params: ParamStore,
}

/// Tracks consecutive failed steps and aborts past the limit.
struct FailureGuard(usize);

impl FailureGuard {
    fn check(&mut self, step: effectppl::error::Result<f64>) -> Result<Option<f64>> {
        match step {
            Ok(loss) => {
                self.0 = 0;
                Ok(Some(loss))
            }
            Err(e @ PplError::NonFinite { .. }) => {
                self.0 += 1;
                if self.0 >= MAX_FAILED_STEPS {
                    bail!("aborting after {MAX_FAILED_STEPS} consecutive failed steps: {e}");
                }
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainReport> {
    let mut ctx = new_context(cfg)?;
    let mut adam = AdamState::new(cfg.lr)?;
    let mut guard = FailureGuard(0);
    let mut epoch_elbos = Vec::with_capacity(cfg.epochs);
    match cfg.model.unwrap_or(ModelKind::Vae) {
        ModelKind::Vae => {
            let images = load_images(cfg)?;
            let vc = vae_config(cfg, cfg.hidden_dim, &images)?;
            let n = vc.num_total as f64;
            let model = |c: &mut Context, b: &Tensor| vae_model(c, b, &vc);
            let guide = |c: &mut Context, b: &Tensor| vae_guide(c, b, &vc);
            let batches = batches(&images, cfg.batch_size);
            for epoch in 1..=cfg.epochs {
                let start = Instant::now();
                let mut elbos = Vec::with_capacity(batches.len());
                for batch in &batches {
                    let step = svi_step(&mut ctx, &model, &guide, batch, &mut adam, cfg.num_particles);
                    if let Some(loss) = guard.check(step)? {
                        elbos.push(-loss / n);
                    }
                }
                let elbo = mean(&elbos);
                writeln!(out, "epoch={epoch} elbo={elbo:.6} sec={:.3}", start.elapsed().as_secs_f64())?;
                epoch_elbos.push(elbo);
            }
        }
        ModelKind::Conjugate => {
            for epoch in 1..=cfg.epochs {
                let start = Instant::now();
                let mut elbos = Vec::with_capacity(cfg.steps_per_epoch);
                for _ in 0..cfg.steps_per_epoch {
                    let step = svi_step(
                        &mut ctx,
                        &conjugate_model,
                        &conjugate_guide,
                        &cfg.x_obs,
                        &mut adam,
                        cfg.num_particles,
                    );
                    if let Some(loss) = guard.check(step)? {
                        elbos.push(-loss);
                    }
                }
                let elbo = mean(&elbos);
                writeln!(out, "epoch={epoch} elbo={elbo:.6} sec={:.3}", start.elapsed().as_secs_f64())?;
                epoch_elbos.push(elbo);
            }
            for (name, _) in ctx.params().iter() {
                let v = ctx.params().value(name).expect("listed");
                writeln!(out, "param {name}={}", join(&v))?;
            }
        }
        other => bail!("`train` supports the vae and conjugate models, not {other:?}"),
    }
    finish(cfg, ctx.params())?;
    Ok(TrainReport {
        epoch_elbos,
        params: ctx.params().deep_copy(),
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub mean_ms: f64,
    pub se_ms: f64,
}

impl Timing {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let m = mean(ms);
        let var = ms.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean_ms: m,
            se_ms: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub hidden: usize,
    pub framework: Timing,
    pub baseline: Timing,
    pub ratio: f64,
    /// Delta-method standard error of `ratio`, using the paired covariance.
    pub ratio_se: f64,
    /// Both ELBOs on the shared seed before timing.
    pub check: (f64, f64),
}

/// Tolerance on the pre-timing agreement of the two ELBO computations.
pub const BENCH_AGREEMENT: f64 = 1e-9;

fn bench_one(cfg: &RunConfig, images: &Tensor, hidden: usize) -> Result<BenchRow> {
    let vc = vae_config(cfg, hidden, images)?;
    let model = |c: &mut Context, b: &Tensor| vae_model(c, b, &vc);
    let guide = |c: &mut Context, b: &Tensor| vae_guide(c, b, &vc);
    let baseline = HandCodedVae::new(vc);
    let batches = batches(images, cfg.batch_size);

    let mut ctx = new_context(cfg)?;
    // first run creates the params
    elbo_estimate(&mut ctx, &model, &guide, &batches[0], 1)?;
    let store = ctx.params().deep_copy();
    let mut rng = ctx.rng.clone();
    let fw = elbo_estimate(&mut ctx, &model, &guide, &batches[0], 1)?.elbo;
    let bl = baseline.elbo(&store, &mut rng, &batches[0])?.elbo.item();
    ensure!(
        (fw - bl).abs() <= BENCH_AGREEMENT,
        "framework ELBO {fw} and baseline ELBO {bl} disagree at h={hidden}"
    );

    let mut adam_f = AdamState::new(cfg.lr)?;
    let mut adam_b = AdamState::new(cfg.lr)?;
    let (mut fw_ms, mut bl_ms) = (Vec::new(), Vec::new());
    let mut step_f = |batch: &Tensor| -> Result<f64> {
        let t = Instant::now();
        svi_step(&mut ctx, &model, &guide, batch, &mut adam_f, 1)?;
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    let mut step_b = |batch: &Tensor| -> Result<f64> {
        let t = Instant::now();
        baseline.step(&store, &mut rng, batch, &mut adam_b)?;
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    // epoch 0 is warmup; the order alternates per batch so drift hits both sides
    for epoch in 0..=cfg.epochs {
        for (i, batch) in batches.iter().enumerate() {
            let (f, b) = if i % 2 == 0 {
                let f = step_f(batch)?;
                (f, step_b(batch)?)
            } else {
                let b = step_b(batch)?;
                (step_f(batch)?, b)
            };
            if epoch > 0 {
                fw_ms.push(f);
                bl_ms.push(b);
            }
        }
    }
    let framework = Timing::from_samples(&fw_ms);
    let baseline = Timing::from_samples(&bl_ms);
    let ratio = framework.mean_ms / baseline.mean_ms;
    // steps are timed in adjacent pairs, so drift shows up as covariance
    let n = fw_ms.len() as f64;
    let cov = fw_ms
        .iter()
        .zip(&bl_ms)
        .map(|(f, b)| (f - framework.mean_ms) * (b - baseline.mean_ms))
        .sum::<f64>()
        / (n - 1.0).max(1.0)
        / n;
    let rel_var = (framework.se_ms / framework.mean_ms).powi(2) + (baseline.se_ms / baseline.mean_ms).powi(2)
        - 2.0 * cov / (framework.mean_ms * baseline.mean_ms);
    let ratio_se = ratio * rel_var.max(0.0).sqrt();
    Ok(BenchRow {
        hidden,
        framework,
        baseline,
        ratio,
        ratio_se,
        check: (fw, bl),
    })
}

pub fn benchmark(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<BenchRow>> {
    if let Some(m) = cfg.model.filter(|m| *m != ModelKind::Vae) {
        bail!("`benchmark` only runs the vae model, not {m:?}");
    }
    let images = load_images(cfg)?;
    writeln!(out, "z={} batch_size={} epochs={}", cfg.z_dim, cfg.batch_size, cfg.epochs)?;
    let mut rows = Vec::new();
    for &h in &cfg.hidden_sizes {
        let row = bench_one(cfg, &images, h)?;
        writeln!(
            out,
            "h={h} framework_ms={:.4} baseline_ms={:.4} ratio={:.4} framework_se_ms={:.4} baseline_se_ms={:.4} ratio_se={:.4}",
            row.framework.mean_ms,
            row.baseline.mean_ms,
            row.ratio,
            row.framework.se_ms,
            row.baseline.se_ms,
            row.ratio_se
        )?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn sample(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut ctx = new_context(cfg)?;
    let n = cfg.num_samples.unwrap_or(10);
    match cfg.model.unwrap_or(ModelKind::Vae) {
        ModelKind::Vae => {
            let data_dim = match ctx.params().get("decoder.Wout") {
                Some(w) => w.unconstrained().shape()[1],
                None => 784,
            };
            let vc = VaeConfig {
                z_dim: cfg.z_dim,
                hidden_dim: cfg.hidden_dim,
                data_dim,
                batch_size: n,
                num_total: n,
            };
            vc.validate()?;
            let x = vae_generate(&mut ctx, &vc, n, None)?;
            for row in x.data().chunks(data_dim) {
                let cells: Vec<String> = row.iter().map(|v| (*v as u8).to_string()).collect();
                writeln!(out, "{}", cells.join(","))?;
            }
        }
        ModelKind::Conjugate => {
            writeln!(out, "z,x")?;
            for _ in 0..n {
                let (z, x) = conjugate_prior_predictive(&mut ctx, &())?;
                writeln!(out, "{},{}", z.item(), x.item())?;
            }
        }
        ModelKind::Branching => {
            writeln!(out, "failures")?;
            for _ in 0..n {
                writeln!(out, "{}", branching_model(&mut ctx, &cfg.prob)?)?;
            }
        }
        ModelKind::Normal => {
            writeln!(out, "z")?;
            for _ in 0..n {
                writeln!(out, "{}", standard_normal_model(&mut ctx, &())?.item())?;
            }
        }
        ModelKind::Linreg => bail!("`sample` does not support the linreg model"),
    }
    finish(cfg, ctx.params())
}

/// `(site[index], value)` labels for every element of the latent sites.
fn latent_labels(trace: &Trace) -> Vec<(String, usize, String)> {
    let mut out = Vec::new();
    for site in trace.latent_sites() {
        let n = site.value.numel();
        for i in 0..n {
            let label = if site.value.rank() == 0 {
                site.name.clone()
            } else {
                format!("{}[{i}]", site.name)
            };
            out.push((site.name.clone(), i, label));
        }
    }
    out
}

fn linreg_data(cfg: &RunConfig) -> Result<LinregData> {
    let table = load_matrix(&cfg.data, cfg.csv_header).with_context(|| format!("reading {}", cfg.data.display()))?;
    ensure!(
        table.rank() == 2 && table.shape()[1] >= 2,
        "linreg data needs at least one feature column and a final y column"
    );
    let (n, cols) = (table.shape()[0], table.shape()[1]);
    let d = cols - 1;
    let (mut x, mut y) = (Vec::with_capacity(n * d), Vec::with_capacity(n));
    for row in table.data().chunks(cols) {
        x.extend_from_slice(&row[..d]);
        y.push(row[d]);
    }
    Ok(LinregData::new(Tensor::new(x, &[n, d])?, Tensor::from_slice(&y), Some(cfg.sigma))?)
}

fn linreg_prior_guide(ctx: &mut Context, data: &LinregData) -> effectppl::error::Result<Tensor> {
    let d = data.dim();
    ctx.draw(
        "w",
        &effectppl::distributions::Distribution::normal(Tensor::zeros(&[d]), Tensor::ones(&[d]))?,
    )
}

pub fn importance(cfg: &RunConfig, out: &mut dyn Write) -> Result<WeightedTraces> {
    let mut ctx = new_context(cfg)?;
    let n = cfg.num_samples.unwrap_or(10_000);
    let weighted = match (cfg.model.unwrap_or(ModelKind::Conjugate), cfg.proposal) {
        (ModelKind::Conjugate, Proposal::Prior) => {
            importance_sample(&mut ctx, &conjugate_model, &conjugate_prior_guide, &cfg.x_obs, n)?
        }
        (ModelKind::Conjugate, Proposal::Posterior) => {
            importance_sample(&mut ctx, &conjugate_model, &conjugate_exact_guide, &cfg.x_obs, n)?
        }
        (ModelKind::Conjugate, Proposal::Guide) => {
            ensure!(cfg.params_in.is_some(), "--proposal guide needs --params-in");
            importance_sample(&mut ctx, &conjugate_model, &conjugate_guide, &cfg.x_obs, n)?
        }
        (ModelKind::Linreg, Proposal::Prior) => {
            let data = linreg_data(cfg)?;
            importance_sample(&mut ctx, &bayes_linreg_model, &linreg_prior_guide, &data, n)?
        }
        (m, p) => bail!("`is` does not support model {m:?} with proposal {p:?}"),
    };
    writeln!(out, "log_evidence={:.6} ess={:.3} n={n}", weighted.log_evidence(), weighted.ess())?;
    for (site, i, label) in latent_labels(&weighted.traces[0]) {
        let (m, se) = weighted.expectation_with_stderr(|t| t.get(&site).expect("static site").value.data()[i]);
        writeln!(out, "mean {label}={m:.6} stderr={se:.6}")?;
    }
    Ok(weighted)
}

#[derive(Debug, Clone)]
pub struct HmcSummary {
    /// `(label, mean, variance)` for every latent element.
    pub moments: Vec<(String, f64, f64)>,
    pub acceptance_rate: f64,
    pub num_samples: usize,
}

pub fn hmc(cfg: &RunConfig, out: &mut dyn Write) -> Result<HmcSummary> {
    let mut ctx = new_context(cfg)?;
    let mut hc = HmcConfig::new(cfg.step_size, cfg.num_steps, cfg.warmup, cfg.num_samples.unwrap_or(2000));
    hc.validate()?;
    let run = match cfg.model.unwrap_or(ModelKind::Normal) {
        ModelKind::Normal => hmc_run(&mut ctx, &standard_normal_model, &(), &hc)?,
        ModelKind::Conjugate => hmc_run(&mut ctx, &conjugate_model, &cfg.x_obs, &hc)?,
        ModelKind::Linreg => {
            let data = linreg_data(cfg)?;
            hc.initial.insert("w".into(), Tensor::zeros(&[data.dim()]));
            hmc_run(&mut ctx, &bayes_linreg_model, &data, &hc)?
        }
        other => bail!("`hmc` does not support the {other:?} model"),
    };
    let mut moments = Vec::new();
    for (site, i, label) in latent_labels(&run.samples[0]) {
        let xs: Vec<f64> = run.samples.iter().map(|t| t.get(&site).expect("static").value.data()[i]).collect();
        let m = mean(&xs);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0);
        writeln!(out, "site={label} mean={m:.6} var={var:.6}")?;
        moments.push((label, m, var));
    }
    writeln!(out, "acceptance={:.4}", run.acceptance_rate)?;
    Ok(HmcSummary {
        moments,
        acceptance_rate: run.acceptance_rate,
        num_samples: run.samples.len(),
    })
}
