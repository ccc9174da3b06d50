//! Gibbs driver: one iteration imputes every h_i, then every w_i, then
//! updates θ and finally the base measures. Chains run in parallel and keep
//! every retained iteration in memory.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_time::{h_urn_weights, sample_h, sample_w, update_base_measures, w_urn_weights};
use crate::kernels::{seeded_rng, NormalParams};
use crate::outcome::{
    update_fixed_effects, update_random_effects, update_variances, DesignCache, ModelContext, ThetaLayout, ThetaState,
};
use crate::types::{init_latent, BaseMeasureParams, Cohort, LatentState};

/// Joint model, or event times alone with the outcome likelihood switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    #[default]
    Joint,
    Marginal,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Marginal => "marginal",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(Self::Joint),
            "marginal" => Ok(Self::Marginal),
            other => Err(Error::InvalidConfig(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub thin: usize,
    pub seed: u64,
    /// Dirichlet-process precision for H.
    pub alpha_h: f64,
    /// Dirichlet-process precision for W.
    pub alpha_w: f64,
    /// Inner independence-Metropolis steps of a fresh W draw.
    pub metropolis_steps: usize,
    pub variant: ModelVariant,
    /// Directory for per-iteration latent-state CSV dumps (debugging aid).
    #[serde(skip)]
    pub latent_dump: Option<PathBuf>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 7000,
            burn_in: 2000,
            n_chains: 2,
            thin: 1,
            seed: 1,
            alpha_h: 1.0,
            alpha_w: 1.0,
            metropolis_steps: 10,
            variant: ModelVariant::Joint,
            latent_dump: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.burn_in >= self.n_iter {
            return bad("burn_in must be smaller than n_iter");
        }
        if self.n_chains == 0 {
            return bad("n_chains must be >= 1");
        }
        if self.thin == 0 {
            return bad("thin must be >= 1");
        }
        if !(self.alpha_h > 0.0 && self.alpha_w > 0.0) {
            return bad("Dirichlet-process precisions must be positive");
        }
        Ok(())
    }

    /// Retained iterations per chain.
    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }

    fn keeps(&self, iteration: usize) -> bool {
        iteration >= self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// Column layout of a stored draw: λ, then θ (joint only), then h, w and
/// the per-subject outcome log-likelihood (joint only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawLayout {
    pub n_subjects: usize,
    pub theta: Option<ThetaLayout>,
}

impl DrawLayout {
    pub fn new(ctx: &ModelContext, variant: ModelVariant) -> Self {
        Self {
            n_subjects: ctx.cohort.len(),
            theta: (variant == ModelVariant::Joint).then(|| ctx.layout()),
        }
    }

    pub fn theta_len(&self) -> usize {
        self.theta.as_ref().map_or(0, ThetaLayout::len)
    }

    pub fn theta_offset(&self) -> usize {
        8
    }

    pub fn h_offset(&self) -> usize {
        8 + self.theta_len()
    }

    pub fn w_offset(&self) -> usize {
        self.h_offset() + self.n_subjects
    }

    pub fn loglik_offset(&self) -> Option<usize> {
        self.theta.as_ref().map(|_| self.w_offset() + self.n_subjects)
    }

    pub fn width(&self) -> usize {
        self.w_offset() + self.n_subjects + if self.theta.is_some() { self.n_subjects } else { 0 }
    }

    pub fn columns(&self) -> Vec<String> {
        let mut names: Vec<String> = BaseMeasureParams::NAMES.iter().map(|s| s.to_string()).collect();
        if let Some(theta) = &self.theta {
            names.extend(theta.names());
        }
        names.extend((0..self.n_subjects).map(|i| format!("h[{i}]")));
        names.extend((0..self.n_subjects).map(|i| format!("w[{i}]")));
        if self.theta.is_some() {
            names.extend((0..self.n_subjects).map(|i| format!("loglik[{i}]")));
        }
        names
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

/// Sampler bookkeeping for one chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// Fresh W draws that ran the Metropolis chain.
    pub w_fresh: u64,
    pub w_accepted: u64,
    pub w_proposed: u64,
    /// W re-draws forced because a moved h left the held w infeasible.
    pub repairs: u64,
}

/// Retained draws of one chain, stored row-major (`rows × layout.width()`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    pub iterations: Vec<u64>,
    pub values: Vec<f64>,
    pub stats: ChainStats,
}

impl ChainDraws {
    pub fn rows(&self) -> usize {
        self.iterations.len()
    }
}

/// Draws of every chain plus what is needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub config: ChainConfig,
    pub layout: DrawLayout,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(ChainDraws::rows).sum()
    }

    /// Every retained row, chains concatenated in order.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let width = self.layout.width();
        self.chains.iter().flat_map(move |c| c.values.chunks_exact(width))
    }

    pub fn row(&self, k: usize) -> Option<&[f64]> {
        self.rows().nth(k)
    }

    pub fn lambda(&self, row: &[f64]) -> BaseMeasureParams {
        BaseMeasureParams::from_flat(&row[..8])
    }

    pub fn theta(&self, row: &[f64]) -> Option<ThetaState> {
        let layout = self.layout.theta.as_ref()?;
        let off = self.layout.theta_offset();
        Some(layout.unflatten(&row[off..off + layout.len()]))
    }

    pub fn h<'a>(&self, row: &'a [f64]) -> &'a [f64] {
        let off = self.layout.h_offset();
        &row[off..off + self.layout.n_subjects]
    }

    pub fn w<'a>(&self, row: &'a [f64]) -> &'a [f64] {
        let off = self.layout.w_offset();
        &row[off..off + self.layout.n_subjects]
    }

    /// Values of one column per chain.
    pub fn chain_column(&self, column: usize) -> Vec<Vec<f64>> {
        let width = self.layout.width();
        self.chains
            .iter()
            .map(|c| c.values.chunks_exact(width).map(|r| r[column]).collect())
            .collect()
    }
}

/// Moment-matched starting base measures: per group mean and variance of the
/// initial imputations, pooled across groups when a group has fewer than two
/// subjects, with the variance floored at one day².
pub fn initial_base_measures(cohort: &Cohort, latent: &LatentState) -> BaseMeasureParams {
    let moments = |values: &[f64]| -> Option<NormalParams> {
        if values.len() < 2 {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(NormalParams::new(mean, var.max(1.0)))
    };
    let cell = |values: &[f64], z: usize| {
        let group: Vec<f64> = cohort
            .subjects()
            .iter()
            .zip(values)
            .filter(|(s, _)| s.group() == z)
            .map(|(_, &x)| x)
            .collect();
        moments(&group)
            .or_else(|| moments(values))
            .unwrap_or_else(|| NormalParams::new(values[0], 1.0))
    };
    BaseMeasureParams {
        h: [cell(&latent.h, 0), cell(&latent.h, 1)],
        w: [cell(&latent.w, 0), cell(&latent.w, 1)],
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_LATENT: u64 = 1;
const STREAM_THETA: u64 = 2;
const STREAMS_PER_CHAIN: u64 = 3;

fn chain_rng(config: &ChainConfig, chain: usize, stream: u64) -> crate::kernels::ChainRng {
    seeded_rng(config.seed, chain as u64 * STREAMS_PER_CHAIN + stream)
}

fn at(iteration: usize, cohort: &Cohort, i: usize) -> impl FnOnce(Error) -> Error + '_ {
    move |source| Error::Sampler {
        iteration,
        subject: cohort.subject(i).id.clone(),
        source: Box::new(source),
    }
}

/// Mutable state of one chain.
struct ChainState {
    latent: LatentState,
    lambda: BaseMeasureParams,
    theta: Option<ThetaState>,
    cache: Option<DesignCache>,
}

/// Runs chain `chain` of `config`. Initialization, latent imputation and θ
/// updates draw from separate substreams of the master seed, so the latent
/// sweeps of the joint and marginal variants stay coupled whenever the
/// outcome likelihood does not enter the W weights.
pub fn run_chain(ctx: &ModelContext, config: &ChainConfig, chain: usize) -> Result<ChainDraws> {
    config.validate()?;
    let cohort = &ctx.cohort;
    let layout = DrawLayout::new(ctx, config.variant);
    let mut init_rng = chain_rng(config, chain, STREAM_INIT);
    let mut latent_rng = chain_rng(config, chain, STREAM_LATENT);
    let mut theta_rng = chain_rng(config, chain, STREAM_THETA);

    let latent = init_latent(cohort, &mut init_rng)?;
    let joint = config.variant == ModelVariant::Joint;
    let mut state = ChainState {
        lambda: initial_base_measures(cohort, &latent),
        theta: joint.then(|| ThetaState::initial(ctx)),
        cache: joint.then(|| DesignCache::build(ctx, &latent)),
        latent,
    };
    let mut dump = match &config.latent_dump {
        Some(dir) => Some(LatentDump::create(dir, chain)?),
        None => None,
    };

    let mut draws = ChainDraws {
        chain,
        iterations: Vec::with_capacity(config.retained()),
        values: Vec::with_capacity(config.retained() * layout.width()),
        stats: ChainStats::default(),
    };
    let started = Instant::now();
    let report_every = (config.n_iter / 10).max(1);
    for it in 0..config.n_iter {
        iterate(
            ctx,
            config,
            it,
            &mut state,
            &mut draws.stats,
            &mut latent_rng,
            &mut theta_rng,
        )?;
        if let Some(dump) = dump.as_mut() {
            dump.write(it, &state.latent)?;
        }
        if config.keeps(it) {
            draws.iterations.push(it as u64);
            push_row(ctx, &layout, &state, &mut draws.values);
        }
        if (it + 1) % report_every == 0 {
            let rate = (it + 1) as f64 / started.elapsed().as_secs_f64().max(1e-9);
            log::info!("chain {chain}: iteration {}/{} ({rate:.0} it/s)", it + 1, config.n_iter);
        }
    }
    if draws.stats.w_proposed > 0 {
        log::debug!(
            "chain {chain}: W Metropolis acceptance {:.3}, {} repairs",
            draws.stats.w_accepted as f64 / draws.stats.w_proposed as f64,
            draws.stats.repairs
        );
    }
    Ok(draws)
}

fn iterate<R: Rng + ?Sized>(
    ctx: &ModelContext,
    config: &ChainConfig,
    it: usize,
    state: &mut ChainState,
    stats: &mut ChainStats,
    latent_rng: &mut R,
    theta_rng: &mut R,
) -> Result<()> {
    let cohort = &ctx.cohort;
    let n = cohort.len();
    let ChainState {
        latent,
        lambda,
        theta,
        cache,
    } = state;

    let mut draw_w = |i: usize, latent: &mut LatentState, cache: &mut Option<DesignCache>, rng: &mut R| {
        let weights =
            w_urn_weights(i, latent, ctx, theta.as_ref(), lambda, config.alpha_w).map_err(at(it, cohort, i))?;
        let d = sample_w(
            i,
            latent,
            ctx,
            theta.as_ref(),
            cache.as_mut(),
            lambda,
            &weights,
            config.metropolis_steps,
            rng,
        );
        if d.donor.is_none() && theta.is_some() && cohort.is_responder(i) {
            stats.w_fresh += 1;
            stats.w_proposed += config.metropolis_steps as u64;
            stats.w_accepted += d.accepted as u64;
        }
        Ok::<_, Error>(())
    };

    for i in 0..n {
        let weights = h_urn_weights(i, latent, cohort, lambda, config.alpha_h).map_err(at(it, cohort, i))?;
        if sample_h(i, latent, cohort, lambda, &weights, latent_rng) {
            stats.repairs += 1;
            draw_w(i, latent, cache, latent_rng)?;
        } else if let Some(cache) = cache.as_mut() {
            cache.refresh(ctx, i, latent.v(i));
        }
    }
    for i in 0..n {
        draw_w(i, latent, cache, latent_rng)?;
    }
    if let (Some(theta), Some(cache)) = (theta.as_mut(), cache.as_ref()) {
        let fail = |source: Error| Error::Sampler {
            iteration: it,
            subject: "<all>".into(),
            source: Box::new(source),
        };
        update_fixed_effects(ctx, cache, theta, theta_rng).map_err(fail)?;
        for i in 0..n {
            update_random_effects(ctx, cache, theta, i, theta_rng).map_err(at(it, cohort, i))?;
        }
        update_variances(ctx, cache, theta, theta_rng);
    }
    *lambda = update_base_measures(latent, cohort, lambda, latent_rng);
    if let Err(err) = latent.check_support(cohort) {
        let i = match &err {
            Error::SupportViolation { subject, .. } => *subject,
            _ => 0,
        };
        return Err(at(it, cohort, i)(err));
    }
    Ok(())
}

fn push_row(ctx: &ModelContext, layout: &DrawLayout, state: &ChainState, out: &mut Vec<f64>) {
    out.extend_from_slice(&state.lambda.flat());
    if let (Some(theta_layout), Some(theta)) = (&layout.theta, &state.theta) {
        out.extend(theta_layout.flatten(theta));
    }
    out.extend_from_slice(&state.latent.h);
    out.extend_from_slice(&state.latent.w);
    if let Some(theta) = &state.theta {
        out.extend((0..ctx.cohort.len()).map(|i| ctx.loglik_subject(i, state.latent.h[i], state.latent.w[i], theta)));
    }
}

struct LatentDump {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LatentDump {
    fn create(dir: &Path, chain: usize) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("latent_chain{chain}.csv"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "iter,subject,h,w").map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, out })
    }

    fn write(&mut self, it: usize, latent: &LatentState) -> Result<()> {
        for i in 0..latent.len() {
            writeln!(self.out, "{it},{i},{},{}", latent.h[i], latent.w[i]).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Runs every chain on its own worker. `threads = None` uses the global pool.
pub fn run_chains(ctx: &ModelContext, config: &ChainConfig, threads: Option<usize>) -> Result<PosteriorDraws> {
    config.validate()?;
    if config.variant == ModelVariant::Joint {
        for (responder, z, n) in ctx.sparse_cells() {
            let cell = if responder { "responder" } else { "nonresponder" };
            log::warn!(
                "{cell} group {z} has {n} distinct visit times, too few to inform its knot terms; \
                 the fit may stop with a singular fixed-effect block"
            );
        }
    }
    let run = || {
        (0..config.n_chains)
            .into_par_iter()
            .map(|c| run_chain(ctx, config, c))
            .collect::<Result<Vec<_>>>()
    };
    let chains = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(PosteriorDraws {
        config: config.clone(),
        layout: DrawLayout::new(ctx, config.variant),
        chains,
    })
}

/// Split potential scale reduction factor of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RHat {
    pub value: f64,
    /// The parameter never moved; `value` is reported as 1.
    pub zero_variance: bool,
}

/// Split-R̂: every chain is halved (dropping the middle draw when odd) and
/// the between/within variance ratio of the halves is computed.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<RHat> {
    if chains.len() < 2 {
        return Err(Error::InvalidConfig("R-hat needs at least 2 chains".into()));
    }
    let n_min = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n_min < 10 {
        return Err(Error::InsufficientDraws {
            requested: 10,
            available: n_min,
        });
    }
    let half = n_min / 2;
    let mut halves = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..n_min];
        halves.push(&c[..half]);
        halves.push(&c[n_min - half..]);
    }
    let n = half as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let between = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let within = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if within == 0.0 {
        return Ok(if between == 0.0 {
            RHat {
                value: 1.0,
                zero_variance: true,
            }
        } else {
            RHat {
                value: f64::INFINITY,
                zero_variance: false,
            }
        });
    }
    let pooled = (n - 1.0) / n * within + between / n;
    Ok(RHat {
        value: (pooled / within).sqrt().max(1.0),
        zero_variance: false,
    })
}

/// Parameters monitored by default: λ and every scalar or population-level
/// θ component (random effects and latent values excluded).
pub fn monitored_parameters(layout: &DrawLayout) -> Vec<String> {
    let mut names: Vec<String> = BaseMeasureParams::NAMES.iter().map(|s| s.to_string()).collect();
    if let Some(theta) = &layout.theta {
        names.extend(
            theta
                .names()
                .into_iter()
                .filter(|n| !n.starts_with("b[") && !n.starts_with("a[")),
        );
    }
    names
}

/// Writes `chain,iter,<params…>` with one row per retained iteration per
/// chain; an empty selector writes the header alone.
pub fn trace_export(draws: &PosteriorDraws, params: &[String], path: &Path) -> Result<()> {
    let columns = params
        .iter()
        .map(|p| draws.layout.column_index(p))
        .collect::<Result<Vec<_>>>()?;
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend(params.iter().cloned());
    wtr.write_record(&header)?;
    let width = draws.layout.width();
    let chains = if params.is_empty() { &[][..] } else { &draws.chains[..] };
    for c in chains {
        for (row, &it) in c.values.chunks_exact(width).zip(&c.iterations) {
            let mut record = vec![c.chain.to_string(), it.to_string()];
            record.extend(columns.iter().map(|&k| row[k].to_string()));
            wtr.write_record(&record)?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
