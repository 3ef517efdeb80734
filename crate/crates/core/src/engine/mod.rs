//! The outer sequential design loop.
//!
//! Each iteration standardizes the observed outputs, re-samples the
//! hyperparameter posterior (warm-started from the previous walkers), builds
//! one [`QoiState`] per posterior sample, picks the next design with the
//! configured criterion and evaluates the black box there.

mod seeds;

pub use seeds::{derive_seed, Stream};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{lhs, maximize_ekld, us_next, BgoSettings};
use crate::error::{Error, Result};
use crate::gp::{condition, Dataset, Standardizer, DEFAULT_NOISE_VAR};
use crate::hyper::{default_walkers, sample_posterior, thin_for, McmcSettings, PriorSpec};
use crate::problem::{Domain, Problem, ReferenceQoi};
use crate::qoi::{ekld, QoiBelief, QoiState};

/// Step used to move a proposed design off an existing row.
pub const DUPLICATE_PERTURBATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acquisition {
    #[default]
    Ekld,
    Us,
    Random,
}

impl FromStr for Acquisition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ekld" => Ok(Self::Ekld),
            "us" => Ok(Self::Us),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown acquisition `{other}`"))),
        }
    }
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ekld => "ekld",
            Self::Us => "us",
            Self::Random => "random",
        })
    }
}

/// Sampler settings shared by every iteration. Unset fields follow the
/// dimension of the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_walkers: Option<usize>,
    pub n_steps: usize,
    pub burn_in_cold: usize,
    pub burn_in_warm: usize,
    pub thin: Option<usize>,
    /// Approximate number of posterior samples kept when `thin` is unset.
    pub ensemble_size: usize,
    pub stretch_a: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_walkers: None,
            n_steps: 500,
            burn_in_cold: 250,
            burn_in_warm: 50,
            thin: None,
            ensemble_size: 100,
            stretch_a: 2.0,
        }
    }
}

impl McmcConfig {
    pub fn settings(&self, dim: usize, warm: bool, seed: u64) -> McmcSettings {
        let n_walkers = self.n_walkers.unwrap_or_else(|| default_walkers(dim));
        let burn_in = if warm { self.burn_in_warm } else { self.burn_in_cold };
        let kept = self.n_steps.saturating_sub(burn_in);
        McmcSettings {
            n_walkers,
            n_steps: self.n_steps,
            burn_in,
            thin: self.thin.unwrap_or_else(|| thin_for(n_walkers, kept, self.ensemble_size)),
            stretch_a: self.stretch_a,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgoConfig {
    pub t_init: Option<usize>,
    pub t_max: usize,
    pub n_candidates: Option<usize>,
    pub tol: f64,
}

impl Default for BgoConfig {
    fn default() -> Self {
        Self { t_init: None, t_max: 20, n_candidates: None, tol: 1e-4 }
    }
}

impl BgoConfig {
    pub fn settings(&self, dim: usize, seed: u64) -> BgoSettings {
        let base = BgoSettings::defaults_for(dim, seed);
        BgoSettings {
            t_init: self.t_init.unwrap_or(base.t_init).min(self.t_max),
            t_max: self.t_max,
            n_candidates: self.n_candidates.unwrap_or(base.n_candidates),
            tol: self.tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub acquisition: Acquisition,
    /// Falls back to the problem's budget hint when unset.
    pub n_initial: Option<usize>,
    pub n_max: Option<usize>,
    pub ekld_stop_threshold: Option<f64>,
    pub mcmc: McmcConfig,
    pub bgo: BgoConfig,
    pub prior: PriorSpec,
    /// Noise variance in standardized output units.
    pub noise_var: f64,
    /// Candidate count for uncertainty sampling; `200 d` when unset.
    pub us_candidates: Option<usize>,
    pub master_seed: u64,
    /// Wall-clock timings make traces differ between runs, so they are off
    /// unless asked for.
    pub record_timing: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            acquisition: Acquisition::Ekld,
            n_initial: None,
            n_max: None,
            ekld_stop_threshold: None,
            mcmc: McmcConfig::default(),
            bgo: BgoConfig::default(),
            prior: PriorSpec::default(),
            noise_var: DEFAULT_NOISE_VAR,
            us_candidates: None,
            master_seed: 0,
            record_timing: false,
        }
    }
}

impl EngineConfig {
    /// Copy with the budget filled in from the problem's hints.
    pub fn resolved(&self, problem: &Problem) -> Self {
        let mut c = self.clone();
        c.n_initial.get_or_insert(problem.n_initial);
        c.n_max.get_or_insert(problem.n_max);
        c
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let (Some(n_initial), Some(n_max)) = (self.n_initial, self.n_max) else {
            return Err(Error::Config("budget is not set".into()));
        };
        if n_initial < 1 || n_initial >= n_max {
            return Err(Error::Config(format!(
                "need 1 <= n_initial < n_max, got n_initial = {n_initial}, n_max = {n_max}"
            )));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!("noise_var must be positive, got {}", self.noise_var)));
        }
        if self.ekld_stop_threshold.is_some_and(f64::is_nan) {
            return Err(Error::Config("ekld_stop_threshold is NaN".into()));
        }
        if self.us_candidates == Some(0) {
            return Err(Error::Config("us_candidates must be positive".into()));
        }
        let config_err = |e: Error| Error::Config(e.to_string());
        self.prior.validate().map_err(config_err)?;
        self.mcmc.settings(dim, false, 0).validate(dim).map_err(config_err)?;
        self.mcmc.settings(dim, true, 0).validate(dim).map_err(config_err)?;
        self.bgo.settings(dim, 0).validate().map_err(config_err)?;
        Ok(())
    }
}

/// Latin-hypercube starting design in unit coordinates.
pub fn initial_design(n_initial: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    lhs(n_initial, dim, seed)
}

/// Moments of the equal-weight Gaussian mixture over the hyperparameter
/// ensemble.
pub fn marginal_qoi_belief(beliefs: &[QoiBelief]) -> (f64, f64) {
    let s = beliefs.len() as f64;
    let mean = beliefs.iter().map(|b| b.mu1).sum::<f64>() / s;
    let within = beliefs.iter().map(|b| b.sigma1_sq).sum::<f64>() / s;
    let between = beliefs.iter().map(|b| (b.mu1 - mean).powi(2)).sum::<f64>() / s;
    (mean, within + between)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    Budget,
    Threshold { max_mean_ekld: f64, threshold: f64 },
    Failed { cause: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Decides whether another experiment should be run. `last_max_ekld` is the
/// gain of the most recent proposal, if one has been computed.
pub fn stopping_check(
    n_observed: usize,
    last_max_ekld: Option<f64>,
    config: &EngineConfig,
) -> (StopDecision, Option<Termination>) {
    if n_observed >= config.n_max.unwrap_or(usize::MAX) {
        return (StopDecision::Stop, Some(Termination::Budget));
    }
    if let (Some(threshold), Some(g)) = (config.ekld_stop_threshold, last_max_ekld) {
        if g < threshold {
            return (
                StopDecision::Stop,
                Some(Termination::Threshold { max_mean_ekld: g, threshold }),
            );
        }
    }
    (StopDecision::Continue, None)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub acceptance_rate: f64,
    pub mcmc_retried: bool,
    pub ensemble_size: usize,
    /// Posterior samples dropped because their covariance could not be factored.
    pub failed_states: usize,
    pub sigma1_clamped: usize,
    pub ekld_clamped: usize,
    pub ekld_saturated: usize,
    pub perturbed: bool,
    pub bgo_evaluations: usize,
    pub bgo_stopped_early: bool,
    pub bgo_fell_back: bool,
}

/// Belief about the expectation in raw output units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub n: usize,
    pub qoi_mean: f64,
    pub qoi_variance: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Starts at 1.
    pub iteration: usize,
    pub x_unit: Vec<f64>,
    pub x_raw: Vec<f64>,
    pub y_raw: f64,
    /// Belief after the new observation is added.
    pub qoi_mean: f64,
    pub qoi_variance: f64,
    /// Ensemble-mean gain at the chosen design, computed before evaluating it.
    pub max_mean_ekld: f64,
    pub elapsed_s: f64,
    pub diagnostics: Diagnostics,
}

impl IterationRecord {
    pub fn qoi_sd(&self) -> f64 {
        self.qoi_variance.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    pub name: String,
    pub domain: Domain,
    pub reference_qoi: Option<ReferenceQoi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: EngineConfig,
    pub problem: ProblemInfo,
    /// Unit-coordinate designs and raw outputs of the starting design.
    pub initial_design: Vec<Vec<f64>>,
    pub initial_y: Vec<f64>,
    pub initial: Option<BeliefSnapshot>,
    pub iterations: Vec<IterationRecord>,
    pub final_design: Vec<Vec<f64>>,
    pub final_y: Vec<f64>,
    pub termination: Termination,
}

impl RunRecord {
    /// Most recent `(mean, variance)` of the expectation, if any was computed.
    pub fn final_belief(&self) -> Option<(f64, f64)> {
        match self.iterations.last() {
            Some(it) => Some((it.qoi_mean, it.qoi_variance)),
            None => self.initial.as_ref().map(|b| (b.qoi_mean, b.qoi_variance)),
        }
    }

    pub fn dim(&self) -> usize {
        self.problem.domain.dim()
    }
}

/// A run that stopped on an error. Carries whatever was recorded before it.
#[derive(Debug, thiserror::Error)]
#[error("{cause}")]
pub struct RunFailure {
    pub partial: Option<Box<RunRecord>>,
    #[source]
    pub cause: Error,
}

impl From<Error> for RunFailure {
    fn from(cause: Error) -> Self {
        Self { partial: None, cause }
    }
}

struct Inference {
    states: Vec<QoiState>,
    walkers: Vec<Vec<f64>>,
    standardizer: Standardizer,
    diagnostics: Diagnostics,
}

impl Inference {
    fn belief(&self) -> (f64, f64) {
        let beliefs: Vec<QoiBelief> = self.states.iter().map(QoiState::belief).collect();
        let (m, v) = marginal_qoi_belief(&beliefs);
        (self.standardizer.to_raw(m), self.standardizer.var_to_raw(v))
    }
}

fn infer(
    points: &[Vec<f64>],
    y_raw: &[f64],
    config: &EngineConfig,
    iteration: u64,
    warm: Option<&[Vec<f64>]>,
) -> Result<Inference> {
    let dataset = Arc::new(Dataset::from_raw(points.to_vec(), y_raw)?);
    let dim = dataset.dim();
    let seed = derive_seed(config.master_seed, Stream::Mcmc, iteration);
    let settings = config.mcmc.settings(dim, warm.is_some(), seed);
    let mut diagnostics = Diagnostics::default();
    let ensemble = match sample_posterior(&dataset, &config.prior, &settings, config.noise_var, warm) {
        Err(Error::DegenerateSampling { acceptance_rate, .. }) => {
            log::warn!("iteration {iteration}: sampler stuck (acceptance {acceptance_rate:.4}), restarting");
            diagnostics.mcmc_retried = true;
            let seed = derive_seed(config.master_seed, Stream::McmcRetry, iteration);
            let settings = config.mcmc.settings(dim, false, seed);
            sample_posterior(&dataset, &config.prior, &settings, config.noise_var, None)?
        }
        other => other?,
    };

    let built: Vec<Result<QoiState>> = ensemble
        .samples
        .into_par_iter()
        .map(|theta| condition(Arc::clone(&dataset), theta).map(QoiState::new))
        .collect();
    let total = built.len();
    let states: Vec<QoiState> = built.into_iter().filter_map(Result::ok).collect();
    if states.is_empty() {
        return Err(Error::SingularCovariance { max_jitter: crate::gp::JITTER_MAX });
    }
    diagnostics.acceptance_rate = ensemble.acceptance_rate;
    diagnostics.ensemble_size = states.len();
    diagnostics.failed_states = total - states.len();
    diagnostics.sigma1_clamped = states.iter().filter(|s| s.sigma1_clamped()).count();
    Ok(Inference {
        states,
        walkers: ensemble.last_walker_state,
        standardizer: dataset.standardizer(),
        diagnostics,
    })
}

struct Proposal {
    x: Vec<f64>,
    gain: f64,
    diagnostics: Diagnostics,
}

fn propose(inference: &Inference, dim: usize, config: &EngineConfig, iteration: u64) -> Result<Proposal> {
    let states = &inference.states;
    let mut diagnostics = inference.diagnostics.clone();
    let x = match config.acquisition {
        Acquisition::Ekld => {
            let settings = config.bgo.settings(dim, derive_seed(config.master_seed, Stream::Bgo, iteration));
            let outcome = maximize_ekld(|x| ekld(states, x, false).mean_gain, dim, &settings)?;
            diagnostics.bgo_evaluations = outcome.evaluations.len();
            diagnostics.bgo_stopped_early = outcome.stopped_early;
            diagnostics.bgo_fell_back = outcome.fell_back;
            outcome.x
        }
        Acquisition::Us => {
            let n = config.us_candidates.unwrap_or(200 * dim);
            us_next(states, n, derive_seed(config.master_seed, Stream::Candidates, iteration))
        }
        Acquisition::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, Stream::Random, iteration));
            (0..dim).map(|_| rng.random::<f64>()).collect()
        }
    };
    let value = ekld(states, &x, false);
    diagnostics.ekld_clamped = value.clamped;
    diagnostics.ekld_saturated = value.saturated;
    Ok(Proposal { x, gain: value.mean_gain, diagnostics })
}

/// Moves `x` by a tiny random in-domain step until it no longer coincides
/// with an existing design.
fn separate(x: &mut Vec<f64>, existing: &[Vec<f64>], seed: u64) -> bool {
    if !existing.contains(x) {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = x.clone();
    loop {
        let dir: Vec<f64> = (0..origin.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            continue;
        }
        *x = origin
            .iter()
            .zip(&dir)
            .map(|(o, v)| (o + DUPLICATE_PERTURBATION * v / norm).clamp(0.0, 1.0))
            .collect();
        if !existing.contains(x) {
            return true;
        }
    }
}

/// Runs the sequential design loop on `problem` until the budget or the
/// information threshold stops it.
pub fn run(problem: &Problem, config: &EngineConfig) -> Result<RunRecord, RunFailure> {
    let config = config.resolved(problem);
    let dim = problem.dim();
    config.validate(dim)?;
    let n_initial = config.n_initial.unwrap_or(problem.n_initial);

    let design = initial_design(n_initial, dim, derive_seed(config.master_seed, Stream::InitialDesign, 0));
    let mut record = RunRecord {
        config: config.clone(),
        problem: ProblemInfo {
            name: problem.name.clone(),
            domain: problem.domain.clone(),
            reference_qoi: problem.reference_qoi.clone(),
        },
        initial_design: design.clone(),
        initial_y: Vec::with_capacity(n_initial),
        initial: None,
        iterations: Vec::new(),
        final_design: Vec::new(),
        final_y: Vec::new(),
        termination: Termination::Budget,
    };

    let fail = |mut record: RunRecord, points: Vec<Vec<f64>>, y: Vec<f64>, cause: Error| {
        record.final_design = points;
        record.final_y = y;
        record.termination = Termination::Failed { cause: cause.to_string() };
        RunFailure { partial: Some(Box::new(record)), cause }
    };

    let mut points: Vec<Vec<f64>> = Vec::with_capacity(config.n_max.unwrap_or(n_initial));
    let mut y: Vec<f64> = Vec::with_capacity(points.capacity());
    for u in &design {
        match problem.evaluate_unit(u) {
            Ok(v) => {
                points.push(u.clone());
                y.push(v);
                record.initial_y.push(v);
            }
            Err(e) => return Err(fail(record, points, y, e.into())),
        }
    }

    let mut inference = match infer(&points, &y, &config, 0, None) {
        Ok(inf) => inf,
        Err(e) => return Err(fail(record, points, y, e)),
    };
    let (m, v) = inference.belief();
    log::info!("{}: n = {n_initial}, Q ~ N({m:.6}, {v:.3e})", problem.name);
    record.initial = Some(BeliefSnapshot {
        n: points.len(),
        qoi_mean: m,
        qoi_variance: v,
        diagnostics: inference.diagnostics.clone(),
    });

    let mut iteration = 0usize;
    let termination = loop {
        if let (StopDecision::Stop, reason) = stopping_check(points.len(), None, &config) {
            break reason.unwrap_or(Termination::Budget);
        }
        iteration += 1;
        let it = iteration as u64;
        let started = Instant::now();

        let mut proposal = match propose(&inference, dim, &config, it) {
            Ok(p) => p,
            Err(e) => return Err(fail(record, points, y, e)),
        };
        if let (StopDecision::Stop, reason) = stopping_check(points.len(), Some(proposal.gain), &config) {
            break reason.unwrap_or(Termination::Budget);
        }
        let perturb_seed = derive_seed(config.master_seed, Stream::Perturbation, it);
        if separate(&mut proposal.x, &points, perturb_seed) {
            proposal.diagnostics.perturbed = true;
            log::warn!("iteration {iteration}: proposed design duplicated an observation, perturbed");
        }

        let value = match problem.evaluate_unit(&proposal.x) {
            Ok(v) => v,
            Err(e) => return Err(fail(record, points, y, e.into())),
        };
        points.push(proposal.x.clone());
        y.push(value);

        inference = match infer(&points, &y, &config, it, Some(&inference.walkers)) {
            Ok(inf) => inf,
            Err(e) => return Err(fail(record, points, y, e)),
        };
        let (m, v) = inference.belief();
        let mut diagnostics = proposal.diagnostics;
        let x_raw = problem.domain.to_raw(&proposal.x);
        log::info!(
            "{} iteration {iteration}: x = {x_raw:?}, y = {value}, gain = {:.3e}, Q ~ N({m:.6}, {v:.3e})",
            problem.name,
            proposal.gain
        );
        // The gain diagnostics belong to the proposal; the acceptance rate to
        // the refreshed posterior.
        diagnostics.acceptance_rate = inference.diagnostics.acceptance_rate;
        diagnostics.mcmc_retried = inference.diagnostics.mcmc_retried;
        diagnostics.ensemble_size = inference.diagnostics.ensemble_size;
        diagnostics.failed_states = inference.diagnostics.failed_states;
        diagnostics.sigma1_clamped = inference.diagnostics.sigma1_clamped;
        record.iterations.push(IterationRecord {
            iteration,
            x_unit: proposal.x,
            x_raw,
            y_raw: value,
            qoi_mean: m,
            qoi_variance: v,
            max_mean_ekld: proposal.gain,
            elapsed_s: if config.record_timing { started.elapsed().as_secs_f64() } else { 0.0 },
            diagnostics,
        });
    };

    record.final_design = points;
    record.final_y = y;
    record.termination = termination;
    Ok(record)
}
