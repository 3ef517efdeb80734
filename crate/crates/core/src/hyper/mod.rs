//! Fully Bayesian treatment of the kernel hyperparameters.
//!
//! The signal variance gets a Gamma prior and every lengthscale an
//! exponential prior. The posterior is explored in log-parameter space
//! (`log s², log ℓ_1, …, log ℓ_d`) with the prior Jacobian folded into the
//! target, using the ensemble sampler in [`stretch`]. The noise variance is a
//! fixed constant and never sampled.

pub mod stretch;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gp::{log_marginal_likelihood, Dataset, HyperSample, KernelParams};
use stretch::{run_ensemble, StretchConfig};

/// Walkers whose acceptance rate falls below this are considered stuck.
pub const MIN_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    /// Rate of the exponential prior on each lengthscale.
    pub lengthscale_rate: f64,
    pub s2_shape: f64,
    pub s2_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { lengthscale_rate: 1.0, s2_shape: 2.0, s2_rate: 1.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.lengthscale_rate, self.s2_shape, self.s2_rate]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("prior hypervalues must be positive: {self:?}")))
        }
    }
}

/// Log prior density of `theta`. Non-positive parameters give `-inf`.
pub fn log_prior(theta: &HyperSample, prior: &PriorSpec) -> f64 {
    log_prior_raw(theta.kernel.s2(), theta.kernel.lengthscales(), prior)
}

fn log_prior_raw(s2: f64, lengthscales: &[f64], prior: &PriorSpec) -> f64 {
    if !(s2 > 0.0) || lengthscales.iter().any(|l| !(*l > 0.0)) {
        return f64::NEG_INFINITY;
    }
    let rate = prior.lengthscale_rate;
    let ls: f64 = lengthscales.iter().map(|l| rate.ln() - rate * l).sum();
    let k = prior.s2_shape;
    let gamma = k * prior.s2_rate.ln() - ln_gamma(k) + (k - 1.0) * s2.ln() - prior.s2_rate * s2;
    ls + gamma
}

/// Unnormalized log posterior; a singular covariance counts as zero density.
pub fn log_posterior(theta: &HyperSample, dataset: &Arc<Dataset>, prior: &PriorSpec) -> f64 {
    let lp = log_prior(theta, prior);
    if !lp.is_finite() {
        return f64::NEG_INFINITY;
    }
    match log_marginal_likelihood(dataset, theta) {
        Ok(ll) if ll.is_finite() => lp + ll,
        _ => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub n_walkers: usize,
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub stretch_a: f64,
    pub seed: u64,
}

impl McmcSettings {
    /// Defaults for a `dim`-dimensional input: 500 steps, thinning to about 100
    /// samples, and a shorter burn-in when warm-started.
    pub fn defaults_for(dim: usize, warm: bool, seed: u64) -> Self {
        let n_walkers = default_walkers(dim);
        let n_steps = 500;
        let burn_in = if warm { 50 } else { 250 };
        Self {
            n_walkers,
            n_steps,
            burn_in,
            thin: thin_for(n_walkers, n_steps - burn_in, 100),
            stretch_a: 2.0,
            seed,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let n_params = dim + 1;
        if self.n_walkers < 2 * n_params || self.n_walkers % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "need an even number of at least {} walkers, got {}",
                2 * n_params,
                self.n_walkers
            )));
        }
        if self.n_steps <= self.burn_in || self.thin == 0 || !(self.stretch_a > 1.0) {
            return Err(Error::InvalidParameter(format!("invalid MCMC settings {self:?}")));
        }
        Ok(())
    }
}

/// `max(6, 2(d+1))`, rounded up to an even count.
pub fn default_walkers(dim: usize) -> usize {
    let w = (2 * (dim + 1)).max(6);
    w + w % 2
}

/// Thinning interval that leaves roughly `target` samples.
pub fn thin_for(n_walkers: usize, kept_steps: usize, target: usize) -> usize {
    ((n_walkers * kept_steps) / target.max(1)).max(1)
}

/// Posterior samples of the hyperparameters and the state needed to warm-start
/// the next run.
#[derive(Debug, Clone)]
pub struct ThetaEnsemble {
    pub samples: Vec<HyperSample>,
    /// Final walker positions in log-parameter space, one row per walker.
    pub last_walker_state: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
}

fn to_theta(phi: &[f64], noise_var: f64) -> Option<HyperSample> {
    let s2 = phi[0].exp();
    let ls: Vec<f64> = phi[1..].iter().map(|v| v.exp()).collect();
    let kernel = KernelParams::new(s2, ls).ok()?;
    HyperSample::new(kernel, noise_var).ok()
}

/// Log posterior density in log-parameter space (includes `Σ φ_i` Jacobian).
fn log_target(phi: &[f64], dataset: &Arc<Dataset>, prior: &PriorSpec, noise_var: f64) -> f64 {
    match to_theta(phi, noise_var) {
        Some(theta) => log_posterior(&theta, dataset, prior) + phi.iter().sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

fn cold_start(
    dataset: &Arc<Dataset>,
    prior: &PriorSpec,
    noise_var: f64,
    n_walkers: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = dataset.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s2_dist = Gamma::new(prior.s2_shape, 1.0 / prior.s2_rate)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let ls_dist =
        Exp::new(prior.lengthscale_rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut walkers = Vec::with_capacity(n_walkers);
    let mut tries = 0;
    while walkers.len() < n_walkers {
        tries += 1;
        if tries > 1000 * n_walkers {
            return Err(Error::InvalidParameter(
                "could not draw starting points with finite posterior density".into(),
            ));
        }
        let mut phi = Vec::with_capacity(d + 1);
        phi.push(s2_dist.sample(&mut rng).max(1e-3).ln());
        phi.extend((0..d).map(|_| ls_dist.sample(&mut rng).clamp(1e-2, 10.0).ln()));
        if log_target(&phi, dataset, prior, noise_var).is_finite() {
            walkers.push(phi);
        }
    }
    Ok(walkers)
}

/// Samples the hyperparameter posterior given the data.
///
/// With `warm_start` the walkers resume from a previous ensemble's final
/// positions; otherwise they start from prior draws.
pub fn sample_posterior(
    dataset: &Arc<Dataset>,
    prior: &PriorSpec,
    settings: &McmcSettings,
    noise_var: f64,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<ThetaEnsemble> {
    prior.validate()?;
    let d = dataset.dim();
    settings.validate(d)?;

    let target = |phi: &[f64]| log_target(phi, dataset, prior, noise_var);
    let init = match warm_start {
        Some(state) => {
            if state.len() != settings.n_walkers {
                return Err(Error::DimensionMismatch {
                    expected: settings.n_walkers,
                    got: state.len(),
                });
            }
            if let Some(row) = state.iter().find(|r| r.len() != d + 1) {
                return Err(Error::DimensionMismatch { expected: d + 1, got: row.len() });
            }
            // Data changed since the state was saved; walkers that landed on a
            // zero-density point are replaced by a fresh prior draw.
            let mut fresh = None;
            let mut init = Vec::with_capacity(state.len());
            for (k, row) in state.iter().enumerate() {
                if target(row).is_finite() {
                    init.push(row.clone());
                } else {
                    let pool = match &mut fresh {
                        Some(p) => p,
                        None => fresh.insert(cold_start(
                            dataset,
                            prior,
                            noise_var,
                            settings.n_walkers,
                            settings.seed ^ 0x5bd1_e995,
                        )?),
                    };
                    init.push(pool[k].clone());
                }
            }
            init
        }
        None => cold_start(dataset, prior, noise_var, settings.n_walkers, settings.seed)?,
    };

    let config = StretchConfig {
        n_steps: settings.n_steps,
        burn_in: settings.burn_in,
        thin: settings.thin,
        a: settings.stretch_a,
        seed: settings.seed,
    };
    let run = run_ensemble(&target, init, &config)?;
    if run.acceptance_rate < MIN_ACCEPTANCE {
        return Err(Error::DegenerateSampling {
            acceptance_rate: run.acceptance_rate,
            threshold: MIN_ACCEPTANCE,
        });
    }
    let samples = run
        .samples
        .iter()
        .map(|phi| to_theta(phi, noise_var).ok_or_else(|| Error::InvalidParameter(format!("{phi:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThetaEnsemble {
        samples,
        last_walker_state: run.final_positions,
        acceptance_rate: run.acceptance_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn theta(s2: f64, ls: Vec<f64>) -> HyperSample {
        HyperSample::new(KernelParams::new(s2, ls).unwrap(), 1e-6).unwrap()
    }

    fn demo_dataset() -> Arc<Dataset> {
        let pts: Vec<Vec<f64>> = [0.05, 0.3, 0.55, 0.7, 0.95].iter().map(|x| vec![*x]).collect();
        let y: Vec<f64> = pts.iter().map(|p| (6.0 * p[0]).sin()).collect();
        Arc::new(Dataset::from_raw(pts, &y).unwrap())
    }

    #[test]
    fn prior_closed_form() {
        let p = PriorSpec::default();
        assert_abs_diff_eq!(log_prior(&theta(1.0, vec![1.0]), &p), -2.0, epsilon = 1e-12);
        assert_eq!(log_prior_raw(1.0, &[0.5, 0.0], &p), f64::NEG_INFINITY);
        assert_eq!(log_prior_raw(-1.0, &[0.5], &p), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_rate_change_matches_densities() {
        let ls = vec![0.3, 1.7];
        let t = theta(0.8, ls.clone());
        let p1 = PriorSpec { lengthscale_rate: 1.5, ..PriorSpec::default() };
        let p2 = PriorSpec { lengthscale_rate: 3.0, ..p1 };
        // Direct exponential densities, independent of the implementation.
        let direct = |rate: f64| ls.iter().map(|l| (rate * (-rate * l).exp()).ln()).sum::<f64>();
        let diff = log_prior(&t, &p2) - log_prior(&t, &p1);
        assert_abs_diff_eq!(diff, direct(3.0) - direct(1.5), epsilon = 1e-12);
        assert_abs_diff_eq!(diff, 2.0 * 2f64.ln() - 1.5 * (0.3 + 1.7), epsilon = 1e-12);
    }

    #[test]
    fn posterior_single_observation() {
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.4]], vec![0.7]).unwrap());
        let t = theta(1.3, vec![0.5]);
        let p = PriorSpec::default();
        let v: f64 = 1.3 + 1e-6;
        let normal = -0.5 * (2.0 * PI * v).ln() - 0.49 / (2.0 * v);
        assert_abs_diff_eq!(log_posterior(&t, &ds, &p), log_prior(&t, &p) + normal, epsilon = 1e-12);
    }

    #[test]
    fn flat_prior_ranks_by_likelihood() {
        let ds = demo_dataset();
        let flat = PriorSpec { lengthscale_rate: 1e-9, s2_shape: 1.0, s2_rate: 1e-9 };
        let a = theta(1.0, vec![0.2]);
        let b = theta(1.0, vec![0.02]);
        let la = log_marginal_likelihood(&ds, &a).unwrap();
        let lb = log_marginal_likelihood(&ds, &b).unwrap();
        let pa = log_posterior(&a, &ds, &flat);
        let pb = log_posterior(&b, &ds, &flat);
        assert_eq!(la > lb, pa > pb);
        assert_eq!(log_posterior(&theta(1.0, vec![0.2]), &ds, &flat).is_finite(), true);
    }

    #[test]
    fn default_settings() {
        let s = McmcSettings::defaults_for(1, false, 0);
        assert_eq!(s.n_walkers, 6);
        assert_eq!(s.burn_in, 250);
        let kept = s.n_walkers * (s.n_steps - s.burn_in).div_ceil(s.thin);
        assert!((90..=120).contains(&kept), "{kept}");
        assert_eq!(default_walkers(3), 8);
        assert_eq!(default_walkers(5), 12);
        assert!(McmcSettings { n_walkers: 4, ..s }.validate(2).is_err());
        assert!(McmcSettings { burn_in: 500, ..s }.validate(1).is_err());
    }

    #[test]
    fn samples_are_positive_and_deterministic() {
        let ds = demo_dataset();
        let settings = McmcSettings::defaults_for(1, false, 42);
        let a = sample_posterior(&ds, &PriorSpec::default(), &settings, 1e-6, None).unwrap();
        let b = sample_posterior(&ds, &PriorSpec::default(), &settings, 1e-6, None).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a.samples.len() >= 90);
        for s in &a.samples {
            assert!(s.kernel.s2() > 0.0);
            assert!(s.kernel.lengthscales().iter().all(|l| *l > 0.0));
            assert_eq!(s.noise_var, 1e-6);
        }
        assert_eq!(a.last_walker_state.len(), 6);
    }

    #[test]
    fn warm_start_mixes_with_short_burn_in() {
        let ds = demo_dataset();
        let cold = McmcSettings::defaults_for(1, false, 7);
        let first = sample_posterior(&ds, &PriorSpec::default(), &cold, 1e-6, None).unwrap();
        let warm = McmcSettings::defaults_for(1, true, 8);
        assert_eq!(warm.burn_in, 50);
        let second = sample_posterior(
            &ds,
            &PriorSpec::default(),
            &warm,
            1e-6,
            Some(&first.last_walker_state),
        )
        .unwrap();
        assert!((0.1..=0.9).contains(&second.acceptance_rate), "{}", second.acceptance_rate);
        let bad = vec![vec![0.0; 2]; 4];
        assert!(sample_posterior(&ds, &PriorSpec::default(), &warm, 1e-6, Some(&bad)).is_err());
    }
}
