//! Affine-invariant ensemble sampler with the stretch move.
//!
//! The walkers are split into two halves; each half is updated against the
//! current positions of the other, so the walkers of one half can move in
//! parallel. Every walker owns its own RNG stream, which keeps the chain
//! bit-identical no matter how rayon schedules the half-updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Unnormalized log density over `R^D`; `-inf` rejects a point.
pub trait LogDensity: Sync {
    fn log_density(&self, p: &[f64]) -> f64;
}

impl<F> LogDensity for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn log_density(&self, p: &[f64]) -> f64 {
        self(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretchConfig {
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Scale `a > 1` of the stretch distribution `g(z) ∝ 1/√z` on `[1/a, a]`.
    pub a: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    /// Kept positions, step-major: all walkers of the first kept step, then the next.
    pub samples: Vec<Vec<f64>>,
    pub final_positions: Vec<Vec<f64>>,
    pub final_log_density: Vec<f64>,
    /// Fraction of accepted proposals over every step, burn-in included.
    pub acceptance_rate: f64,
}

struct Walker {
    pos: Vec<f64>,
    log_p: f64,
    rng: ChaCha8Rng,
    accepted: usize,
}

impl Walker {
    fn step(&mut self, others: &[Walker], a: f64, target: &impl LogDensity) {
        let dim = self.pos.len();
        let partner = &others[self.rng.random_range(0..others.len())].pos;
        let u: f64 = self.rng.random();
        let z = ((a - 1.0) * u + 1.0).powi(2) / a;
        let proposal: Vec<f64> = self
            .pos
            .iter()
            .zip(partner)
            .map(|(x, y)| y + z * (x - y))
            .collect();
        let log_p = target.log_density(&proposal);
        let log_ratio = (dim as f64 - 1.0) * z.ln() + log_p - self.log_p;
        let log_u = self.rng.random::<f64>().ln();
        if log_p.is_finite() && log_u < log_ratio {
            self.pos = proposal;
            self.log_p = log_p;
            self.accepted += 1;
        }
    }
}

/// Runs the ensemble from `init` (one row per walker).
pub fn run_ensemble(
    target: &impl LogDensity,
    init: Vec<Vec<f64>>,
    config: &StretchConfig,
) -> Result<EnsembleRun> {
    let n_walkers = init.len();
    if n_walkers < 4 || n_walkers % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "the stretch move needs an even number of at least 4 walkers, got {n_walkers}"
        )));
    }
    if !(config.a > 1.0) || config.thin == 0 || config.n_steps <= config.burn_in {
        return Err(Error::InvalidParameter(format!("invalid sampler settings {config:?}")));
    }
    let dim = init[0].len();

    let mut walkers = Vec::with_capacity(n_walkers);
    for (k, pos) in init.into_iter().enumerate() {
        if pos.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: pos.len() });
        }
        let log_p = target.log_density(&pos);
        if !log_p.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "walker {k} starts at a point of zero density: {pos:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64);
        walkers.push(Walker { pos, log_p, rng, accepted: 0 });
    }

    let half = n_walkers / 2;
    let kept_steps = (config.n_steps - config.burn_in).div_ceil(config.thin);
    let mut samples = Vec::with_capacity(kept_steps * n_walkers);
    for step in 0..config.n_steps {
        let (first, second) = walkers.split_at_mut(half);
        first.par_iter_mut().for_each(|w| w.step(second, config.a, target));
        second.par_iter_mut().for_each(|w| w.step(first, config.a, target));

        if step >= config.burn_in && (step - config.burn_in) % config.thin == 0 {
            samples.extend(walkers.iter().map(|w| w.pos.clone()));
        }
    }

    let accepted: usize = walkers.iter().map(|w| w.accepted).sum();
    Ok(EnsembleRun {
        samples,
        acceptance_rate: accepted as f64 / (n_walkers * config.n_steps) as f64,
        final_log_density: walkers.iter().map(|w| w.log_p).collect(),
        final_positions: walkers.into_iter().map(|w| w.pos).collect(),
    })
}
