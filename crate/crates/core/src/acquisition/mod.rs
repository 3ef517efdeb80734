//! Choosing the next experiment.
//!
//! [`maximize_ekld`] runs the inner Bayesian global optimization of the
//! information-gain surface: a handful of seed evaluations, then a loop that
//! fits a maximum-likelihood GP to the evaluations so far and evaluates the
//! Latin-hypercube candidate with the largest augmented expected improvement.
//! [`us_next`] is the uncertainty-sampling baseline.

mod bgo;

pub use bgo::{aei, fit_inner_surrogate, maximize_ekld, BgoOutcome, BgoSettings, InnerSurrogate};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::gp::GpState;

/// Latin hypercube design of `n` points in `[0,1]^d`.
pub fn lhs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    lhs_with_rng(n, d, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn lhs_with_rng(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(rng);
        for (i, &s) in strata.iter().enumerate() {
            let mut x = (s as f64 + rng.random::<f64>()) / n as f64;
            if (x * n as f64).floor() as usize != s {
                x = s as f64 / n as f64;
            }
            points[i][j] = x;
        }
    }
    points
}

/// Index of the largest value; the lowest index wins ties and NaNs are skipped.
pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Ensemble-averaged predictive variance at each candidate.
pub fn mean_predictive_variance<S: AsRef<GpState> + Sync>(states: &[S], candidates: &[Vec<f64>]) -> Vec<f64> {
    candidates
        .par_iter()
        .map(|x| {
            states.iter().map(|s| s.as_ref().predict(x).variance).sum::<f64>() / states.len() as f64
        })
        .collect()
}

/// Candidate with the largest ensemble-averaged predictive variance.
pub fn us_select<S: AsRef<GpState> + Sync>(states: &[S], candidates: &[Vec<f64>]) -> Option<usize> {
    argmax(&mean_predictive_variance(states, candidates))
}

/// Uncertainty sampling over a Latin-hypercube candidate set.
pub fn us_next<S: AsRef<GpState> + Sync>(states: &[S], n_candidates: usize, seed: u64) -> Vec<f64> {
    let d = states[0].as_ref().dataset().dim();
    let candidates = lhs(n_candidates.max(1), d, seed);
    let best = us_select(states, &candidates).unwrap_or(0);
    candidates[best].clone()
}

impl AsRef<GpState> for GpState {
    fn as_ref(&self) -> &GpState {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{condition, Dataset, HyperSample, KernelParams};
    use std::sync::Arc;

    #[test]
    fn lhs_is_stratified() {
        let pts = lhs(10, 1, 4);
        let mut cells: Vec<usize> = pts.iter().map(|p| (p[0] * 10.0).floor() as usize).collect();
        cells.sort();
        assert_eq!(cells, (0..10).collect::<Vec<_>>());
        let pts = lhs(37, 4, 9);
        for j in 0..4 {
            let mut cells: Vec<usize> = pts.iter().map(|p| (p[j] * 37.0).floor() as usize).collect();
            cells.sort();
            assert_eq!(cells, (0..37).collect::<Vec<_>>());
        }
        let one = lhs(1, 3, 0);
        assert_eq!(one.len(), 1);
        assert!(one[0].iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(lhs(15, 2, 77), lhs(15, 2, 77));
        assert_ne!(lhs(15, 2, 77), lhs(15, 2, 78));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[f64::NAN, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    fn two_point_state() -> GpState {
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.25], vec![0.75]], vec![0.4, -0.3]).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.0, vec![0.15]).unwrap(), 1e-10).unwrap();
        condition(ds, theta).unwrap()
    }

    #[test]
    fn us_picks_variance_peaks() {
        let states = vec![two_point_state()];
        let x = us_next(&states, 200, 3);
        // Dense-grid variance oracle: the peaks sit at the ends and the midpoint.
        let grid: Vec<Vec<f64>> = (0..=1000).map(|i| vec![i as f64 / 1000.0]).collect();
        let var = mean_predictive_variance(&states, &grid);
        let peak = var.iter().cloned().fold(f64::MIN, f64::max);
        let got = states[0].predict(&x).variance;
        assert!(got > 0.9 * peak);
        assert!(x[0] < 0.05 || (x[0] - 0.5).abs() < 0.05 || x[0] > 0.95, "{x:?}");
        assert_eq!(us_next(&states, 200, 3), x);
    }

    #[test]
    fn us_never_picks_an_observed_design() {
        let states = vec![two_point_state()];
        let candidates = vec![vec![0.25], vec![0.3], vec![0.75]];
        assert_eq!(us_select(&states, &candidates), Some(1));
    }
}
