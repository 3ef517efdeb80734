use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use argmin::core::{CostFunction, Error as ArgminError, Executor, State};
use argmin::solver::neldermead::NelderMead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{argmax, lhs_with_rng};
use crate::error::{Error, Result};
use crate::gp::{condition, Dataset, GpState, HyperSample, KernelParams};

const N_RESTARTS: usize = 5;
const NOISE_FLOOR: f64 = 1e-8;
const S2_BOUNDS: (f64, f64) = (1e-8, 1e4);
const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 10.0);
const NOISE_BOUNDS: (f64, f64) = (NOISE_FLOOR, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BgoSettings {
    /// Seed evaluations at uniform-random points.
    pub t_init: usize,
    /// Total evaluation budget.
    pub t_max: usize,
    /// Latin-hypercube candidates scored per iteration.
    pub n_candidates: usize,
    /// Relative stopping tolerance: the loop ends once the best AEI falls below
    /// `tol · (max observed gain + 1e-12)`.
    pub tol: f64,
    pub seed: u64,
}

impl BgoSettings {
    pub fn defaults_for(dim: usize, seed: u64) -> Self {
        Self {
            t_init: (2 * dim).max(5),
            t_max: 20,
            n_candidates: 200 * dim,
            tol: 1e-4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_init < 2 || self.t_max < self.t_init || self.n_candidates == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid BGO settings {self:?}")));
        }
        Ok(())
    }
}

/// Maximum-likelihood GP over the gain evaluations made so far. Values are
/// centred and scaled internally; predictions come back in the original units.
#[derive(Debug, Clone)]
pub struct InnerSurrogate {
    gp: GpState,
    offset: f64,
    scale: f64,
}

impl InnerSurrogate {
    /// Surrogate with fixed hyperparameters (given in the scaled value space).
    pub fn with_params(
        designs: Vec<Vec<f64>>,
        values: &[f64],
        kernel: KernelParams,
        noise_var: f64,
    ) -> Result<Self> {
        let (offset, scale) = value_scaling(values);
        let y = values.iter().map(|v| (v - offset) / scale).collect();
        let ds = Arc::new(Dataset::unscaled(designs, y)?);
        let gp = condition(ds, HyperSample::new(kernel, noise_var)?)?;
        Ok(Self { gp, offset, scale })
    }

    pub fn designs(&self) -> &[Vec<f64>] {
        self.gp.dataset().points()
    }

    pub fn kernel(&self) -> &KernelParams {
        self.gp.kernel()
    }

    /// Fitted noise variance, in original units.
    pub fn noise_var(&self) -> f64 {
        self.gp.noise_var() * self.scale * self.scale
    }

    /// Predictive mean and latent standard deviation, in original units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let p = self.gp.predict(x);
        (self.offset + self.scale * p.mean, self.scale * p.variance.sqrt())
    }

    pub fn log_likelihood(&self) -> f64 {
        self.gp.log_marginal_likelihood()
    }
}

fn value_scaling(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 1e-12 * mean.abs() && sd > 0.0 {
        sd
    } else if mean != 0.0 {
        mean.abs()
    } else {
        1.0
    };
    (mean, scale)
}

struct NegLogLik<'a> {
    designs: &'a [Vec<f64>],
    values: &'a [f64],
}

impl NegLogLik<'_> {
    fn unpack(p: &[f64]) -> Option<(KernelParams, f64)> {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo.ln() && v <= hi.ln();
        let d = p.len() - 2;
        if !within(p[0], S2_BOUNDS)
            || !within(p[d + 1], NOISE_BOUNDS)
            || !p[1..=d].iter().all(|v| within(*v, LENGTHSCALE_BOUNDS))
        {
            return None;
        }
        let kernel = KernelParams::new(p[0].exp(), p[1..=d].iter().map(|v| v.exp()).collect()).ok()?;
        Some((kernel, p[d + 1].exp()))
    }
}

impl CostFunction for NegLogLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, ArgminError> {
        let Some((kernel, noise)) = Self::unpack(p) else {
            return Ok(f64::MAX);
        };
        Ok(
            match InnerSurrogate::with_params(self.designs.to_vec(), self.values, kernel, noise) {
                Ok(s) if s.log_likelihood().is_finite() => -s.log_likelihood(),
                _ => f64::MAX,
            },
        )
    }
}

/// Fits the inner surrogate by maximizing the marginal likelihood from
/// several log-uniform starting points; the best restart wins.
pub fn fit_inner_surrogate(designs: &[Vec<f64>], values: &[f64], seed: u64) -> Result<InnerSurrogate> {
    if designs.len() < 2 || designs.len() != values.len() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "inner surrogate needs at least two finite evaluations".into(),
        ));
    }
    let d = designs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln());
    let starts: Vec<Vec<f64>> = (0..N_RESTARTS)
        .map(|_| {
            let mut p = vec![log_uniform(&mut rng, 0.1, 10.0)];
            p.extend((0..d).map(|_| log_uniform(&mut rng, 0.01, 3.0)));
            p.push(log_uniform(&mut rng, NOISE_FLOOR, 1e-2));
            p
        })
        .collect();

    let best = starts
        .into_par_iter()
        .filter_map(|start| {
            let simplex: Vec<Vec<f64>> = std::iter::once(start.clone())
                .chain((0..start.len()).map(|i| {
                    let mut v = start.clone();
                    // Step inward so every vertex respects the bounds.
                    v[i] += if i == start.len() - 1 { 1.0 } else { -0.7 };
                    v
                }))
                .collect();
            let problem = NegLogLik { designs, values };
            let solver = NelderMead::new(simplex).with_sd_tolerance(1e-7).ok()?;
            let res = Executor::new(problem, solver)
                .configure(|s| s.max_iters(400))
                .run()
                .ok()?;
            let cost = res.state().get_best_cost();
            let param = res.state().get_best_param()?.clone();
            (cost < f64::MAX).then_some((cost, param))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0));

    let (_, param) = best.ok_or(Error::DegenerateFit)?;
    let (kernel, noise) = NegLogLik::unpack(&param).ok_or(Error::DegenerateFit)?;
    InnerSurrogate::with_params(designs.to_vec(), values, kernel, noise).map_err(|_| Error::DegenerateFit)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Expected improvement over `best` for a maximization problem.
pub(crate) fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gap = mean - best;
    if sd <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    (gap * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}

/// Augmented expected improvement for maximization.
///
/// The incumbent is the evaluated design maximizing `μ̂ − σ̂`, and the
/// improvement is discounted by `1 − σ_ε / √(ŝ² + σ_ε²)` where `σ_ε²` is the
/// surrogate's fitted noise.
pub fn aei(surrogate: &InnerSurrogate, candidates: &[Vec<f64>]) -> Vec<f64> {
    let noise_sd = surrogate.noise_var().sqrt();
    let effective: Vec<f64> = surrogate
        .designs()
        .iter()
        .map(|x| {
            let (m, s) = surrogate.predict(x);
            m - s
        })
        .collect();
    let incumbent = argmax(&effective).expect("surrogate has data");
    let best = surrogate.predict(&surrogate.designs()[incumbent]).0;

    candidates
        .par_iter()
        .map(|x| {
            let (m, s) = surrogate.predict(x);
            let total = (s * s + noise_sd * noise_sd).sqrt();
            let discount = if total > 0.0 { 1.0 - noise_sd / total } else { 0.0 };
            (expected_improvement(m, s, best) * discount).max(0.0)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BgoOutcome {
    /// Evaluated design with the largest observed gain.
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: Vec<(Vec<f64>, f64)>,
    pub stopped_early: bool,
    /// The inner fit failed and the remaining budget went to random search.
    pub fell_back: bool,
}

/// Maximizes `objective` over `[0,1]^dim` with BGO driven by AEI.
pub fn maximize_ekld<F>(objective: F, dim: usize, settings: &BgoSettings) -> Result<BgoOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut designs: Vec<Vec<f64>> = (0..settings.t_init)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut values: Vec<f64> = designs.par_iter().map(|x| objective(x)).collect();

    let mut stopped_early = false;
    let mut fell_back = false;
    while designs.len() < settings.t_max {
        let next = if fell_back {
            (0..dim).map(|_| rng.random::<f64>()).collect()
        } else {
            let fit_seed = rng.random::<u64>();
            match fit_inner_surrogate(&designs, &values, fit_seed) {
                Ok(surrogate) => {
                    let candidates = lhs_with_rng(settings.n_candidates, dim, &mut rng);
                    let scores = aei(&surrogate, &candidates);
                    let j = argmax(&scores).unwrap_or(0);
                    let max_seen = values.iter().cloned().fold(f64::MIN, f64::max);
                    if !(scores[j] >= settings.tol * (max_seen + 1e-12)) {
                        stopped_early = true;
                        break;
                    }
                    candidates[j].clone()
                }
                Err(e) => {
                    log::warn!("inner surrogate fit failed ({e}); switching to random search");
                    fell_back = true;
                    (0..dim).map(|_| rng.random::<f64>()).collect()
                }
            }
        };
        values.push(objective(&next));
        designs.push(next);
    }

    let best = argmax(&values).ok_or(Error::DegenerateFit)?;
    Ok(BgoOutcome {
        x: designs[best].clone(),
        value: values[best],
        evaluations: designs.into_iter().zip(values).collect(),
        stopped_early,
        fell_back,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand_distr::StandardNormal;

    #[test]
    fn flat_values_fit_to_floor() {
        let designs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let s = fit_inner_surrogate(&designs, &[0.3; 6], 1).unwrap();
        assert!(s.kernel().s2() < 1e-3, "{}", s.kernel().s2());
        for x in [0.05, 0.5, 0.93] {
            assert_abs_diff_eq!(s.predict(&[x]).0, 0.3, epsilon = 1e-6);
        }
    }

    #[test]
    fn recovers_lengthscale_of_a_gp_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let designs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>()]).collect();
        let kernel = KernelParams::new(1.0, vec![0.2]).unwrap();
        let mut cov = crate::gp::kernel_matrix(&designs, &kernel).unwrap();
        for i in 0..40 {
            cov[(i, i)] += 1e-8;
        }
        let l = cov.cholesky().unwrap().l();
        let z = DVector::from_iterator(40, (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y: Vec<f64> = (l * z).iter().cloned().collect();
        let s = fit_inner_surrogate(&designs, &y, 5).unwrap();
        let ell = s.kernel().lengthscales()[0];
        assert!((0.1..=0.4).contains(&ell), "{ell}");
        let again = fit_inner_surrogate(&designs, &y, 5).unwrap();
        assert_eq!(again.kernel(), s.kernel());
    }

    #[test]
    fn aei_reduces_to_ei_without_noise() {
        let designs = vec![vec![0.1], vec![0.4], vec![0.9]];
        let values = [0.2, 0.8, 0.1];
        let s = InnerSurrogate::with_params(
            designs.clone(),
            &values,
            KernelParams::new(1.0, vec![0.2]).unwrap(),
            0.0,
        )
        .unwrap();
        let candidates: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 49.0]).collect();
        let scores = aei(&s, &candidates);
        // Direct EI: incumbent is the best μ̂ − σ̂ among the data (σ̂ ≈ 0 there).
        let best = designs
            .iter()
            .map(|x| s.predict(x).0 - s.predict(x).1)
            .zip(designs.iter())
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, x)| s.predict(x).0)
            .unwrap();
        for (x, got) in candidates.iter().zip(&scores) {
            let (m, sd) = s.predict(x);
            let ei = if sd > 0.0 {
                let z = (m - best) / sd;
                let cdf = 0.5 * erfc(-z / SQRT_2);
                (m - best) * cdf + sd * (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
            } else {
                (m - best).max(0.0)
            };
            assert!((got - ei.max(0.0)).abs() <= 1e-12, "{got} vs {ei}");
            assert!(*got >= 0.0);
        }
    }

    #[test]
    fn aei_zero_at_incumbent_and_positive_where_promising() {
        let designs = vec![vec![0.1], vec![0.5], vec![0.9]];
        let values = [0.0, 1.0, 0.0];
        let s = InnerSurrogate::with_params(
            designs,
            &values,
            KernelParams::new(1.0, vec![0.3]).unwrap(),
            1e-10,
        )
        .unwrap();
        let at_best = aei(&s, &[vec![0.5]])[0];
        assert!(at_best < 1e-6, "{at_best}");
        let wide = InnerSurrogate::with_params(
            vec![vec![0.1], vec![0.2]],
            &[0.0, 1.0],
            KernelParams::new(1.0, vec![0.3]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(aei(&wide, &[vec![0.35]])[0] > 0.0);
    }

    fn bump(x: &[f64]) -> f64 {
        (0.3 - (x[0] - 0.63).powi(2)).max(0.0)
    }

    #[test]
    fn finds_interior_peak() {
        let out = maximize_ekld(bump, 1, &BgoSettings::defaults_for(1, 3)).unwrap();
        assert!((out.x[0] - 0.63).abs() < 0.05, "{:?}", out.x);
        let best = out.evaluations.iter().map(|e| e.1).fold(f64::MIN, f64::max);
        assert_eq!(out.value, best);
        assert!(out.evaluations.iter().all(|(x, _)| x.iter().all(|v| (0.0..=1.0).contains(v))));
        let again = maximize_ekld(bump, 1, &BgoSettings::defaults_for(1, 3)).unwrap();
        assert_eq!(again.x, out.x);
    }

    #[test]
    fn constant_surface_stops_early() {
        let settings = BgoSettings::defaults_for(1, 8);
        let out = maximize_ekld(|_: &[f64]| 0.25, 1, &settings).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.evaluations.len(), settings.t_init);
    }

    #[test]
    fn settings_validation() {
        let s = BgoSettings::defaults_for(2, 0);
        assert_eq!(s.t_init, 5);
        assert_eq!(s.n_candidates, 400);
        assert!(BgoSettings { t_init: 1, ..s }.validate().is_err());
        assert!(BgoSettings { t_max: 3, ..s }.validate().is_err());
        assert!(BgoSettings { tol: 0.0, ..s }.validate().is_err());
    }
}
