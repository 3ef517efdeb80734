//! Zero-mean Gaussian process with a squared-exponential kernel.
//!
//! Everything here works in unit-hypercube input coordinates and standardized
//! output units. A [`GpState`] is the dataset conditioned on one
//! [`HyperSample`]; it owns the Cholesky factor of `K + σ²I` and the weight
//! vector `α = (K + σ²I)⁻¹ Y` and is immutable once built.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise variance used for deterministic simulators, in standardized units.
pub const DEFAULT_NOISE_VAR: f64 = 1e-6;

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

/// Signal variance and per-dimension lengthscales of the squared-exponential kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    s2: f64,
    lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(s2: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "signal variance must be positive and finite, got {s2}"
            )));
        }
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one lengthscale".into()));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "lengthscales must be positive and finite, got {l}"
            )));
        }
        Ok(Self { s2, lengthscales })
    }

    /// Isotropic kernel in `dim` dimensions.
    pub fn isotropic(s2: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(s2, vec![lengthscale; dim])
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Kernel value without a dimension check; callers guarantee matching lengths.
    #[inline]
    pub(crate) fn k(&self, x: &[f64], x2: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(x2.len(), self.dim());
        let r2: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let u = (a - b) / l;
                u * u
            })
            .sum();
        self.s2 * (-0.5 * r2).exp()
    }
}

/// `s²·exp(−½ Σ (x_j − x2_j)² / ℓ_j²)`.
pub fn kernel_eval(x: &[f64], x2: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(params.dim(), x.len())?;
    check_dim(params.dim(), x2.len())?;
    Ok(params.k(x, x2))
}

/// Covariance matrix of the kernel over a set of points.
pub fn kernel_matrix(points: &[Vec<f64>], params: &KernelParams) -> Result<DMatrix<f64>> {
    for p in points {
        check_dim(params.dim(), p.len())?;
    }
    Ok(kernel_matrix_unchecked(points, params))
}

fn kernel_matrix_unchecked(points: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.s2;
        for j in 0..i {
            let v = params.k(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Kernel parameters together with the fixed observation-noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSample {
    pub kernel: KernelParams,
    pub noise_var: f64,
}

impl HyperSample {
    pub fn new(kernel: KernelParams, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be non-negative, got {noise_var}"
            )));
        }
        Ok(Self { kernel, noise_var })
    }
}

/// Affine map between raw outputs and the zero-mean, unit-scale outputs the GP sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Self = Self { mean: 0.0, scale: 1.0 };

    /// Sample mean and standard deviation of `y`; a spread at rounding level maps to scale 1.
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len() as f64;
        if y.is_empty() {
            return Self::IDENTITY;
        }
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = var.sqrt();
        if scale > 1e-12 * mean.abs() && scale > 0.0 && scale.is_finite() {
            Self { mean, scale }
        } else {
            Self { mean, scale: 1.0 }
        }
    }

    pub fn to_std(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn to_raw(&self, y: f64) -> f64 {
        y * self.scale + self.mean
    }

    pub fn var_to_raw(&self, v: f64) -> f64 {
        v * self.scale * self.scale
    }
}

/// Observed designs (unit-hypercube rows) and standardized outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    y: DVector<f64>,
    standardizer: Standardizer,
}

impl Dataset {
    /// Builds a dataset from already-standardized outputs.
    pub fn new(points: Vec<Vec<f64>>, y_std: Vec<f64>, standardizer: Standardizer) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidParameter("dataset needs at least one observation".into()));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::InvalidParameter("designs need at least one coordinate".into()));
        }
        check_dim(points.len(), y_std.len())?;
        for p in &points {
            check_dim(d, p.len())?;
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParameter(format!(
                    "design {p:?} lies outside the unit hypercube"
                )));
            }
        }
        if y_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("outputs must be finite".into()));
        }
        if !(standardizer.scale > 0.0) {
            return Err(Error::InvalidParameter("standardizer scale must be positive".into()));
        }
        Ok(Self {
            points,
            y: DVector::from_vec(y_std),
            standardizer,
        })
    }

    /// Standardizes raw outputs with their own mean and spread.
    pub fn from_raw(points: Vec<Vec<f64>>, y_raw: &[f64]) -> Result<Self> {
        let standardizer = Standardizer::fit(y_raw);
        let y = y_raw.iter().map(|v| standardizer.to_std(*v)).collect();
        Self::new(points, y, standardizer)
    }

    /// Uses the outputs as they are (identity standardizer).
    pub fn unscaled(points: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        Self::new(points, y, Standardizer::IDENTITY)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn standardizer(&self) -> Standardizer {
        self.standardizer
    }
}

/// Posterior mean and variance of the latent function at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// The raw variance came out negative and was clamped to zero.
    pub clamped: bool,
    /// The query point lies outside the unit hypercube.
    pub out_of_domain: bool,
}

/// A dataset conditioned on one set of hyperparameters.
#[derive(Debug, Clone)]
pub struct GpState {
    dataset: Arc<Dataset>,
    theta: HyperSample,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter_used: f64,
}

/// Factorizes `K + σ²I`, escalating diagonal jitter by factors of ten when needed.
pub fn condition(dataset: Arc<Dataset>, theta: HyperSample) -> Result<GpState> {
    check_dim(theta.kernel.dim(), dataset.dim())?;
    let mut cov = kernel_matrix_unchecked(dataset.points(), &theta.kernel);
    for i in 0..dataset.len() {
        cov[(i, i)] += theta.noise_var;
    }

    let s2 = theta.kernel.s2();
    let mut jitter = 0.0;
    let chol = loop {
        let mut attempt = cov.clone();
        if jitter > 0.0 {
            for i in 0..dataset.len() {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(attempt) {
            break chol;
        }
        jitter = if jitter == 0.0 { JITTER_START * s2 } else { jitter * 10.0 };
        if jitter > JITTER_MAX * s2 * (1.0 + 1e-9) {
            return Err(Error::SingularCovariance { max_jitter: JITTER_MAX * s2 });
        }
    };

    let alpha = chol.solve(dataset.y());
    Ok(GpState {
        dataset,
        theta,
        chol,
        alpha,
        jitter_used: jitter,
    })
}

impl GpState {
    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn theta(&self) -> &HyperSample {
        &self.theta
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.theta.kernel
    }

    pub fn noise_var(&self) -> f64 {
        self.theta.noise_var
    }

    /// Weight vector `α = (K + σ²I)⁻¹ Y`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K + σ²I (+ jitter)`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Cross-covariance vector `k_n(x) = (k(x, x_1), …, k(x, x_n))`.
    pub fn cross_kernel(&self, x: &[f64]) -> DVector<f64> {
        let kernel = self.kernel();
        DVector::from_iterator(
            self.dataset.len(),
            self.dataset.points().iter().map(|p| kernel.k(x, p)),
        )
    }

    /// `(K + σ²I)⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `L⁻¹ v`; `|L⁻¹ k|²` is the quadratic form `kᵀ(K + σ²I)⁻¹k`.
    pub(crate) fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        let kx = self.cross_kernel(x);
        let mean = kx.dot(&self.alpha);
        let w = self.whiten(&kx);
        let raw = self.kernel().s2() - w.norm_squared();
        Prediction {
            mean,
            variance: raw.max(0.0),
            clamped: raw < 0.0,
            out_of_domain: x.iter().any(|v| !(0.0..=1.0).contains(v)),
        }
    }

    /// Posterior covariance `k_n(x, x2)`.
    pub fn posterior_cross_cov(&self, x: &[f64], x2: &[f64]) -> f64 {
        let w1 = self.whiten(&self.cross_kernel(x));
        let w2 = self.whiten(&self.cross_kernel(x2));
        self.kernel().k(x, x2) - w1.dot(&w2)
    }

    /// `log N(Y | 0, K + σ²I)` from the stored factorization.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.dataset.len() as f64;
        let log_det_half: f64 = self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * self.dataset.y().dot(&self.alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln()
    }
}

/// Log density of the observed outputs under the GP prior with hyperparameters `theta`.
pub fn log_marginal_likelihood(dataset: &Arc<Dataset>, theta: &HyperSample) -> Result<f64> {
    Ok(condition(Arc::clone(dataset), theta.clone())?.log_marginal_likelihood())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Arc<Dataset> {
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Arc::new(Dataset::unscaled(points, y).unwrap())
    }

    fn random_theta(rng: &mut ChaCha8Rng, d: usize) -> HyperSample {
        let ls = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
        HyperSample::new(KernelParams::new(rng.random_range(0.5..2.0), ls).unwrap(), 1e-4).unwrap()
    }

    /// Dense explicit-inverse version of the posterior covariance.
    fn dense_cross_cov(state: &GpState, x: &[f64], x2: &[f64]) -> f64 {
        let ds = state.dataset();
        let mut cov = kernel_matrix(ds.points(), state.kernel()).unwrap();
        for i in 0..ds.len() {
            cov[(i, i)] += state.noise_var();
        }
        let inv = cov.try_inverse().unwrap();
        let k1 = state.cross_kernel(x);
        let k2 = state.cross_kernel(x2);
        state.kernel().k(x, x2) - (k1.transpose() * inv * k2)[(0, 0)]
    }

    #[test]
    fn kernel_values() {
        let p = KernelParams::new(2.5, vec![0.3, 0.7]).unwrap();
        assert_eq!(kernel_eval(&[0.2, 0.4], &[0.2, 0.4], &p).unwrap(), 2.5);
        let p = KernelParams::new(1.0, vec![1.0]).unwrap();
        assert_abs_diff_eq!(kernel_eval(&[0.0], &[1.0], &p).unwrap(), 0.606_530_659_7, epsilon = 1e-9);
        let p = KernelParams::isotropic(1.0, 1.0, 2).unwrap();
        assert_abs_diff_eq!(
            kernel_eval(&[0.0, 0.0], &[1.0, 1.0], &p).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert!(matches!(
            kernel_eval(&[0.0], &[1.0, 1.0], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kernel_matrix_shapes() {
        let p = KernelParams::new(1.0, vec![1.0]).unwrap();
        let k = kernel_matrix(&[vec![0.3]], &p).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 1.0);
        let k = kernel_matrix(&[vec![0.3], vec![0.3]], &p).unwrap();
        assert!(k.iter().all(|v| *v == 1.0));
        let k = kernel_matrix(&[vec![0.0], vec![1.0]], &p).unwrap();
        assert_abs_diff_eq!(k[(0, 1)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_eq!(k[(0, 1)], k[(1, 0)]);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, vec![1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![]).is_err());
        assert!(KernelParams::new(1.0, vec![0.5, -0.1]).is_err());
        assert!(HyperSample::new(KernelParams::new(1.0, vec![1.0]).unwrap(), -1.0).is_err());
        assert!(Dataset::unscaled(vec![vec![1.2]], vec![0.0]).is_err());
        assert!(Dataset::unscaled(vec![], vec![]).is_err());
    }

    #[test]
    fn single_point_solve() {
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.5]], vec![2.0]).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.0, vec![0.2]).unwrap(), 1e-6).unwrap();
        let st = condition(ds, theta).unwrap();
        assert_abs_diff_eq!(st.alpha()[0], 2.0 / (1.0 + 1e-6), epsilon = 1e-15);
        assert_eq!(st.jitter_used(), 0.0);
    }

    #[test]
    fn duplicate_rows_take_jitter_path() {
        let ds = Arc::new(
            Dataset::unscaled(vec![vec![0.4], vec![0.4], vec![0.9]], vec![1.0, 1.0, 0.0]).unwrap(),
        );
        let theta = HyperSample::new(KernelParams::new(1.0, vec![0.3]).unwrap(), 0.0).unwrap();
        let st = condition(ds, theta).unwrap();
        assert!(st.jitter_used() > 0.0);
        assert!(st.jitter_used() <= 1e-4);
    }

    #[test]
    fn rank_one_covariance_is_rescued() {
        // Four identical inputs with zero noise: K = s²·11ᵀ is exactly singular.
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.5]; 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.0, vec![1.0]).unwrap(), 0.0).unwrap();
        let st = condition(ds, theta).unwrap();
        assert!(st.jitter_used() > 0.0);
        assert!(st.alpha().iter().all(|a| a.is_finite()));
    }

    #[test]
    fn reconstruction_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [5, 20, 60, 200] {
            let ds = random_dataset(&mut rng, n, 3);
            let theta = random_theta(&mut rng, 3);
            let st = condition(ds.clone(), theta.clone()).unwrap();
            let l = st.chol_factor();
            let mut target = kernel_matrix(ds.points(), &theta.kernel).unwrap();
            for i in 0..n {
                target[(i, i)] += theta.noise_var + st.jitter_used();
            }
            let err = (&l * l.transpose() - target).abs().max();
            assert!(err < 1e-10 * theta.kernel.s2(), "n={n}: {err}");
        }
    }

    #[test]
    fn interpolates_at_observations() {
        let ds = Arc::new(
            Dataset::from_raw(vec![vec![0.1], vec![0.5], vec![0.8]], &[3.0, -1.0, 2.0]).unwrap(),
        );
        let theta = HyperSample::new(KernelParams::new(1.0, vec![0.2]).unwrap(), 1e-6).unwrap();
        let st = condition(ds.clone(), theta).unwrap();
        for (p, y) in ds.points().iter().zip(ds.y().iter()) {
            let pred = st.predict(p);
            assert!((pred.mean - y).abs() <= 1e-3);
            assert!(pred.variance <= 2e-6);
        }
    }

    #[test]
    fn recovers_prior_far_from_data() {
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.0]], vec![1.5]).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.7, vec![0.01]).unwrap(), 1e-6).unwrap();
        let st = condition(ds, theta).unwrap();
        let pred = st.predict(&[1.0]);
        assert!(pred.mean.abs() < 1e-12);
        assert_abs_diff_eq!(pred.variance, 1.7, epsilon = 1e-12);
        assert_abs_diff_eq!(
            st.posterior_cross_cov(&[0.9], &[1.0]),
            st.kernel().k(&[0.9], &[1.0]),
            epsilon = 1e-12
        );
        assert!(st.predict(&[1.5]).out_of_domain);
    }

    #[test]
    fn dense_inverse_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..=30);
            let d = rng.random_range(1..=5);
            let ds = random_dataset(&mut rng, n, d);
            let theta = random_theta(&mut rng, d);
            let st = condition(ds, theta).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let x2: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let s2 = st.kernel().s2();
            let oracle = dense_cross_cov(&st, &x, &x2);
            let got = st.posterior_cross_cov(&x, &x2);
            assert!((got - oracle).abs() <= 1e-9 * s2, "{got} vs {oracle}");
            let oracle_var = dense_cross_cov(&st, &x, &x);
            let pred = st.predict(&x);
            assert!((pred.variance - oracle_var.max(0.0)).abs() <= 1e-9 * s2);
            assert_eq!(pred.variance, st.posterior_cross_cov(&x, &x).max(0.0));
        }
    }

    #[test]
    fn log_likelihood_closed_forms() {
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.3]], vec![0.0]).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.0, vec![0.5]).unwrap(), 1e-6).unwrap();
        let ll = log_marginal_likelihood(&ds, &theta).unwrap();
        assert_abs_diff_eq!(ll, -0.5 * (2.0 * PI * (1.0 + 1e-6)).ln(), epsilon = 1e-12);

        // 2x2 against an explicit inverse and determinant.
        let ds = Arc::new(Dataset::unscaled(vec![vec![0.1], vec![0.6]], vec![0.7, -0.4]).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.3, vec![0.4]).unwrap(), 1e-3).unwrap();
        let mut c = kernel_matrix(ds.points(), &theta.kernel).unwrap();
        c[(0, 0)] += 1e-3;
        c[(1, 1)] += 1e-3;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        let inv = c.try_inverse().unwrap();
        let y = ds.y();
        let quad = (y.transpose() * inv * y)[(0, 0)];
        let oracle = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        assert_abs_diff_eq!(log_marginal_likelihood(&ds, &theta).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_scaling_identity() {
        let pts = vec![vec![0.1], vec![0.45], vec![0.9]];
        let y = vec![0.3, -1.1, 0.8];
        let ds = Arc::new(Dataset::unscaled(pts.clone(), y.clone()).unwrap());
        let ds10 = Arc::new(Dataset::unscaled(pts, y.iter().map(|v| v * 10.0).collect()).unwrap());
        let theta = HyperSample::new(KernelParams::new(1.0, vec![0.3]).unwrap(), 0.0).unwrap();
        let theta100 = HyperSample::new(KernelParams::new(100.0, vec![0.3]).unwrap(), 0.0).unwrap();
        let a = log_marginal_likelihood(&ds, &theta).unwrap();
        let b = log_marginal_likelihood(&ds10, &theta100).unwrap();
        assert_abs_diff_eq!(b - a, -3.0 * 10f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::fit(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(s.mean, 2.0);
        assert_abs_diff_eq!(s.to_raw(s.to_std(7.5)), 7.5, epsilon = 1e-12);
        assert_eq!(Standardizer::fit(&[5.0, 5.0]).scale, 1.0);
    }
}
