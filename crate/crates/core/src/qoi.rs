//! Beliefs about the expectation `Q = ∫ f(x) dx` over the unit hypercube and
//! the expected information gain of a hypothetical experiment.
//!
//! Conditioned on one hyperparameter sample the GP posterior makes `Q`
//! Gaussian, `N(μ₁, σ₁²)`. Adding a hypothetical observation `(x̃, ỹ)` moves
//! it to `N(μ₂, σ₂²)` through a rank-one update, and the KL divergence
//! between the two has a closed-form expectation over `ỹ`. Averaging that
//! over the hyperparameter ensemble gives the acquisition value.
//!
//! The input density is uniform on `[0,1]^d`, which is what makes the kernel
//! integrals `ε(x)` and `σ₀²` closed-form products of error functions.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use nalgebra::DVector;
use rayon::prelude::*;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::gp::{GpState, KernelParams};

/// `ε(x) = ∫ k(x, x') dx'` over the unit hypercube.
pub fn epsilon_at(x: &[f64], params: &KernelParams) -> f64 {
    let d = params.dim() as f64;
    let prod: f64 = x
        .iter()
        .zip(params.lengthscales())
        .map(|(xk, l)| {
            let c = SQRT_2 * l;
            // erf((1 − x)/√2ℓ) − erf(−x/√2ℓ), with erf's oddness applied
            l * (erf((1.0 - xk) / c) + erf(xk / c))
        })
        .product();
    params.s2() * FRAC_PI_2.powf(0.5 * d) * prod
}

/// `σ₀² = ∬ k(x, x') dx dx'`, the prior variance of the expectation.
pub fn sigma0_sq(params: &KernelParams) -> f64 {
    let prod: f64 = params
        .lengthscales()
        .iter()
        .map(|l| {
            // 2ℓ²√π·{−1/√π + e^{−1/2ℓ²}/√π + erf(1/√2ℓ)/(√2ℓ)}, with the first
            // two terms merged through expm1.
            2.0 * l * l * (-0.5 / (l * l)).exp_m1() + (2.0 * PI).sqrt() * l * erf(1.0 / (SQRT_2 * l))
        })
        .product();
    params.s2() * prod
}

/// Gaussian belief `N(μ₁, σ₁²)` about the expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoiBelief {
    pub mu1: f64,
    pub sigma1_sq: f64,
}

/// Moments of the belief after a hypothetical observation at `x̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypotheticalMoments {
    pub mu2: f64,
    pub sigma2_sq: f64,
    pub nu: f64,
    /// Predictive variance of the observation, `σ_n²(x̃) + σ²`.
    pub denom: f64,
    /// `σ₂²` hit the variance floor.
    pub clamped: bool,
}

/// Information gain at one point for one hyperparameter sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaGain {
    pub gain: f64,
    /// `σ₁²` is already at the floor; nothing more can be learned.
    pub saturated: bool,
    pub clamped: bool,
}

/// Hyperparameter-averaged expected information gain.
#[derive(Debug, Clone, PartialEq)]
pub struct EkldValue {
    pub mean_gain: f64,
    pub per_theta: Option<Vec<f64>>,
    pub clamped: usize,
    pub saturated: usize,
}

/// A [`GpState`] with the expectation-specific quantities cached: `ε_n`,
/// `(K + σ²I)⁻¹ ε_n`, `σ₀²` and the current belief. Per-candidate work is
/// then one kernel vector and a dot product on top of the GP prediction.
#[derive(Debug, Clone)]
pub struct QoiState {
    gp: GpState,
    kinv_eps: DVector<f64>,
    sigma0_sq: f64,
    belief: QoiBelief,
    floor: f64,
    sigma1_clamped: bool,
}

impl QoiState {
    pub fn new(gp: GpState) -> Self {
        let kernel = gp.kernel();
        let eps_n = DVector::from_iterator(
            gp.dataset().len(),
            gp.dataset().points().iter().map(|p| epsilon_at(p, kernel)),
        );
        let s0 = sigma0_sq(kernel);
        let w = gp.whiten(&eps_n);
        let kinv_eps = gp.solve(&eps_n);
        let mu1 = eps_n.dot(gp.alpha());
        let raw = s0 - w.norm_squared();
        let floor = variance_floor(s0);
        Self {
            belief: QoiBelief { mu1, sigma1_sq: raw.max(0.0) },
            sigma1_clamped: raw < 0.0,
            gp,
            kinv_eps,
            sigma0_sq: s0,
            floor,
        }
    }

    pub fn gp(&self) -> &GpState {
        &self.gp
    }

    pub fn belief(&self) -> QoiBelief {
        self.belief
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    /// `σ₁²` came out negative from cancellation and was clamped to zero.
    pub fn sigma1_clamped(&self) -> bool {
        self.sigma1_clamped
    }

    /// `ν(x̃) = ε(x̃) − ε_nᵀ(K + σ²I)⁻¹ k_n(x̃)`: posterior covariance of `Q` and `f(x̃)`.
    pub fn nu_at(&self, x: &[f64]) -> f64 {
        epsilon_at(x, self.gp.kernel()) - self.kinv_eps.dot(&self.gp.cross_kernel(x))
    }

    pub fn hypothetical_moments(&self, x: &[f64], y_hyp: f64) -> HypotheticalMoments {
        let pred = self.gp.predict(x);
        let denom = pred.variance + self.gp.noise_var();
        let nu = self.nu_at(x);
        let QoiBelief { mu1, sigma1_sq } = self.belief;
        if !(denom > 0.0) {
            return HypotheticalMoments { mu2: mu1, sigma2_sq: sigma1_sq, nu, denom, clamped: false };
        }
        let raw = sigma1_sq - nu * nu / denom;
        HypotheticalMoments {
            mu2: mu1 + nu * (y_hyp - pred.mean) / denom,
            sigma2_sq: raw.max(self.floor),
            nu,
            denom,
            clamped: raw < self.floor,
        }
    }

    /// Expected KL divergence from the current to the hypothetical belief,
    /// with `ỹ` integrated out against its predictive distribution.
    pub fn ekld_given_theta(&self, x: &[f64]) -> ThetaGain {
        let sigma1_sq = self.belief.sigma1_sq;
        if sigma1_sq <= self.floor {
            return ThetaGain { gain: 0.0, saturated: true, clamped: false };
        }
        // ỹ only enters μ₂, which this expectation never needs.
        let h = self.hypothetical_moments(x, 0.0);
        if !(h.denom > 0.0) {
            return ThetaGain { gain: 0.0, saturated: false, clamped: false };
        }
        let ratio = h.sigma2_sq / sigma1_sq;
        let gain = -0.5 * ratio.ln() + 0.5 * ratio - 0.5 + 0.5 * h.nu * h.nu / (sigma1_sq * h.denom);
        ThetaGain { gain: gain.max(0.0), saturated: false, clamped: h.clamped }
    }
}

impl AsRef<GpState> for QoiState {
    fn as_ref(&self) -> &GpState {
        &self.gp
    }
}

fn variance_floor(sigma0_sq: f64) -> f64 {
    (1e-12 * sigma0_sq).max(1e-300)
}

/// Current belief about the expectation under one hyperparameter sample.
pub fn qoi_prior_moments(state: &GpState) -> QoiBelief {
    QoiState::new(state.clone()).belief()
}

/// `KL(N(μ₂, σ₂²) ‖ N(μ₁, σ₁²))`.
pub fn kld_gaussian(mu1: f64, sigma1_sq: f64, mu2: f64, sigma2_sq: f64) -> Result<f64> {
    if !(sigma1_sq > 0.0 && sigma2_sq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variances must be positive, got {sigma1_sq} and {sigma2_sq}"
        )));
    }
    let dm = mu2 - mu1;
    let kl = 0.5 * (sigma1_sq / sigma2_sq).ln() + sigma2_sq / (2.0 * sigma1_sq)
        + dm * dm / (2.0 * sigma1_sq)
        - 0.5;
    Ok(kl.max(0.0))
}

/// Mean of [`QoiState::ekld_given_theta`] over the ensemble.
pub fn ekld(states: &[QoiState], x: &[f64], keep_per_theta: bool) -> EkldValue {
    let gains: Vec<ThetaGain> = states.par_iter().map(|s| s.ekld_given_theta(x)).collect();
    let mean_gain = if gains.is_empty() {
        0.0
    } else {
        gains.iter().map(|g| g.gain).sum::<f64>() / gains.len() as f64
    };
    EkldValue {
        mean_gain,
        per_theta: keep_per_theta.then(|| gains.iter().map(|g| g.gain).collect()),
        clamped: gains.iter().filter(|g| g.clamped).count(),
        saturated: gains.iter().filter(|g| g.saturated).count(),
    }
}
