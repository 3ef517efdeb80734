//! Reference values of the expectation, computed by brute force.
//!
//! Up to three dimensions a tensor Gauss-Legendre rule is refined by doubling
//! the node count until two successive levels agree. Beyond that the oracle
//! averages a large Latin hypercube sample and reports its standard error.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::lhs;
use crate::error::{Error, Result};
use crate::problem::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMethod {
    /// Quadrature for `d ≤ 3`, sampling otherwise.
    #[default]
    Auto,
    Quadrature,
    Lhs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub method: OracleMethod,
    /// Relative agreement between successive quadrature levels.
    pub rel_tol: f64,
    /// Cap on the function evaluations of a single quadrature level.
    pub max_evaluations: usize,
    pub lhs_points: usize,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            method: OracleMethod::Auto,
            rel_tol: 1e-8,
            max_evaluations: 1 << 24,
            lhs_points: MIN_LHS_POINTS,
            seed: 0,
        }
    }
}

pub const MIN_LHS_POINTS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    /// Difference between the last two quadrature levels, or the standard
    /// error of the sample mean.
    pub error_estimate: f64,
    pub method: OracleMethod,
    pub evaluations: usize,
    /// The evaluation cap was hit before the tolerance was met.
    pub partial: bool,
}

/// Gauss-Legendre nodes and weights on `[0,1]`; the weights sum to one.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..m {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = m as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let w = 1.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = 0.5 * (1.0 - z);
        nodes[m - 1 - i] = 0.5 * (1.0 + z);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// Weighted mean written relative to the first value, so a constant
/// integrand comes back exactly.
fn centred_sum(values: &[f64], weights: impl Iterator<Item = f64>) -> f64 {
    let base = values[0];
    base + values.iter().zip(weights).map(|(v, w)| w * (v - base)).sum::<f64>()
}

fn tensor_level(problem: &Problem, m: usize) -> Result<f64> {
    let d = problem.dim();
    let (nodes, weights) = gauss_legendre(m);
    let total = m.pow(d as u32);
    let point = |mut idx: usize| {
        let mut u = vec![0.0; d];
        let mut w = 1.0;
        for uk in u.iter_mut() {
            let k = idx % m;
            idx /= m;
            *uk = nodes[k];
            w *= weights[k];
        }
        (u, w)
    };
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| problem.evaluate_unit(&point(i).0).map_err(Error::from))
        .collect::<Result<_>>()?;
    Ok(centred_sum(&values, (0..total).map(|i| point(i).1)))
}

fn quadrature(problem: &Problem, spec: &OracleSpec) -> Result<OracleResult> {
    let d = problem.dim() as u32;
    let mut m = 4;
    let mut prev = tensor_level(problem, m)?;
    let mut evaluations = m.pow(d);
    let mut last_diff = f64::NAN;
    loop {
        let next_m = 2 * m;
        let cost = next_m.checked_pow(d).unwrap_or(usize::MAX);
        if cost > spec.max_evaluations {
            log::warn!("quadrature stopped at {m} nodes per axis before reaching tolerance");
            return Ok(OracleResult {
                value: prev,
                error_estimate: last_diff,
                method: OracleMethod::Quadrature,
                evaluations,
                partial: true,
            });
        }
        let current = tensor_level(problem, next_m)?;
        evaluations += cost;
        let diff = (current - prev).abs();
        if diff <= spec.rel_tol * current.abs() || diff == 0.0 {
            return Ok(OracleResult {
                value: current,
                error_estimate: diff,
                method: OracleMethod::Quadrature,
                evaluations,
                partial: false,
            });
        }
        prev = current;
        last_diff = diff;
        m = next_m;
    }
}

fn sampling(problem: &Problem, spec: &OracleSpec) -> Result<OracleResult> {
    let n = spec.lhs_points.max(MIN_LHS_POINTS);
    let points = lhs(n, problem.dim(), spec.seed);
    let values: Vec<f64> = points
        .par_iter()
        .map(|u| problem.evaluate_unit(u).map_err(Error::from))
        .collect::<Result<_>>()?;
    let mean = centred_sum(&values, std::iter::repeat(1.0 / n as f64));
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(OracleResult {
        value: mean,
        error_estimate: (var / n as f64).sqrt(),
        method: OracleMethod::Lhs,
        evaluations: n,
        partial: false,
    })
}

/// Expectation of the problem's response under the uniform density on its
/// domain.
pub fn true_qoi_oracle(problem: &Problem, spec: &OracleSpec) -> Result<OracleResult> {
    match spec.method {
        OracleMethod::Quadrature => quadrature(problem, spec),
        OracleMethod::Lhs => sampling(problem, spec),
        OracleMethod::Auto if problem.dim() <= 3 => quadrature(problem, spec),
        OracleMethod::Auto => sampling(problem, spec),
    }
}
