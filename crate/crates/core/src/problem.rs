//! Black-box problems: an evaluator on a box domain with budget hints.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, EvalError, Result};

/// A function that can be queried at raw-domain points.
pub trait BlackBox: Send + Sync {
    fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError>;
}

impl<F> BlackBox for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self(x))
    }
}

/// Axis-aligned box; the input density is uniform on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Domain {
    bounds: Vec<(f64, f64)>,
}

impl Domain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Config("domain needs at least one dimension".into()));
        }
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
            return Err(Error::Config(format!("invalid bounds [{lo}, {hi}]")));
        }
        Ok(Self { bounds })
    }

    pub fn unit(dim: usize) -> Self {
        Self { bounds: vec![(0.0, 1.0); dim] }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn to_raw(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }
}

/// A published value of the expectation, kept for reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceQoi {
    pub value: f64,
    pub provenance: String,
}

#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub evaluator: Arc<dyn BlackBox>,
    pub domain: Domain,
    pub n_initial: usize,
    pub n_max: usize,
    pub reference_qoi: Option<ReferenceQoi>,
}

impl Problem {
    pub fn new(name: impl Into<String>, evaluator: Arc<dyn BlackBox>, domain: Domain) -> Self {
        let d = domain.dim();
        Self {
            name: name.into(),
            evaluator,
            domain,
            n_initial: (5 * d).max(2),
            n_max: (5 * d).max(2) + 20,
            reference_qoi: None,
        }
    }

    pub fn with_budget(mut self, n_initial: usize, n_max: usize) -> Self {
        self.n_initial = n_initial;
        self.n_max = n_max;
        self
    }

    pub fn with_reference(mut self, reference: Option<ReferenceQoi>) -> Self {
        self.reference_qoi = reference;
        self
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Evaluates at a unit-hypercube point, mapping it onto the raw domain.
    pub fn evaluate_unit(&self, u: &[f64]) -> Result<f64, EvalError> {
        let x = self.domain.to_raw(u);
        let y = self.evaluator.evaluate(&x)?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(EvalError::NonFinite { x, value: y })
        }
    }
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("n_initial", &self.n_initial)
            .field("n_max", &self.n_max)
            .field("reference_qoi", &self.reference_qoi)
            .finish_non_exhaustive()
    }
}
