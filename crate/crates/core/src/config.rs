//! Run configuration files.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bench::{builtin, ExternalCommand, DEFAULT_TIMEOUT};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::problem::{Domain, Problem, ReferenceQoi};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Builtin {
        name: String,
        /// Use `[−2,6]³` for `f3` instead of the unit cube.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        wide_domain: bool,
    },
    External {
        name: String,
        command: Vec<String>,
        domain: Vec<(f64, f64)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference_qoi: Option<f64>,
    },
}

impl ProblemSpec {
    pub fn builtin(name: &str) -> Self {
        Self::Builtin { name: name.to_string(), wide_domain: false }
    }

    pub fn build(&self) -> Result<Problem> {
        match self {
            Self::Builtin { name, wide_domain } => builtin(name, *wide_domain),
            Self::External { name, command, domain, timeout_s, reference_qoi } => {
                if command.is_empty() {
                    return Err(Error::Config("external command is empty".into()));
                }
                let timeout = match timeout_s {
                    Some(t) if *t > 0.0 && t.is_finite() => Duration::from_secs_f64(*t),
                    Some(t) => return Err(Error::Config(format!("invalid timeout {t}"))),
                    None => DEFAULT_TIMEOUT,
                };
                let adapter = ExternalCommand::new(command.clone()).with_timeout(timeout);
                let reference = reference_qoi
                    .map(|value| ReferenceQoi { value, provenance: "user supplied".into() });
                Ok(Problem::new(name.clone(), Arc::new(adapter), Domain::new(domain.clone())?)
                    .with_reference(reference))
            }
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Builtin { name, .. } | Self::External { name, .. } => name,
        }
    }

    /// Overrides the per-evaluation timeout of an external command.
    pub fn set_timeout(&mut self, seconds: f64) {
        if let Self::External { timeout_s, .. } = self {
            *timeout_s = Some(seconds);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn new(problem: ProblemSpec, engine: EngineConfig) -> Self {
        Self { problem, engine }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
