//! Run traces (CSV) and summaries (JSON).

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::engine::{BeliefSnapshot, RunRecord, Termination};
use crate::error::Result;
use crate::problem::ReferenceQoi;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn trace_header(dim: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string()];
    h.extend((1..=dim).map(|k| format!("x_{k}")));
    h.extend(
        ["y_raw", "qoi_mean", "qoi_sd", "max_mean_ekld", "acceptance_rate", "elapsed_s"]
            .map(String::from),
    );
    h
}

/// One row per iteration, coordinates in the raw domain.
pub fn write_trace<W: Write>(record: &RunRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(record.dim()))?;
    for it in &record.iterations {
        let mut row = vec![it.iteration.to_string()];
        row.extend(it.x_raw.iter().map(|v| v.to_string()));
        row.extend(
            [
                it.y_raw,
                it.qoi_mean,
                it.qoi_sd(),
                it.max_mean_ekld,
                it.diagnostics.acceptance_rate,
                it.elapsed_s,
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub acquisition: String,
    pub master_seed: u64,
    pub termination: Termination,
    pub n_observations: usize,
    pub iterations: usize,
    pub initial: Option<BeliefSnapshot>,
    pub final_qoi_mean: Option<f64>,
    pub final_qoi_sd: Option<f64>,
    pub reference_qoi: Option<ReferenceQoi>,
    pub record: RunRecord,
}

impl RunSummary {
    pub fn new(record: &RunRecord) -> Self {
        let fin = record.final_belief();
        Self {
            problem: record.problem.name.clone(),
            acquisition: record.config.acquisition.to_string(),
            master_seed: record.config.master_seed,
            termination: record.termination.clone(),
            n_observations: record.final_design.len(),
            iterations: record.iterations.len(),
            initial: record.initial.clone(),
            final_qoi_mean: fin.map(|b| b.0),
            final_qoi_sd: fin.map(|b| b.1.sqrt()),
            reference_qoi: record.problem.reference_qoi.clone(),
            record: record.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
}

/// Writes the trace, the summary and an echo of `config` into `dir`.
///
/// The echo carries the resolved budget and seed, so feeding it back
/// reproduces the run.
pub fn write_outputs(record: &RunRecord, config: &RunConfig, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir)?;
    let out = RunOutput {
        trace: dir.join(TRACE_FILE),
        summary: dir.join(SUMMARY_FILE),
        config: dir.join(CONFIG_FILE),
    };
    write_trace(record, File::create(&out.trace)?)?;
    fs::write(&out.summary, serde_json::to_string_pretty(&RunSummary::new(record))?)?;
    let echo = RunConfig::new(config.problem.clone(), record.config.clone());
    fs::write(&out.config, echo.to_json()?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_order() {
        assert_eq!(
            trace_header(2).join(","),
            "iteration,x_1,x_2,y_raw,qoi_mean,qoi_sd,max_mean_ekld,acceptance_rate,elapsed_s"
        );
    }
}
