//! File formats and end-to-end runs.

pub mod output;
pub mod table;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::estimate::{bootstrap, estimate_all, fit_model, BootstrapConfig, BootstrapResult, EstimandReport, FittedModel};
use crate::model::{Dataset, VersionStructure};
use output::{BootstrapSummary, EmSummary, ReportFormat, StructuredReport};
use table::PreprocessReport;

pub use output::{emit_report, read_report};
pub use table::{ingest, preprocess, Roles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub level: f64,
}

/// Settings of a `fit` or `bootstrap` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub versions: VersionStructure,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    pub floor: Option<f64>,
    pub bootstrap: Option<BootstrapSettings>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(versions: VersionStructure, out_dir: impl Into<PathBuf>) -> Self {
        let em = EmConfig::default();
        Self {
            versions,
            tol: em.tol,
            max_iter: em.max_iter,
            restarts: em.restarts,
            seed: em.seed,
            floor: None,
            bootstrap: None,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::InvalidParameter("need tol > 0, max_iter >= 1 and restarts >= 1".into()));
        }
        if let Some(f) = self.floor {
            if !(0.0..0.1).contains(&f) {
                return Err(Error::InvalidParameter(format!("floor must lie in [0, 0.1), got {f}")));
            }
        }
        if let Some(b) = &self.bootstrap {
            if b.replicates < 2 || !(b.level > 0.0 && b.level < 1.0) {
                return Err(Error::InvalidParameter(
                    "bootstrap needs at least 2 replicates and a level in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            restarts: self.restarts,
            seed: self.seed,
            ..EmConfig::default()
        }
    }
}

/// Outcome of [`run_fit`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub fitted: FittedModel,
    pub report: EstimandReport,
    pub bootstrap: Option<BootstrapResult>,
}

/// Fits the model, estimates every estimand and, if configured,
/// bootstraps intervals.
pub fn run_fit(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let em = cfg.em_config();
    let fitted = fit_model(data, &cfg.versions, &em)?;
    let mut report = estimate_all(data, &fitted, cfg.floor)?;
    let boot = match &cfg.bootstrap {
        Some(b) => {
            let result = bootstrap(
                data,
                &cfg.versions,
                &em,
                &BootstrapConfig {
                    replicates: b.replicates,
                    level: b.level,
                    seed: cfg.seed,
                    floor: cfg.floor,
                },
            )?;
            report.attach_intervals(&result);
            Some(result)
        }
        None => None,
    };
    Ok(RunOutput {
        fitted,
        report,
        bootstrap: boot,
    })
}

/// Assembles the structured report of a run.
pub fn structured_report(run: &RunOutput, preprocess: Option<&PreprocessReport>) -> StructuredReport {
    StructuredReport {
        estimates: run.report.clone(),
        treatment_labels: preprocess.map(|p| p.treatment_labels.clone()).unwrap_or_default(),
        preprocess: preprocess.cloned(),
        treatment_model: run.fitted.treatment_model.clone(),
        em: run
            .fitted
            .traces
            .iter()
            .enumerate()
            .map(|(t, trace)| EmSummary::from_trace(t, trace))
            .collect(),
        bootstrap: run.bootstrap.as_ref().map(|b| BootstrapSummary {
            replicates: b.replicates,
            level: b.level,
            redraws: b.redraws,
            failures: b.failures,
        }),
    }
}

/// Writes `estimates.csv`, `report.json`, `params.json` and, after a
/// bootstrap, `bootstrap.csv` into `dir`.
pub fn write_run(dir: &Path, run: &RunOutput, preprocess: Option<&PreprocessReport>) -> Result<()> {
    let report = structured_report(run, preprocess);
    emit_report(&report, ReportFormat::Tabular, &dir.join("estimates.csv"))?;
    emit_report(&report, ReportFormat::Structured, &dir.join("report.json"))?;
    let params = serde_json::to_string_pretty(&run.fitted.params).map_err(|e| Error::Internal(e.to_string()))?;
    output::write_text(&dir.join("params.json"), &(params + "\n"))?;
    if let Some(b) = &run.bootstrap {
        output::write_text(&dir.join("bootstrap.csv"), &output::bootstrap_csv(b)?)?;
    }
    Ok(())
}
