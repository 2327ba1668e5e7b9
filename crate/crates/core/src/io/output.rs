//! Report serialization: a flat CSV table of estimands and a JSON document
//! carrying the same content plus fit diagnostics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::EmTrace;
use crate::error::{Error, Result};
use crate::estimate::{
    BootstrapResult, ContrastEstimate, EstimandKey, EstimandReport, Interval, TreatmentEstimate,
    TreatmentModelSummary, VersionEstimate,
};
use crate::io::table::PreprocessReport;
use crate::sim::MonteCarloResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Tabular,
    Structured,
}

/// Per-treatment EM diagnostics kept in the structured report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSummary {
    pub treatment: usize,
    pub iterations: usize,
    pub converged: bool,
    pub restart: usize,
    pub collapsed_attempts: usize,
    pub final_loglik: f64,
    pub max_decrease: f64,
}

impl EmSummary {
    pub fn from_trace(treatment: usize, trace: &EmTrace) -> Self {
        Self {
            treatment,
            iterations: trace.iterations,
            converged: trace.converged,
            restart: trace.restart,
            collapsed_attempts: trace.collapsed_attempts,
            final_loglik: trace.final_loglik(),
            max_decrease: trace.max_decrease(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub level: f64,
    pub redraws: usize,
    pub failures: usize,
}

/// Everything a run writes to its structured report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub estimates: EstimandReport,
    #[serde(default)]
    pub treatment_labels: Vec<String>,
    #[serde(default)]
    pub preprocess: Option<PreprocessReport>,
    #[serde(default)]
    pub treatment_model: Option<TreatmentModelSummary>,
    #[serde(default)]
    pub em: Vec<EmSummary>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSummary>,
}

impl StructuredReport {
    pub fn bare(estimates: EstimandReport) -> Self {
        Self {
            estimates,
            treatment_labels: Vec::new(),
            preprocess: None,
            treatment_model: None,
            em: Vec::new(),
            bootstrap: None,
        }
    }
}

const HEADER: [&str; 8] = ["kind", "t", "v", "t2", "v2", "estimate", "ci_lo", "ci_hi"];

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_ci(ci: Option<Interval>) -> [String; 2] {
    match ci {
        Some(c) => [fmt_f64(c.lower), fmt_f64(c.upper)],
        None => [String::new(), String::new()],
    }
}

/// CSV text of the report: `#` metadata lines, a header, then psi, psi_t
/// and contrast rows.
pub fn tabular_string(report: &EstimandReport) -> Result<String> {
    let mut out = format!("# n_used={}\n", report.n_used);
    if let Some(f) = report.floor {
        out.push_str(&format!("# floor={}\n", fmt_f64(f)));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |row: [String; 8]| w.write_record(&row).map_err(|e| Error::Internal(e.to_string()));
    write(HEADER.map(String::from))?;
    for p in &report.psi {
        let [lo, hi] = fmt_ci(p.ci);
        write(["psi".into(), p.t.to_string(), p.v.to_string(), String::new(), String::new(), fmt_f64(p.estimate), lo, hi])?;
    }
    for p in &report.psi_t {
        let [lo, hi] = fmt_ci(p.ci);
        write(["psi_t".into(), p.t.to_string(), String::new(), String::new(), String::new(), fmt_f64(p.estimate), lo, hi])?;
    }
    for c in &report.contrasts {
        let [lo, hi] = fmt_ci(c.ci);
        write([
            "contrast".into(),
            c.from.0.to_string(),
            c.from.1.to_string(),
            c.to.0.to_string(),
            c.to.1.to_string(),
            fmt_f64(c.estimate),
            lo,
            hi,
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    out.push_str(&String::from_utf8(body).map_err(|e| Error::Internal(e.to_string()))?);
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(cell: &str, name: &str, line: usize) -> Result<T> {
    cell.parse().map_err(|_| Error::Parse {
        line,
        message: format!("field {name}: cannot parse {cell:?}"),
    })
}

fn parse_ci(lo: &str, hi: &str, line: usize) -> Result<Option<Interval>> {
    match (lo.is_empty(), hi.is_empty()) {
        (true, true) => Ok(None),
        (false, false) => Ok(Some(Interval {
            lower: parse_field(lo, "ci_lo", line)?,
            upper: parse_field(hi, "ci_hi", line)?,
        })),
        _ => Err(Error::Parse {
            line,
            message: "only one interval endpoint given".into(),
        }),
    }
}

/// Inverse of [`tabular_string`].
pub fn parse_tabular(text: &str) -> Result<EstimandReport> {
    let mut n_used = None;
    let mut floor = None;
    for (k, line) in text.lines().enumerate() {
        let Some(meta) = line.strip_prefix('#') else { continue };
        if let Some((key, value)) = meta.trim().split_once('=') {
            match key.trim() {
                "n_used" => n_used = Some(parse_field(value.trim(), "n_used", k + 1)?),
                "floor" => floor = Some(parse_field(value.trim(), "floor", k + 1)?),
                _ => {}
            }
        }
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse { line: 0, message: e.to_string() })?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Parse {
            line: 0,
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut report = EstimandReport {
        psi: Vec::new(),
        psi_t: Vec::new(),
        contrasts: Vec::new(),
        n_used: n_used.unwrap_or(0),
        floor,
    };
    for record in r.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let estimate = parse_field(&record[5], "estimate", line)?;
        let ci = parse_ci(&record[6], &record[7], line)?;
        match &record[0] {
            "psi" => report.psi.push(VersionEstimate {
                t: parse_field(&record[1], "t", line)?,
                v: parse_field(&record[2], "v", line)?,
                estimate,
                ci,
            }),
            "psi_t" => report.psi_t.push(TreatmentEstimate {
                t: parse_field(&record[1], "t", line)?,
                estimate,
                ci,
            }),
            "contrast" => report.contrasts.push(ContrastEstimate {
                from: (parse_field(&record[1], "t", line)?, parse_field(&record[2], "v", line)?),
                to: (parse_field(&record[3], "t2", line)?, parse_field(&record[4], "v2", line)?),
                estimate,
                ci,
            }),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown estimand kind {other:?}"),
                })
            }
        }
    }
    Ok(report)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn structured_string(report: &StructuredReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_structured(text: &str) -> Result<StructuredReport> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes the report in the chosen format. The tabular form keeps only the
/// estimands.
pub fn emit_report(report: &StructuredReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Tabular => tabular_string(&report.estimates)?,
        ReportFormat::Structured => structured_string(report)?,
    };
    write_file(path, &text)
}

/// Reads a report in either format, detected from the content.
pub fn read_report(path: &Path) -> Result<StructuredReport> {
    let text = read_file(path)?;
    let parsed = if text.trim_start().starts_with('{') {
        parse_structured(&text)
    } else {
        parse_tabular(&text).map(StructuredReport::bare)
    };
    parsed.map_err(|e| e.context(path.display().to_string()))
}

fn csv_to_string(rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

fn strings<const N: usize>(cells: [&str; N]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

/// Bias/SD table, one row per within-treatment contrast.
pub fn metrics_csv(result: &MonteCarloResult) -> Result<String> {
    let header = strings(["p", "snr", "n", "t", "v", "v2", "bias", "sd", "failures"]);
    let rows = result.metrics.iter().map(|m| {
        vec![
            m.p.to_string(),
            m.snr.to_string(),
            m.n.to_string(),
            m.t.to_string(),
            m.v.to_string(),
            m.v2.to_string(),
            fmt_f64(m.bias),
            fmt_f64(m.sd),
            m.failures.to_string(),
        ]
    });
    csv_to_string(std::iter::once(header).chain(rows))
}

/// One row per replicate and contrast, for plotting the error distribution.
pub fn replicates_csv(result: &MonteCarloResult) -> Result<String> {
    let header = strings(["replicate", "t", "v", "v2", "estimate", "truth", "error"]);
    let mut rows = vec![header];
    for r in &result.replicates {
        match &r.error {
            Some(e) => rows.push(vec![r.replicate.to_string(), String::new(), String::new(), String::new(), String::new(), String::new(), e.clone()]),
            None => rows.extend(r.contrasts.iter().map(|c| {
                vec![
                    r.replicate.to_string(),
                    c.t.to_string(),
                    c.v.to_string(),
                    c.v2.to_string(),
                    fmt_f64(c.estimate),
                    fmt_f64(c.truth),
                    String::new(),
                ]
            })),
        }
    }
    csv_to_string(rows)
}

fn key_cells(key: &EstimandKey) -> [String; 5] {
    let s = |x: usize| x.to_string();
    match *key {
        EstimandKey::Psi { t, v } => ["psi".into(), s(t), s(v), String::new(), String::new()],
        EstimandKey::PsiT { t } => ["psi_t".into(), s(t), String::new(), String::new(), String::new()],
        EstimandKey::Contrast { from, to } => ["contrast".into(), s(from.0), s(from.1), s(to.0), s(to.1)],
    }
}

/// Every bootstrap replicate value in long format.
pub fn bootstrap_csv(result: &BootstrapResult) -> Result<String> {
    let header = strings(["replicate", "kind", "t", "v", "t2", "v2", "value"]);
    let mut rows = vec![header];
    for (key, values) in result.keys.iter().zip(&result.values) {
        let cells = key_cells(key);
        for (b, value) in values.iter().enumerate() {
            let mut row = vec![b.to_string()];
            row.extend(cells.iter().cloned());
            row.push(fmt_f64(*value));
            rows.push(row);
        }
    }
    csv_to_string(rows)
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EstimandReport {
        EstimandReport {
            psi: vec![
                VersionEstimate {
                    t: 0,
                    v: 0,
                    estimate: 482.25,
                    ci: Some(Interval {
                        lower: 457.57,
                        upper: 511.973,
                    }),
                },
                VersionEstimate {
                    t: 0,
                    v: 1,
                    estimate: 0.1 + 0.2,
                    ci: None,
                },
            ],
            psi_t: vec![],
            contrasts: vec![],
            n_used: 7,
            floor: None,
        }
    }

    #[test]
    fn psi_only_table() {
        let text = tabular_string(&report()).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], "kind,t,v,t2,v2,estimate,ci_lo,ci_hi");
        assert!(rows[1..].iter().all(|r| r.starts_with("psi,")));
    }

    #[test]
    fn tabular_round_trip_is_exact() {
        let mut r = report();
        r.floor = Some(0.01);
        r.add_contrast((0, 0), (0, 1)).unwrap();
        r.psi_t.push(TreatmentEstimate {
            t: 0,
            estimate: -1.0 / 3.0,
            ci: None,
        });
        let back = parse_tabular(&tabular_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let psi = back.psi[0].clone();
        assert_eq!(psi.estimate, 482.25);
        assert_eq!(psi.ci.unwrap().lower, 457.57);
        assert_eq!(psi.ci.unwrap().upper, 511.973);
    }

    #[test]
    fn structured_round_trip_is_exact() {
        let s = StructuredReport::bare(report());
        assert_eq!(parse_structured(&structured_string(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn bad_tables() {
        assert!(parse_tabular("a,b\n1,2\n").is_err());
        let bad_kind = "kind,t,v,t2,v2,estimate,ci_lo,ci_hi\nfoo,0,0,,,1.0,,\n";
        assert!(matches!(parse_tabular(bad_kind).unwrap_err(), Error::Parse { line: 2, .. }));
    }
}
