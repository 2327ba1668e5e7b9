//! Delimited-text ingestion with declared column roles, and the
//! complete-case / rare-category / standardization / one-hot pipeline that
//! turns a raw table into a [`Dataset`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Column roles, read from a TOML file such as
///
/// ```toml
/// outcome = "score"
/// treatment = "class"
/// delimiter = ","
///
/// [covariates]
/// age = "numeric"
/// school = "categorical"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub delimiter: Option<char>,
    #[serde(default)]
    pub covariates: IndexMap<String, ColumnKind>,
}

impl Roles {
    pub fn from_toml(text: &str) -> Result<Self> {
        let roles: Roles = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("roles: {e}")))?;
        roles.validate()?;
        Ok(roles)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![self.outcome.as_str()];
        for name in std::iter::once(&self.treatment).chain(self.covariates.keys()) {
            if seen.contains(&name.as_str()) {
                return Err(Error::InvalidInput(format!("column {name:?} has more than one role")));
            }
            seen.push(name);
        }
        if let Some(d) = self.delimiter {
            if !d.is_ascii() {
                return Err(Error::InvalidInput(format!("delimiter {d:?} is not ASCII")));
            }
        }
        Ok(())
    }

    fn delimiter_byte(&self) -> u8 {
        self.delimiter.map_or(b',', |d| d as u8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl RawColumn {
    fn is_missing(&self, row: usize) -> bool {
        match self {
            RawColumn::Numeric(v) => v[row].is_none(),
            RawColumn::Categorical(v) => v[row].is_none(),
        }
    }
}

/// Parsed rows of the declared columns. Missing cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    /// Source line of every row.
    pub lines: Vec<usize>,
    pub outcome: Vec<Option<f64>>,
    pub treatment: Vec<Option<usize>>,
    /// Original treatment values; label `k` is `treatment_labels[k]`.
    pub treatment_labels: Vec<String>,
    pub covariates: IndexMap<String, RawColumn>,
    pub roles: Roles,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.lines.len()
    }
}

fn is_missing(cell: &str) -> bool {
    let cell = cell.trim();
    cell.is_empty() || cell == "NA"
}

fn parse_number(cell: &str, column: &str, line: usize) -> Result<Option<f64>> {
    if is_missing(cell) {
        return Ok(None);
    }
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Parse {
            line,
            message: format!("column {column:?}: {cell:?} is not a finite number"),
        }),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Reads delimiter-separated text with a header row.
///
/// Treatment values are mapped to labels `0..J` in order of first
/// appearance; fewer than two distinct values is an error.
pub fn ingest_reader<R: std::io::Read>(reader: R, roles: &Roles) -> Result<RawTable> {
    roles.validate()?;
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(roles.delimiter_byte())
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = csv.headers().map_err(csv_error)?.iter().map(|h| h.trim().to_string()).collect();
    let mut index = HashMap::new();
    for (j, name) in header.iter().enumerate() {
        if index.insert(name.as_str(), j).is_some() {
            return Err(Error::Parse {
                line: 1,
                message: format!("duplicate column {name:?}"),
            });
        }
    }
    let column = |name: &str| {
        index.get(name).copied().ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let outcome_col = column(&roles.outcome)?;
    let treatment_col = column(&roles.treatment)?;
    let covariate_cols = roles
        .covariates
        .keys()
        .map(|name| column(name))
        .collect::<Result<Vec<_>>>()?;

    let mut lines = Vec::new();
    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut treatment_labels: Vec<String> = Vec::new();
    let mut covariates: IndexMap<String, RawColumn> = roles
        .covariates
        .iter()
        .map(|(name, kind)| {
            let col = match kind {
                ColumnKind::Numeric => RawColumn::Numeric(Vec::new()),
                ColumnKind::Categorical => RawColumn::Categorical(Vec::new()),
            };
            (name.clone(), col)
        })
        .collect();

    for record in csv.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        lines.push(line);
        outcome.push(parse_number(&record[outcome_col], &roles.outcome, line)?);
        let t = &record[treatment_col];
        treatment.push(if is_missing(t) {
            None
        } else {
            let t = t.trim();
            Some(match treatment_labels.iter().position(|l| l == t) {
                Some(k) => k,
                None => {
                    treatment_labels.push(t.to_string());
                    treatment_labels.len() - 1
                }
            })
        });
        for ((name, col), &j) in covariates.iter_mut().zip(&covariate_cols) {
            let cell = &record[j];
            match col {
                RawColumn::Numeric(v) => v.push(parse_number(cell, name, line)?),
                RawColumn::Categorical(v) => v.push((!is_missing(cell)).then(|| cell.trim().to_string())),
            }
        }
    }
    if treatment_labels.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need ≥ 2 treatments, column {:?} has {}",
            roles.treatment,
            treatment_labels.len()
        )));
    }
    Ok(RawTable {
        header,
        lines,
        outcome,
        treatment,
        treatment_labels,
        covariates,
        roles: roles.clone(),
    })
}

pub fn ingest(path: &Path, roles: &Roles) -> Result<RawTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), roles).map_err(|e| e.context(path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareCategory {
    pub column: String,
    pub category: String,
    /// Share of the category within each treatment, by label.
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub column: String,
    pub reference: String,
    /// Non-reference levels, one indicator column each.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub n_input: usize,
    pub n_dropped_missing: usize,
    pub n_dropped_rare: usize,
    pub n_used: usize,
    pub rare_threshold: f64,
    pub rare_categories: Vec<RareCategory>,
    pub standardization: Vec<Standardization>,
    pub encodings: Vec<Encoding>,
    pub design_columns: Vec<String>,
    pub treatment_labels: Vec<String>,
    /// Source line of every retained row, in dataset order.
    pub source_lines: Vec<usize>,
}

/// Complete cases, rare-category removal, standardization and one-hot
/// encoding, in that order.
///
/// A category is rare when its share within some treatment (among complete
/// cases) is at most `rare_threshold`; a category absent from a treatment
/// has share 0 there. Shares are computed once, before any rare rows are
/// removed. Numeric columns are scaled with the population SD of the
/// retained rows. The most frequent level of each categorical column is the
/// reference (ties go to the lexicographically smallest).
pub fn preprocess(table: &RawTable, rare_threshold: f64) -> Result<(Dataset, PreprocessReport)> {
    if !(0.0..1.0).contains(&rare_threshold) {
        return Err(Error::InvalidParameter(format!(
            "rare threshold must lie in [0, 1), got {rare_threshold}"
        )));
    }
    let n_input = table.n_rows();
    let n_labels = table.treatment_labels.len();
    let complete: Vec<usize> = (0..n_input)
        .filter(|&i| {
            table.outcome[i].is_some()
                && table.treatment[i].is_some()
                && table.covariates.values().all(|c| !c.is_missing(i))
        })
        .collect();

    let mut arm_size = vec![0usize; n_labels];
    for &i in &complete {
        arm_size[table.treatment[i].unwrap()] += 1;
    }
    let mut rare_categories = Vec::new();
    let mut rare_rows = vec![false; n_input];
    for (name, col) in &table.covariates {
        let RawColumn::Categorical(values) = col else { continue };
        let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in &complete {
            let cat = values[i].as_deref().unwrap();
            counts.entry(cat).or_insert_with(|| vec![0; n_labels])[table.treatment[i].unwrap()] += 1;
        }
        for (cat, per_arm) in counts {
            let proportions: Vec<f64> = per_arm
                .iter()
                .zip(&arm_size)
                .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect();
            if proportions.iter().any(|&p| p <= rare_threshold) {
                for &i in &complete {
                    if values[i].as_deref() == Some(cat) {
                        rare_rows[i] = true;
                    }
                }
                rare_categories.push(RareCategory {
                    column: name.clone(),
                    category: cat.to_string(),
                    proportions,
                });
            }
        }
    }
    let kept: Vec<usize> = complete.iter().copied().filter(|&i| !rare_rows[i]).collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput("no rows left after preprocessing".into()));
    }
    let m = kept.len() as f64;

    let mut standardization = Vec::new();
    let mut encodings = Vec::new();
    let mut design_columns = Vec::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    for (name, col) in &table.covariates {
        match col {
            RawColumn::Numeric(values) => {
                let xs: Vec<f64> = kept.iter().map(|&i| values[i].unwrap()).collect();
                let mean = xs.iter().sum::<f64>() / m;
                let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
                if !(sd > 1e-12 * mean.abs().max(1.0)) {
                    return Err(Error::InvalidInput(format!("column {name:?} has zero variance")));
                }
                blocks.push(xs.iter().map(|x| (x - mean) / sd).collect());
                design_columns.push(name.clone());
                standardization.push(Standardization {
                    column: name.clone(),
                    mean,
                    sd,
                });
            }
            RawColumn::Categorical(values) => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for &i in &kept {
                    *counts.entry(values[i].as_deref().unwrap()).or_default() += 1;
                }
                // BTreeMap iterates in lexicographic order, so the first maximum wins ties
                let reference = counts
                    .iter()
                    .fold(None::<(&str, usize)>, |best, (&c, &k)| match best {
                        Some((_, bk)) if bk >= k => best,
                        _ => Some((c, k)),
                    })
                    .map(|(c, _)| c.to_string())
                    .unwrap();
                let levels: Vec<String> = counts.keys().filter(|&&c| c != reference).map(|c| c.to_string()).collect();
                for level in &levels {
                    blocks.push(
                        kept.iter()
                            .map(|&i| f64::from(u8::from(values[i].as_deref() == Some(level.as_str()))))
                            .collect(),
                    );
                    design_columns.push(format!("{name}={level}"));
                }
                encodings.push(Encoding {
                    column: name.clone(),
                    reference,
                    levels,
                });
            }
        }
    }

    let p = blocks.len();
    let mut covariates = Vec::with_capacity(kept.len() * p);
    for r in 0..kept.len() {
        covariates.extend(blocks.iter().map(|b| b[r]));
    }
    let treatments: Vec<usize> = kept.iter().map(|&i| table.treatment[i].unwrap()).collect();
    for (k, label) in table.treatment_labels.iter().enumerate() {
        if !treatments.contains(&k) {
            return Err(Error::InvalidInput(format!(
                "treatment {label:?} has no rows left after preprocessing"
            )));
        }
    }
    let outcomes = kept.iter().map(|&i| table.outcome[i].unwrap()).collect();
    let data = Dataset::new(outcomes, treatments, covariates, p, n_labels)?;
    let report = PreprocessReport {
        n_input,
        n_dropped_missing: n_input - complete.len(),
        n_dropped_rare: complete.len() - kept.len(),
        n_used: kept.len(),
        rare_threshold,
        rare_categories,
        standardization,
        encodings,
        design_columns,
        treatment_labels: table.treatment_labels.clone(),
        source_lines: kept.iter().map(|&i| table.lines[i]).collect(),
    };
    Ok((data, report))
}
