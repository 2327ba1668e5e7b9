//! Full model fit, plug-in Horvitz-Thompson estimands, contrasts and the
//! nonparametric bootstrap.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{e_step, em_fit, EmConfig, EmTrace, Responsibilities, TreatmentSlice};
use crate::error::{Error, Result};
use crate::glm::{fit_multinomial_logit, one_hot, LogitOptions, SoftLabelProblem};
use crate::model::{expert_logdensity, gating_probs, linear_predictor, log_sum_exp, Dataset, ModelParams, VersionStructure};
use crate::seed::{derive_seed, rng_for};

/// Denominators below this are positivity violations when no floor is set.
const MIN_DENOMINATOR: f64 = 1e-300;

/// Summary of the treatment-assignment fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModelSummary {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fitted parameters plus the per-treatment responsibilities they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub params: ModelParams,
    /// Unit indices of each treatment arm, in dataset order.
    pub slices: Vec<Vec<usize>>,
    pub responsibilities: Vec<Responsibilities>,
    /// One trace per treatment; empty when parameters were supplied directly.
    pub traces: Vec<EmTrace>,
    pub treatment_model: Option<TreatmentModelSummary>,
}

impl FittedModel {
    /// Wraps known parameters, computing responsibilities by an E-step.
    pub fn from_params(data: &Dataset, params: ModelParams) -> Result<Self> {
        params.validate(data.p())?;
        if params.n_treatments() != data.n_treatments() {
            return Err(Error::InvalidParameter(format!(
                "parameters for {} treatments, data has {}",
                params.n_treatments(),
                data.n_treatments()
            )));
        }
        let mut slices = Vec::with_capacity(params.n_treatments());
        let mut responsibilities = Vec::with_capacity(params.n_treatments());
        for (t, tp) in params.treatments.iter().enumerate() {
            let slice = TreatmentSlice::new(data, t)?;
            responsibilities.push(e_step(&slice, tp)?);
            slices.push(slice.indices);
        }
        Ok(Self {
            params,
            slices,
            responsibilities,
            traces: Vec::new(),
            treatment_model: None,
        })
    }
}

/// Fits the treatment-assignment model on all units.
pub fn fit_treatment_model(data: &Dataset, options: &LogitOptions) -> Result<(Vec<Vec<f64>>, TreatmentModelSummary)> {
    let d = data.p() + 1;
    let mut design = Vec::with_capacity(data.n() * d);
    for i in 0..data.n() {
        design.push(1.0);
        design.extend_from_slice(data.x(i));
    }
    let weights = one_hot(data.treatments(), data.n_treatments())?;
    let problem = SoftLabelProblem::new(&design, d, &weights, data.n_treatments())?;
    let fit = fit_multinomial_logit(&problem, options)?;
    if !fit.converged {
        warn!("treatment model did not converge in {} iterations", fit.iterations);
    }
    Ok((
        fit.coefficients,
        TreatmentModelSummary {
            loglik: fit.loglik,
            iterations: fit.iterations,
            converged: fit.converged,
        },
    ))
}

/// Treatment model, per-treatment EM and canonicalization.
///
/// Treatment `t` runs EM with a seed derived from `(em.seed, t)`.
pub fn fit_model(data: &Dataset, versions: &VersionStructure, em: &EmConfig) -> Result<FittedModel> {
    if versions.n_treatments() != data.n_treatments() {
        return Err(Error::InvalidParameter(format!(
            "version structure lists {} treatments, data has {}",
            versions.n_treatments(),
            data.n_treatments()
        )));
    }
    let (zeta, summary) = fit_treatment_model(data, &LogitOptions::default())
        .map_err(|e| e.context("treatment model"))?;
    let fits = (0..data.n_treatments())
        .into_par_iter()
        .map(|t| {
            let slice = TreatmentSlice::new(data, t)?;
            let cfg = EmConfig {
                seed: derive_seed(em.seed, &[t as u64]),
                ..em.clone()
            };
            let fit = em_fit(&slice, versions.versions(t), &cfg)
                .map_err(|e| e.context(format!("treatment {t}")))?;
            Ok((slice.indices, fit))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut treatments = Vec::with_capacity(fits.len());
    let mut slices = Vec::with_capacity(fits.len());
    let mut responsibilities = Vec::with_capacity(fits.len());
    let mut traces = Vec::with_capacity(fits.len());
    for (indices, fit) in fits {
        treatments.push(fit.params);
        slices.push(indices);
        responsibilities.push(fit.responsibilities);
        traces.push(fit.trace);
    }
    Ok(FittedModel {
        params: ModelParams { zeta, treatments },
        slices,
        responsibilities,
        traces,
        treatment_model: Some(summary),
    })
}

fn check_floor(floor: Option<f64>) -> Result<()> {
    match floor {
        Some(f) if !(0.0..0.1).contains(&f) => Err(Error::InvalidParameter(format!(
            "propensity floor must lie in [0, 0.1), got {f}"
        ))),
        _ => Ok(()),
    }
}

fn check_pair(fits: &FittedModel, t: usize, v: usize) -> Result<()> {
    let tp = fits
        .params
        .treatments
        .get(t)
        .ok_or_else(|| Error::UnknownEstimand(format!("treatment {t}")))?;
    if v >= tp.n_versions() {
        return Err(Error::UnknownEstimand(format!("version {v} of treatment {t}")));
    }
    Ok(())
}

/// Plug-in Horvitz-Thompson estimate of `E[Y^(t,v)]`:
/// `(1/n) sum_{i: T_i = t} r_{t,v,i} Y_i / (e_t(X_i) pi_{t,v}(X_i))`.
///
/// Without a floor the weight `r / (e pi)` is evaluated in log space as
/// `f_v / (e sum_u pi_u f_u)`, so a gating probability that underflows
/// together with its responsibility does not turn into `0 / 0`. The
/// positivity check then applies to the effective denominator `e pi / r`.
pub fn ht_psi(data: &Dataset, fits: &FittedModel, t: usize, v: usize, floor: Option<f64>) -> Result<f64> {
    check_floor(floor)?;
    check_pair(fits, t, v)?;
    let tp = &fits.params.treatments[t];
    let k = tp.n_versions();
    let mut log_joint = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut total = 0.0;
    for &i in &fits.slices[t] {
        let x = data.x(i);
        let y = data.outcomes()[i];
        let log_e = log_softmax_at(&fits.params.zeta, x, t);
        for (z, eta) in logits.iter_mut().zip(&tp.gating) {
            *z = linear_predictor(eta, x);
        }
        let lse_gate = log_sum_exp(&logits);
        for u in 0..k {
            let expert = &tp.experts[u];
            log_joint[u] = logits[u] - lse_gate + expert_logdensity(y, x, &expert.beta, expert.sigma)?;
        }
        let log_p = log_sum_exp(&log_joint);
        let log_pi = logits[v] - lse_gate;
        match floor {
            Some(f) => {
                let r = (log_joint[v] - log_p).exp();
                total += r * y / (log_e + log_pi).exp().max(f);
            }
            None => {
                let log_denominator = log_e + log_p - (log_joint[v] - log_pi);
                if !(log_denominator >= MIN_DENOMINATOR.ln()) {
                    return Err(Error::PositivityViolation {
                        unit: i,
                        t,
                        v,
                        denominator: log_denominator.exp(),
                    });
                }
                total += y * (-log_denominator).exp();
            }
        }
    }
    Ok(total / data.n() as f64)
}

fn log_softmax_at(coefs: &[Vec<f64>], x: &[f64], k: usize) -> f64 {
    let logits: Vec<f64> = coefs.iter().map(|c| linear_predictor(c, x)).collect();
    logits[k] - log_sum_exp(&logits)
}

/// Sample-averaged gating probabilities of treatment `t` over all units.
pub fn version_shares(data: &Dataset, params: &ModelParams, t: usize) -> Result<Vec<f64>> {
    let gating = &params
        .treatments
        .get(t)
        .ok_or_else(|| Error::UnknownEstimand(format!("treatment {t}")))?
        .gating;
    let mut shares = vec![0.0; gating.len()];
    for i in 0..data.n() {
        for (s, p) in shares.iter_mut().zip(gating_probs(data.x(i), gating)?) {
            *s += p;
        }
    }
    shares.iter_mut().for_each(|s| *s /= data.n() as f64);
    Ok(shares)
}

/// Treatment-level mean `sum_v wbar_{t,v} psi_{t,v}` with `wbar` the
/// sample-averaged version shares.
pub fn psi_treatment(data: &Dataset, fits: &FittedModel, t: usize, floor: Option<f64>) -> Result<f64> {
    let shares = version_shares(data, &fits.params, t)?;
    let psi = (0..shares.len())
        .map(|v| ht_psi(data, fits, t, v, floor))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_versions(&shares, &psi))
}

fn combine_versions(shares: &[f64], psi: &[f64]) -> f64 {
    shares.iter().zip(psi).map(|(w, p)| w * p).sum()
}

/// A `(treatment, version)` pair.
pub type Pair = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionEstimate {
    pub t: usize,
    pub v: usize,
    pub estimate: f64,
    pub ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEstimate {
    pub t: usize,
    pub estimate: f64,
    pub ci: Option<Interval>,
}

/// `psi[to] - psi[from]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub from: Pair,
    pub to: Pair,
    pub estimate: f64,
    pub ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub psi: Vec<VersionEstimate>,
    pub psi_t: Vec<TreatmentEstimate>,
    pub contrasts: Vec<ContrastEstimate>,
    pub n_used: usize,
    /// Propensity floor in effect, if any.
    pub floor: Option<f64>,
}

impl EstimandReport {
    pub fn psi(&self, pair: Pair) -> Option<f64> {
        self.psi
            .iter()
            .find(|p| (p.t, p.v) == pair)
            .map(|p| p.estimate)
    }

    pub fn psi_treatment(&self, t: usize) -> Option<f64> {
        self.psi_t.iter().find(|p| p.t == t).map(|p| p.estimate)
    }

    /// Adds the contrast `from -> to` computed from the stored estimates.
    pub fn add_contrast(&mut self, from: Pair, to: Pair) -> Result<f64> {
        let estimate = contrast(self, from, to)?;
        self.contrasts.push(ContrastEstimate {
            from,
            to,
            estimate,
            ci: None,
        });
        Ok(estimate)
    }

    /// Every estimand in a fixed order: psi, psi_t, then contrasts.
    pub fn keyed_estimates(&self) -> Vec<(EstimandKey, f64)> {
        let psi = self.psi.iter().map(|p| (EstimandKey::Psi { t: p.t, v: p.v }, p.estimate));
        let psi_t = self.psi_t.iter().map(|p| (EstimandKey::PsiT { t: p.t }, p.estimate));
        let contrasts = self
            .contrasts
            .iter()
            .map(|c| (EstimandKey::Contrast { from: c.from, to: c.to }, c.estimate));
        psi.chain(psi_t).chain(contrasts).collect()
    }

    /// Attaches bootstrap intervals to matching estimands.
    pub fn attach_intervals(&mut self, boot: &BootstrapResult) {
        for (key, ci) in boot.keys.iter().zip(&boot.ci) {
            match *key {
                EstimandKey::Psi { t, v } => {
                    if let Some(p) = self.psi.iter_mut().find(|p| (p.t, p.v) == (t, v)) {
                        p.ci = Some(*ci);
                    }
                }
                EstimandKey::PsiT { t } => {
                    if let Some(p) = self.psi_t.iter_mut().find(|p| p.t == t) {
                        p.ci = Some(*ci);
                    }
                }
                EstimandKey::Contrast { from, to } => {
                    if let Some(c) = self.contrasts.iter_mut().find(|c| (c.from, c.to) == (from, to)) {
                        c.ci = Some(*ci);
                    }
                }
            }
        }
    }
}

/// Exact difference `psi[to] - psi[from]` of stored estimates.
pub fn contrast(report: &EstimandReport, from: Pair, to: Pair) -> Result<f64> {
    let a = report
        .psi(from)
        .ok_or_else(|| Error::UnknownEstimand(format!("psi{from:?}")))?;
    let b = report
        .psi(to)
        .ok_or_else(|| Error::UnknownEstimand(format!("psi{to:?}")))?;
    Ok(b - a)
}

/// All `psi_{t,v}`, all `psi_t` and every within-treatment contrast
/// `(t,v) -> (t,v')` with `v < v'`.
pub fn estimate_all(data: &Dataset, fits: &FittedModel, floor: Option<f64>) -> Result<EstimandReport> {
    check_floor(floor)?;
    let mut psi = Vec::new();
    let mut psi_t = Vec::new();
    for (t, tp) in fits.params.treatments.iter().enumerate() {
        let values = (0..tp.n_versions())
            .map(|v| ht_psi(data, fits, t, v, floor))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.context(format!("treatment {t}")))?;
        let shares = version_shares(data, &fits.params, t)?;
        psi_t.push(TreatmentEstimate {
            t,
            estimate: combine_versions(&shares, &values),
            ci: None,
        });
        psi.extend(values.into_iter().enumerate().map(|(v, estimate)| VersionEstimate {
            t,
            v,
            estimate,
            ci: None,
        }));
    }
    let mut report = EstimandReport {
        psi,
        psi_t,
        contrasts: Vec::new(),
        n_used: data.n(),
        floor,
    };
    for (t, tp) in fits.params.treatments.iter().enumerate() {
        for v in 0..tp.n_versions() {
            for v2 in (v + 1)..tp.n_versions() {
                report.add_contrast((t, v), (t, v2))?;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimandKey {
    Psi { t: usize, v: usize },
    PsiT { t: usize },
    Contrast { from: Pair, to: Pair },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub level: f64,
    pub keys: Vec<EstimandKey>,
    /// `values[j][b]` is estimand `keys[j]` on resample `b`.
    pub values: Vec<Vec<f64>>,
    pub ci: Vec<Interval>,
    /// Resamples redrawn because a treatment label was missing.
    pub redraws: usize,
    /// Resamples whose model fit failed (each was redrawn).
    pub failures: usize,
    /// Canonicalized parameters of every replicate.
    pub replicate_params: Vec<ModelParams>,
}

/// Linear-interpolation percentile of an ascending sample, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central percentile interval at confidence `level`.
pub fn percentile_interval(values: &[f64], level: f64) -> Interval {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Interval {
        lower: percentile(&sorted, alpha / 2.0),
        upper: percentile(&sorted, 1.0 - alpha / 2.0),
    }
}

struct Replicate {
    estimates: Vec<f64>,
    params: ModelParams,
    redraws: usize,
    failures: usize,
}

/// Attempts per replicate before the bootstrap gives up.
const MAX_RESAMPLE_ATTEMPTS: usize = 50;

fn run_replicate(
    data: &Dataset,
    versions: &VersionStructure,
    em: &EmConfig,
    cfg: &BootstrapConfig,
    keys: &[EstimandKey],
    b: usize,
) -> Result<Replicate> {
    let (mut redraws, mut failures) = (0, 0);
    let mut last_error = String::new();
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut rng = rng_for(cfg.seed, &[b as u64, attempt as u64]);
        let rows: Vec<usize> = (0..data.n()).map(|_| rng.random_range(0..data.n())).collect();
        let Ok(resample) = data.select(&rows) else {
            redraws += 1;
            continue;
        };
        let em_cfg = EmConfig {
            seed: derive_seed(cfg.seed, &[b as u64, attempt as u64, 1]),
            ..em.clone()
        };
        let outcome = fit_model(&resample, versions, &em_cfg)
            .and_then(|fits| Ok((estimate_all(&resample, &fits, cfg.floor)?, fits)));
        match outcome {
            Ok((report, fits)) => {
                let lookup = report.keyed_estimates();
                let estimates = keys
                    .iter()
                    .map(|k| {
                        lookup
                            .iter()
                            .find(|(key, _)| key == k)
                            .map(|(_, v)| *v)
                            .ok_or_else(|| Error::Internal(format!("replicate lacks {k:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                return Ok(Replicate {
                    estimates,
                    params: fits.params,
                    redraws,
                    failures,
                });
            }
            Err(e) if matches!(e.root(), Error::Internal(_)) => return Err(e),
            Err(e) => {
                failures += 1;
                last_error = e.to_string();
            }
        }
    }
    Err(Error::BootstrapFailure {
        failed: failures,
        total: MAX_RESAMPLE_ATTEMPTS,
        diagnostics: format!("replicate {b} exhausted its resampling attempts; last error: {last_error}"),
    })
}

/// Nonparametric bootstrap of the whole pipeline with percentile intervals.
///
/// Every replicate draws `n` units with replacement, refits the treatment
/// model and all mixtures (same restart count, seeds derived from
/// `(seed, b)`) and recomputes every estimand.
pub fn bootstrap(data: &Dataset, versions: &VersionStructure, em: &EmConfig, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    if cfg.replicates < 2 {
        return Err(Error::InvalidParameter("bootstrap needs at least 2 replicates".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {}", cfg.level)));
    }
    check_floor(cfg.floor)?;
    let keys: Vec<EstimandKey> = {
        let mut report = EstimandReport {
            psi: versions
                .pairs()
                .map(|(t, v)| VersionEstimate { t, v, estimate: 0.0, ci: None })
                .collect(),
            psi_t: (0..versions.n_treatments())
                .map(|t| TreatmentEstimate { t, estimate: 0.0, ci: None })
                .collect(),
            contrasts: Vec::new(),
            n_used: 0,
            floor: None,
        };
        for (t, &k) in versions.counts().iter().enumerate() {
            for v in 0..k {
                for v2 in (v + 1)..k {
                    report.add_contrast((t, v), (t, v2))?;
                }
            }
        }
        report.keyed_estimates().into_iter().map(|(k, _)| k).collect()
    };

    let replicates = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| run_replicate(data, versions, em, cfg, &keys, b))
        .collect::<Result<Vec<_>>>()?;

    let failures: usize = replicates.iter().map(|r| r.failures).sum();
    let redraws = replicates.iter().map(|r| r.redraws).sum();
    if failures as f64 > 0.2 * cfg.replicates as f64 {
        return Err(Error::BootstrapFailure {
            failed: failures,
            total: cfg.replicates + failures,
            diagnostics: format!("{redraws} resamples redrawn for missing treatment labels"),
        });
    }
    let values: Vec<Vec<f64>> = (0..keys.len())
        .map(|j| replicates.iter().map(|r| r.estimates[j]).collect())
        .collect();
    let ci = values.iter().map(|v| percentile_interval(v, cfg.level)).collect();
    Ok(BootstrapResult {
        replicates: cfg.replicates,
        level: cfg.level,
        keys,
        values,
        ci,
        redraws,
        failures,
        replicate_params: replicates.into_iter().map(|r| r.params).collect(),
    })
}
