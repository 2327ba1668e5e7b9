//! Synthetic data-generating process with latent versions and a Monte Carlo
//! driver reporting bias and spread of the version contrasts.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::estimate::{estimate_all, fit_model, FittedModel};
use crate::model::{Dataset, Expert, ModelParams, TreatmentParams, VersionStructure};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub versions: VersionStructure,
    pub snr: f64,
    pub reps: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn n_treatments(&self) -> usize {
        self.versions.n_treatments()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.reps == 0 {
            return Err(Error::InvalidParameter("n, p and reps must be positive".into()));
        }
        if self.n_treatments() < 2 {
            return Err(Error::InvalidParameter("need at least 2 treatments".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidParameter(format!("snr must be positive, got {}", self.snr)));
        }
        Ok(())
    }

    /// Coordinates needed for the assignment coefficients not to overlap.
    pub fn recommended_p(&self) -> usize {
        let max_versions = self.versions.counts().iter().copied().max().unwrap_or(1);
        2 * (self.n_treatments() - 1) + 2 * (max_versions - 1)
    }
}

/// True parameters of the data-generating process. Logits carry no
/// intercept, so every coefficient vector has length `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub p: usize,
    pub zeta_star: Vec<Vec<f64>>,
    pub eta_star: Vec<Vec<Vec<f64>>>,
    pub beta_star: Vec<Vec<Vec<f64>>>,
    pub psi_star: Vec<Vec<f64>>,
}

impl SimTruth {
    pub fn versions(&self) -> VersionStructure {
        VersionStructure::new(self.psi_star.iter().map(Vec::len).collect()).expect("truth has versions")
    }

    /// `psi[to] - psi[from]` for the true means.
    pub fn delta(&self, from: (usize, usize), to: (usize, usize)) -> f64 {
        self.psi_star[to.0][to.1] - self.psi_star[from.0][from.1]
    }

    /// The truth written in the estimation parameterization (intercept
    /// first), with expert scale `sigma_noise`.
    pub fn model_params(&self, sigma_noise: f64) -> ModelParams {
        let with_intercept = |c: f64, v: &[f64]| std::iter::once(c).chain(v.iter().copied()).collect::<Vec<_>>();
        ModelParams {
            zeta: self.zeta_star.iter().map(|z| with_intercept(0.0, z)).collect(),
            treatments: self
                .eta_star
                .iter()
                .zip(&self.beta_star)
                .zip(&self.psi_star)
                .map(|((eta, beta), psi)| TreatmentParams {
                    gating: eta.iter().map(|e| with_intercept(0.0, e)).collect(),
                    experts: beta
                        .iter()
                        .zip(psi)
                        .map(|(b, &c)| Expert {
                            beta: with_intercept(c, b),
                            sigma: sigma_noise,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Assignment and outcome coefficients of the simulation design.
///
/// Treatment `t >= 1` loads +2 and -2 on the cyclic coordinates `2t-2` and
/// `2t-1`; version `v >= 1` loads +2 on two coordinates shifted past those
/// used by the treatments. Outcome slopes are the unit vector
/// `(1,...,1)/sqrt(p)` plus `0.2` on coordinate `v`, and the means `psi`
/// run `1, 2, 3, ...` over the pairs in lexicographic order.
pub fn build_truth(cfg: &SimConfig) -> Result<SimTruth> {
    cfg.validate()?;
    let p = cfg.p;
    let j = cfg.n_treatments();
    if p < cfg.recommended_p() {
        warn!(
            "p = {p} is below {}; assignment coefficients share coordinates",
            cfg.recommended_p()
        );
    }
    let zeta_star = (0..j)
        .map(|t| {
            let mut z = vec![0.0; p];
            if t > 0 {
                z[(2 * t - 2) % p] += 2.0;
                z[(2 * t - 1) % p] -= 2.0;
            }
            z
        })
        .collect();
    let offset = 2 * (j - 1);
    let eta_star = cfg
        .versions
        .counts()
        .iter()
        .map(|&k| {
            (0..k)
                .map(|v| {
                    let mut e = vec![0.0; p];
                    if v > 0 {
                        e[(offset + 2 * v - 2) % p] += 2.0;
                        e[(offset + 2 * v - 1) % p] += 2.0;
                    }
                    e
                })
                .collect()
        })
        .collect();
    let common = 1.0 / (p as f64).sqrt();
    let beta_star = cfg
        .versions
        .counts()
        .iter()
        .map(|&k| {
            (0..k)
                .map(|v| {
                    let mut b = vec![common; p];
                    b[v % p] += 0.2;
                    b
                })
                .collect()
        })
        .collect();
    let mut next = 0.0;
    let psi_star = cfg
        .versions
        .counts()
        .iter()
        .map(|&k| {
            (0..k)
                .map(|_| {
                    next += 1.0;
                    next
                })
                .collect()
        })
        .collect();
    Ok(SimTruth {
        p,
        zeta_star,
        eta_star,
        beta_star,
        psi_star,
    })
}

/// One simulated sample together with the quantities the estimator never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub data: Dataset,
    /// Realized version of each unit within its treatment.
    pub latent_versions: Vec<usize>,
    /// `potentials[i][k]` is `Y_i^(t,v)` for the k-th pair in lexicographic order.
    pub potentials: Vec<Vec<f64>>,
    /// Noise scale: sample SD of the noiseless outcome divided by the SNR.
    pub sigma_noise: f64,
}

fn draw_category<R: Rng + ?Sized>(logits: &mut [f64], rng: &mut R) -> usize {
    crate::model::softmax_in_place(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in logits.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    logits.len() - 1
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `n` units from the design described by `truth`.
///
/// Redraws (with a derived seed) when some treatment is never assigned.
pub fn simulate_dataset(truth: &SimTruth, n: usize, snr: f64, seed: u64) -> Result<SimulatedData> {
    if n == 0 || !(snr > 0.0) {
        return Err(Error::InvalidParameter("need n >= 1 and snr > 0".into()));
    }
    let p = truth.p;
    let j = truth.zeta_star.len();
    for attempt in 0u64.. {
        let mut rng = rng_for(seed, &[attempt]);
        let mut covariates = Vec::with_capacity(n * p);
        let mut treatments = Vec::with_capacity(n);
        let mut latent_versions = Vec::with_capacity(n);
        let mut potentials = Vec::with_capacity(n);
        let mut noiseless = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut logits: Vec<f64> = truth.zeta_star.iter().map(|z| dot(z, &x)).collect();
            let t = draw_category(&mut logits, &mut rng);
            let mut logits: Vec<f64> = truth.eta_star[t].iter().map(|e| dot(e, &x)).collect();
            let v = draw_category(&mut logits, &mut rng);
            let row: Vec<f64> = truth
                .beta_star
                .iter()
                .zip(&truth.psi_star)
                .flat_map(|(betas, psis)| betas.iter().zip(psis).map(|(b, c)| dot(&x, b) + c))
                .collect();
            let pair_index: usize = truth.psi_star[..t].iter().map(Vec::len).sum::<usize>() + v;
            noiseless.push(row[pair_index]);
            covariates.extend(x);
            treatments.push(t);
            latent_versions.push(v);
            potentials.push(row);
        }
        let counts = (0..j).map(|t| treatments.iter().filter(|&&u| u == t).count());
        if counts.clone().any(|c| c == 0) {
            continue;
        }
        let sigma_noise = sample_sd(&noiseless) / snr;
        let noise = Normal::new(0.0, sigma_noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let outcomes = noiseless.iter().map(|y| y + noise.sample(&mut rng)).collect();
        let data = Dataset::new(outcomes, treatments, covariates, p, j)?;
        return Ok(SimulatedData {
            data,
            latent_versions,
            potentials,
            sigma_noise,
        });
    }
    unreachable!()
}

/// Standard deviation with the `n - 1` denominator (0 for a single value).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// How each Monte Carlo replicate obtains its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitMode {
    /// Full pipeline: treatment model and EM.
    Em(EmConfig),
    /// True parameters plugged in; only the estimator runs.
    Oracle,
}

/// Estimates of one replicate, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub sigma_noise: f64,
    /// `psi_hat` in lexicographic pair order; empty on failure.
    pub psi: Vec<f64>,
    pub contrasts: Vec<ContrastRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastRecord {
    pub t: usize,
    pub v: usize,
    pub v2: usize,
    pub estimate: f64,
    pub truth: f64,
}

/// Bias and SD of one within-treatment contrast `(t,v) -> (t,v2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub p: usize,
    pub snr: f64,
    pub n: usize,
    pub t: usize,
    pub v: usize,
    pub v2: usize,
    pub bias: f64,
    pub sd: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub config: SimConfig,
    pub truth: SimTruth,
    pub metrics: Vec<MetricRow>,
    pub replicates: Vec<ReplicateRecord>,
    pub failures: usize,
}

/// Replicates allowed to fail before the study is abandoned.
const MAX_FAILURE_SHARE: f64 = 0.1;

fn run_replicate(cfg: &SimConfig, truth: &SimTruth, mode: &FitMode, m: usize) -> Result<ReplicateRecord> {
    let sample = simulate_dataset(truth, cfg.n, cfg.snr, derive_seed(cfg.seed, &[m as u64, 0]))?;
    let fitted = match mode {
        FitMode::Oracle => FittedModel::from_params(&sample.data, truth.model_params(sample.sigma_noise)),
        FitMode::Em(em) => {
            let em = EmConfig {
                seed: derive_seed(cfg.seed, &[m as u64, 1]),
                ..em.clone()
            };
            fit_model(&sample.data, &cfg.versions, &em)
        }
    };
    let report = fitted.and_then(|f| estimate_all(&sample.data, &f, None));
    Ok(match report {
        Ok(report) => ReplicateRecord {
            replicate: m,
            sigma_noise: sample.sigma_noise,
            psi: report.psi.iter().map(|p| p.estimate).collect(),
            contrasts: report
                .contrasts
                .iter()
                .map(|c| ContrastRecord {
                    t: c.from.0,
                    v: c.from.1,
                    v2: c.to.1,
                    estimate: c.estimate,
                    truth: truth.delta(c.from, c.to),
                })
                .collect(),
            error: None,
        },
        Err(e) if matches!(e.root(), Error::Internal(_)) => return Err(e),
        Err(e) => ReplicateRecord {
            replicate: m,
            sigma_noise: sample.sigma_noise,
            psi: Vec::new(),
            contrasts: Vec::new(),
            error: Some(e.to_string()),
        },
    })
}

/// Mean and root-mean-square deviation (1/M normalization).
pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
    (mean, sd)
}

/// Runs `cfg.reps` replicates and summarizes every within-treatment contrast.
///
/// Replicate `m` simulates with seed `(seed, m, 0)` and fits with
/// `(seed, m, 1)`. Estimated versions are matched to true ones through the
/// canonical order, which for the truth is the order of `psi`.
pub fn monte_carlo(cfg: &SimConfig, mode: &FitMode) -> Result<MonteCarloResult> {
    let truth = build_truth(cfg)?;
    let replicates = (0..cfg.reps)
        .into_par_iter()
        .map(|m| run_replicate(cfg, &truth, mode, m))
        .collect::<Result<Vec<_>>>()?;
    let failed: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.error.is_some()).collect();
    if failed.len() as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
        let diagnostics = failed
            .iter()
            .take(5)
            .map(|r| format!("replicate {}: {}", r.replicate, r.error.as_deref().unwrap_or("")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::MonteCarloFailure {
            failed: failed.len(),
            total: cfg.reps,
            diagnostics,
        });
    }
    for r in &failed {
        warn!("replicate {} failed: {}", r.replicate, r.error.as_deref().unwrap_or(""));
    }
    let ok: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let mut metrics = Vec::new();
    for (t, &k) in cfg.versions.counts().iter().enumerate() {
        for v in 0..k {
            for v2 in (v + 1)..k {
                let errors: Vec<f64> = ok
                    .iter()
                    .filter_map(|r| r.contrasts.iter().find(|c| (c.t, c.v, c.v2) == (t, v, v2)))
                    .map(|c| c.estimate - c.truth)
                    .collect();
                let (bias, sd) = if errors.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_sd(&errors) };
                metrics.push(MetricRow {
                    p: cfg.p,
                    snr: cfg.snr,
                    n: cfg.n,
                    t,
                    v,
                    v2,
                    bias,
                    sd,
                    failures: failed.len(),
                });
            }
        }
    }
    Ok(MonteCarloResult {
        config: cfg.clone(),
        truth,
        metrics,
        failures: failed.len(),
        replicates,
    })
}
