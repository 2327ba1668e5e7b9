//! Per-treatment EM for the Gaussian mixture of experts: E-step
//! responsibilities, closed-form expert updates, soft-label gating
//! updates, restart control and canonical relabeling.

use std::cmp::Ordering;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_multinomial_logit_from, logit_objective, LogitOptions, SoftLabelProblem};
use crate::model::{gaussian_logdensity, log_sum_exp, Dataset, Expert, TreatmentParams};
use crate::seed::rng_for;

/// Ridge added to the weighted normal equations.
pub const WLS_DAMPING: f64 = 1e-10;
/// Lower bound on every expert variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Responsibility mass (relative to `n_t`) below which a component collapsed.
pub const COLLAPSE_MASS: f64 = 1e-10;
/// Log-likelihood decrease that is treated as an implementation bug.
pub const ASCENT_VIOLATION: f64 = 1e-6;

/// Units of one treatment arm with their augmented design rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSlice {
    pub treatment: usize,
    /// Unit indices in the parent dataset.
    pub indices: Vec<usize>,
    pub outcomes: Vec<f64>,
    /// Row-major `n_t x (p+1)` design with a leading column of ones.
    pub design: Vec<f64>,
    pub d: usize,
}

impl TreatmentSlice {
    pub fn new(data: &Dataset, t: usize) -> Result<Self> {
        let indices = data.indices_of(t);
        if indices.is_empty() {
            return Err(Error::InvalidInput(format!("no units with treatment {t}")));
        }
        let d = data.p() + 1;
        let mut design = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            design.push(1.0);
            design.extend_from_slice(data.x(i));
        }
        Ok(Self {
            treatment: t,
            outcomes: indices.iter().map(|&i| data.outcomes()[i]).collect(),
            indices,
            design,
            d,
        })
    }

    /// Slice built directly from outcomes and raw covariate rows (`p` columns).
    pub fn from_rows(outcomes: Vec<f64>, covariates: &[f64], p: usize) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 || covariates.len() != n * p {
            return Err(Error::InvalidInput("slice shape mismatch".into()));
        }
        let d = p + 1;
        let mut design = Vec::with_capacity(n * d);
        for i in 0..n {
            design.push(1.0);
            design.extend_from_slice(&covariates[i * p..(i + 1) * p]);
        }
        Ok(Self {
            treatment: 0,
            indices: (0..n).collect(),
            outcomes,
            design,
            d,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.d..(i + 1) * self.d]
    }

    /// The slice with every unit listed twice.
    pub fn duplicated(&self) -> Self {
        let mut out = self.clone();
        out.indices.extend_from_slice(&self.indices);
        out.outcomes.extend_from_slice(&self.outcomes);
        out.design.extend_from_slice(&self.design);
        out
    }
}

/// Row-stochastic `n_t x J_t` posterior version weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn from_values(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * k || k == 0 {
            return Err(Error::InvalidInput("responsibility shape mismatch".into()));
        }
        for (i, row) in values.chunks_exact(k).enumerate() {
            if row.iter().any(|r| !(0.0..=1.0).contains(r)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self { n, k, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_versions(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, v: usize) -> f64 {
        self.values[i * self.k + v]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        self.values.iter().skip(v).step_by(self.k).copied().collect()
    }

    /// Row-major buffer.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reorders columns so that new column `v` is old column `order[v]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.k) {
            values.extend(order.iter().map(|&o| row[o]));
        }
        Self {
            n: self.n,
            k: self.k,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Absolute tolerance on the change of the observed-data log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Re-initializations allowed per restart slot after a collapse.
    pub extra_attempts: usize,
    /// Solver settings for the gating M-step.
    pub gating: LogitOptions,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            restarts: 10,
            seed: 0,
            extra_attempts: 3,
            gating: LogitOptions {
                tol: 1e-14,
                max_iter: 100,
                ridge: crate::glm::DEFAULT_RIDGE,
            },
        }
    }
}

/// Log-likelihood path of the winning EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Observed-data log-likelihood at the initial point and after each iteration.
    pub loglik: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Restart slot that produced the returned fit.
    pub restart: usize,
    /// Initializations abandoned because a component collapsed.
    pub collapsed_attempts: usize,
}

impl EmTrace {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik.last().expect("trace is never empty")
    }

    /// Largest single-step decrease of the log-likelihood (0 if monotone).
    pub fn max_decrease(&self) -> f64 {
        self.loglik
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub params: TreatmentParams,
    pub responsibilities: Responsibilities,
    pub trace: EmTrace,
}

fn check_params(slice: &TreatmentSlice, params: &TreatmentParams) -> Result<()> {
    params.validate(slice.d)
}

/// Responsibilities and the observed-data log-likelihood in one pass.
fn e_step_with_loglik(slice: &TreatmentSlice, params: &TreatmentParams) -> Result<(Responsibilities, f64)> {
    let k = params.n_versions();
    let variances: Vec<f64> = params.experts.iter().map(|e| e.sigma * e.sigma).collect();
    let mut values = vec![0.0; slice.n() * k];
    let mut log_gate = vec![0.0; k];
    let mut joint = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..slice.n() {
        let x = slice.row(i);
        let y = slice.outcomes[i];
        for (lg, eta) in log_gate.iter_mut().zip(&params.gating) {
            *lg = dot(eta, x);
        }
        let lse_gate = log_sum_exp(&log_gate);
        for v in 0..k {
            let resid = y - dot(&params.experts[v].beta, x);
            joint[v] = log_gate[v] - lse_gate + gaussian_logdensity(resid, variances[v]);
        }
        let lse = log_sum_exp(&joint);
        if !lse.is_finite() {
            return Err(Error::Underflow {
                unit: slice.indices[i],
            });
        }
        total += lse;
        let row = &mut values[i * k..(i + 1) * k];
        for (r, a) in row.iter_mut().zip(&joint) {
            *r = (a - lse).exp().clamp(0.0, 1.0);
        }
    }
    Ok((Responsibilities { n: slice.n(), k, values }, total))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Posterior version probabilities for every unit of the slice.
pub fn e_step(slice: &TreatmentSlice, params: &TreatmentParams) -> Result<Responsibilities> {
    check_params(slice, params)?;
    e_step_with_loglik(slice, params).map(|(r, _)| r)
}

/// Observed-data log-likelihood `sum_i log sum_v pi_v f_v` of the slice.
pub fn observed_loglik(slice: &TreatmentSlice, params: &TreatmentParams) -> Result<f64> {
    check_params(slice, params)?;
    let (_, ll) = e_step_with_loglik(slice, params)?;
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(Error::Numerical("non-finite observed log-likelihood".into()))
    }
}

/// Solves the damped weighted normal equations `(F'RF + dI) b = F'RY`.
pub fn weighted_least_squares(design: &[f64], d: usize, outcomes: &[f64], weights: &[f64], damping: f64) -> Result<Vec<f64>> {
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for ((x, &y), &w) in design.chunks_exact(d).zip(outcomes).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..d {
            let wa = w * x[a];
            rhs[a] += wa * y;
            for b in a..d {
                gram[a * d + b] += wa * x[b];
            }
        }
    }
    let mut gram = DMatrix::from_fn(d, d, |a, b| if a <= b { gram[a * d + b] } else { gram[b * d + a] });
    for j in 0..d {
        gram[(j, j)] += damping;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("weighted normal equations are singular".into()))?;
    let beta = chol.solve(&DVector::from_vec(rhs));
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("non-finite weighted least-squares solution".into()));
    }
    Ok(beta.as_slice().to_vec())
}

/// Closed-form expert update for version `v`: weighted least-squares
/// coefficients and the responsibility-weighted residual variance.
pub fn m_step_expert(slice: &TreatmentSlice, resp: &Responsibilities, v: usize) -> Result<(Vec<f64>, f64)> {
    let weights = resp.column(v);
    expert_update(slice, &weights, v)
}

fn expert_update(slice: &TreatmentSlice, weights: &[f64], v: usize) -> Result<(Vec<f64>, f64)> {
    let mass: f64 = weights.iter().sum();
    if !(mass >= COLLAPSE_MASS * slice.n() as f64) {
        return Err(Error::CollapsedComponent { version: v, mass });
    }
    let beta = weighted_least_squares(&slice.design, slice.d, &slice.outcomes, weights, WLS_DAMPING)?;
    let rss: f64 = slice
        .design
        .chunks_exact(slice.d)
        .zip(&slice.outcomes)
        .zip(weights)
        .map(|((x, y), w)| {
            let r = y - dot(&beta, x);
            w * r * r
        })
        .sum();
    Ok((beta, (rss / mass).max(VARIANCE_FLOOR)))
}

/// Soft-label multinomial-logit update of the gating coefficients,
/// warm-started from `current` when given.
pub fn m_step_gating(
    slice: &TreatmentSlice,
    resp: &Responsibilities,
    current: Option<&[Vec<f64>]>,
    options: &LogitOptions,
) -> Result<Vec<Vec<f64>>> {
    let k = resp.n_versions();
    if k == 1 {
        return Ok(vec![vec![0.0; slice.d]]);
    }
    let problem = SoftLabelProblem::new(&slice.design, slice.d, resp.values(), k)?;
    let fit = fit_multinomial_logit_from(&problem, options, current).map_err(|e| match e {
        Error::DegenerateClass { class, weight } => Error::CollapsedComponent {
            version: class,
            mass: weight,
        },
        other => other,
    })?;
    Ok(fit.coefficients)
}

fn m_step(slice: &TreatmentSlice, resp: &Responsibilities, current: &TreatmentParams, cfg: &EmConfig) -> Result<TreatmentParams> {
    let experts = (0..resp.n_versions())
        .map(|v| {
            let (beta, var) = m_step_expert(slice, resp, v)?;
            Ok(Expert { beta, sigma: var.sqrt() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gating = m_step_gating(slice, resp, Some(&current.gating), &cfg.gating)?;
    if gating.len() > 1 {
        // the ridge can trade a sliver of likelihood for a smaller norm when
        // the gating is nearly separable; keep the old gating in that case
        let problem = SoftLabelProblem::new(&slice.design, slice.d, resp.values(), gating.len())?;
        if logit_objective(&problem, &gating, 0.0)? < logit_objective(&problem, &current.gating, 0.0)? {
            gating = current.gating.clone();
        }
    }
    Ok(TreatmentParams { gating, experts })
}

/// Result of a single EM run from a fixed starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub params: TreatmentParams,
    pub responsibilities: Responsibilities,
    pub loglik: Vec<f64>,
    pub converged: bool,
}

/// Runs EM from `init` until the log-likelihood change drops below
/// `cfg.tol` or `cfg.max_iter` iterations have been made.
pub fn em_from(slice: &TreatmentSlice, init: TreatmentParams, cfg: &EmConfig) -> Result<EmRun> {
    check_params(slice, &init)?;
    let mut params = init;
    let (mut resp, mut ll) = e_step_with_loglik(slice, &params)?;
    let mut trace = vec![ll];
    let mut converged = false;
    for iteration in 1..=cfg.max_iter {
        params = m_step(slice, &resp, &params, cfg)?;
        let (next_resp, next_ll) = e_step_with_loglik(slice, &params)?;
        if !next_ll.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-likelihood at EM iteration {iteration}")));
        }
        if next_ll < ll - ASCENT_VIOLATION {
            return Err(Error::Internal(format!(
                "EM log-likelihood decreased from {ll} to {next_ll} at iteration {iteration}"
            )));
        }
        trace.push(next_ll);
        resp = next_resp;
        let change = (next_ll - ll).abs();
        ll = next_ll;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params,
        responsibilities: resp,
        loglik: trace,
        converged,
    })
}

/// Random start centred on the pooled least-squares fit of the slice.
pub fn initialize<R: Rng + ?Sized>(slice: &TreatmentSlice, n_versions: usize, rng: &mut R) -> Result<TreatmentParams> {
    let ones = vec![1.0; slice.n()];
    let (ols, var) = expert_update(slice, &ones, 0)?;
    let sd = var.sqrt();
    let jitter = 0.5 * sd / (slice.d as f64).sqrt();
    let experts = (0..n_versions)
        .map(|_| Expert {
            beta: ols
                .iter()
                .map(|b| b + jitter * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            sigma: sd,
        })
        .collect();
    Ok(TreatmentParams {
        gating: vec![vec![0.0; slice.d]; n_versions],
        experts,
    })
}

fn is_attempt_failure(err: &Error) -> bool {
    matches!(
        err,
        Error::CollapsedComponent { .. } | Error::Numerical(_) | Error::Underflow { .. } | Error::DegenerateClass { .. }
    )
}

struct SlotOutcome {
    run: Option<EmRun>,
    collapsed: usize,
    last_error: Option<String>,
}

fn run_slot(slice: &TreatmentSlice, n_versions: usize, cfg: &EmConfig, slot: usize) -> Result<SlotOutcome> {
    let mut collapsed = 0;
    let mut last_error = None;
    for attempt in 0..=cfg.extra_attempts {
        let mut rng = rng_for(cfg.seed, &[slot as u64, attempt as u64]);
        let outcome = initialize(slice, n_versions, &mut rng).and_then(|init| em_from(slice, init, cfg));
        match outcome {
            Ok(run) => {
                return Ok(SlotOutcome {
                    run: Some(run),
                    collapsed,
                    last_error,
                })
            }
            Err(e) if is_attempt_failure(&e) => {
                collapsed += 1;
                last_error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SlotOutcome {
        run: None,
        collapsed,
        last_error,
    })
}

/// Fits a `n_versions`-component mixture of experts to the slice with
/// `cfg.restarts` random starts and returns the canonicalized best run.
pub fn em_fit(slice: &TreatmentSlice, n_versions: usize, cfg: &EmConfig) -> Result<EmFit> {
    if n_versions == 0 {
        return Err(Error::InvalidParameter("need at least one version".into()));
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidParameter(
            "EM needs tol > 0, max_iter >= 1 and restarts >= 1".into(),
        ));
    }
    if slice.n() <= slice.d * n_versions {
        warn!(
            "treatment {}: {} units for {} versions with {} coefficients each",
            slice.treatment,
            slice.n(),
            n_versions,
            slice.d
        );
    }
    if n_versions == 1 {
        let ones = vec![1.0; slice.n()];
        let (beta, var) = expert_update(slice, &ones, 0)?;
        let params = TreatmentParams {
            gating: vec![vec![0.0; slice.d]],
            experts: vec![Expert { beta, sigma: var.sqrt() }],
        };
        let (responsibilities, ll) = e_step_with_loglik(slice, &params)?;
        return Ok(EmFit {
            params,
            responsibilities,
            trace: EmTrace {
                loglik: vec![ll],
                iterations: 1,
                converged: true,
                restart: 0,
                collapsed_attempts: 0,
            },
        });
    }

    let outcomes = (0..cfg.restarts)
        .into_par_iter()
        .map(|slot| run_slot(slice, n_versions, cfg, slot))
        .collect::<Result<Vec<_>>>()?;

    let collapsed_attempts = outcomes.iter().map(|o| o.collapsed).sum();
    let mut best: Option<(usize, &EmRun)> = None;
    for (slot, outcome) in outcomes.iter().enumerate() {
        if let Some(run) = &outcome.run {
            let ll = *run.loglik.last().unwrap();
            if best.is_none_or(|(_, b)| ll > *b.loglik.last().unwrap()) {
                best = Some((slot, run));
            }
        }
    }
    let Some((restart, run)) = best else {
        let reason = outcomes
            .iter()
            .find_map(|o| o.last_error.clone())
            .unwrap_or_else(|| "no successful restart".into());
        return Err(Error::FitFailure {
            treatment: slice.treatment,
            reason: format!("all {} restarts failed; last error: {reason}", cfg.restarts),
        });
    };

    let order = canonical_order(&run.params);
    let params = permute_components(&run.params, &order);
    let responsibilities = run.responsibilities.permuted(&order);
    Ok(EmFit {
        params,
        responsibilities,
        trace: EmTrace {
            iterations: run.loglik.len() - 1,
            loglik: run.loglik.clone(),
            converged: run.converged,
            restart,
            collapsed_attempts,
        },
    })
}

fn lexicographic(a: &Expert, b: &Expert) -> Ordering {
    a.beta
        .iter()
        .chain(std::iter::once(&a.sigma))
        .zip(b.beta.iter().chain(std::iter::once(&b.sigma)))
        .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Component order that sorts experts lexicographically by `(beta, sigma)`;
/// exact ties keep their original relative order.
pub fn canonical_order(params: &TreatmentParams) -> Vec<usize> {
    let mut order: Vec<usize> = (0..params.n_versions()).collect();
    order.sort_by(|&a, &b| lexicographic(&params.experts[a], &params.experts[b]));
    if order
        .windows(2)
        .any(|w| lexicographic(&params.experts[w[0]], &params.experts[w[1]]) == Ordering::Equal)
    {
        warn!("identical expert parameters; tie broken by component index");
    }
    order
}

/// Relabels components (new `v` is old `order[v]`) and shifts the gating
/// coefficients so that the new version 0 is the zero reference.
pub fn permute_components(params: &TreatmentParams, order: &[usize]) -> TreatmentParams {
    let reference = params.gating[order[0]].clone();
    TreatmentParams {
        gating: order
            .iter()
            .map(|&o| params.gating[o].iter().zip(&reference).map(|(a, r)| a - r).collect())
            .collect(),
        experts: order.iter().map(|&o| params.experts[o].clone()).collect(),
    }
}

/// Sorts components into canonical order and re-fixes the gating reference.
pub fn canonicalize(params: &TreatmentParams) -> TreatmentParams {
    permute_components(params, &canonical_order(params))
}

/// True if the experts are in non-decreasing lexicographic order.
pub fn is_canonical(params: &TreatmentParams) -> bool {
    params
        .experts
        .windows(2)
        .all(|w| lexicographic(&w[0], &w[1]) != Ordering::Greater)
}
