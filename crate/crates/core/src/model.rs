//! Domain types and pure evaluators for the treatment model, the gating
//! model, the Gaussian experts and the generalized propensity score.
//!
//! All three models act on the augmented covariate row `(1, x)`; every
//! coefficient vector therefore has length `p + 1` with the intercept first.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed `(Y, T, X)` triples for `n` units.
///
/// Covariates are stored row-major so that a unit's covariate vector is a
/// contiguous slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    outcomes: Vec<f64>,
    treatments: Vec<usize>,
    covariates: Vec<f64>,
    p: usize,
    n_treatments: usize,
}

impl Dataset {
    /// Builds a dataset, checking shapes, finiteness and that every label in
    /// `0..n_treatments` occurs at least once.
    pub fn new(
        outcomes: Vec<f64>,
        treatments: Vec<usize>,
        covariates: Vec<f64>,
        p: usize,
        n_treatments: usize,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no units".into()));
        }
        if treatments.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} outcomes but {} treatment labels",
                n,
                treatments.len()
            )));
        }
        if covariates.len() != n * p {
            return Err(Error::InvalidInput(format!(
                "covariate buffer has {} entries, expected {}x{}",
                covariates.len(),
                n,
                p
            )));
        }
        if n_treatments == 0 {
            return Err(Error::InvalidInput("need at least one treatment".into()));
        }
        if let Some(i) = outcomes.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite outcome at unit {i}")));
        }
        if let Some(k) = covariates.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite covariate at unit {}, column {}",
                k / p.max(1),
                k % p.max(1)
            )));
        }
        let mut seen = vec![false; n_treatments];
        for (i, &t) in treatments.iter().enumerate() {
            if t >= n_treatments {
                return Err(Error::InvalidInput(format!(
                    "treatment label {t} at unit {i} outside 0..{n_treatments}"
                )));
            }
            seen[t] = true;
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!(
                "treatment label {t} never occurs"
            )));
        }
        Ok(Self {
            outcomes,
            treatments,
            covariates,
            p,
            n_treatments,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_treatments(&self) -> usize {
        self.n_treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    /// Row-major `n x p` covariate buffer.
    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    /// Covariate vector of unit `i`.
    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    /// Indices of units that received treatment `t`, in unit order.
    pub fn indices_of(&self, t: usize) -> Vec<usize> {
        self.treatments
            .iter()
            .enumerate()
            .filter_map(|(i, &ti)| (ti == t).then_some(i))
            .collect()
    }

    /// New dataset made of the listed units (with repetition allowed).
    ///
    /// Fails if the selection loses a treatment label.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut covariates = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            covariates.extend_from_slice(self.x(i));
        }
        Self::new(
            rows.iter().map(|&i| self.outcomes[i]).collect(),
            rows.iter().map(|&i| self.treatments[i]).collect(),
            covariates,
            self.p,
            self.n_treatments,
        )
    }

    /// Same units with every outcome multiplied by `c`.
    pub fn scale_outcomes(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.outcomes.iter_mut().for_each(|y| *y *= c);
        out
    }
}

/// Number of versions per treatment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionStructure(Vec<usize>);

impl VersionStructure {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidParameter("empty version structure".into()));
        }
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidParameter(format!(
                "treatment {t} has zero versions"
            )));
        }
        Ok(Self(counts))
    }

    /// Parses a comma-separated list such as `2,2,3`.
    pub fn parse(list: &str) -> Result<Self> {
        let counts = list
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidParameter(format!("bad version count {s:?} in {list:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn n_treatments(&self) -> usize {
        self.0.len()
    }

    pub fn versions(&self, t: usize) -> usize {
        self.0[t]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// `(t, v)` pairs in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(t, &c)| (0..c).map(move |v| (t, v)))
    }
}

/// Gaussian linear expert `N(beta . (1, x), sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub beta: Vec<f64>,
    pub sigma: f64,
}

/// Gating coefficients and experts of one treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentParams {
    /// One coefficient vector per version; version 0 is the zero reference.
    pub gating: Vec<Vec<f64>>,
    pub experts: Vec<Expert>,
}

impl TreatmentParams {
    pub fn n_versions(&self) -> usize {
        self.experts.len()
    }

    pub(crate) fn validate(&self, d: usize) -> Result<()> {
        if self.gating.len() != self.experts.len() || self.experts.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{} gating vectors for {} experts",
                self.gating.len(),
                self.experts.len()
            )));
        }
        for (v, (eta, expert)) in self.gating.iter().zip(&self.experts).enumerate() {
            if eta.len() != d || expert.beta.len() != d {
                return Err(Error::InvalidParameter(format!(
                    "version {v}: coefficient length mismatch (expected {d})"
                )));
            }
            if !(expert.sigma > 0.0) || !expert.sigma.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "version {v}: sigma must be positive, got {}",
                    expert.sigma
                )));
            }
        }
        if self.gating[0].iter().any(|&c| c != 0.0) {
            return Err(Error::InvalidParameter(
                "reference gating vector is not zero".into(),
            ));
        }
        Ok(())
    }
}

/// Full parameter set across treatments and versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Treatment-model coefficients; `zeta[0]` is the zero reference.
    pub zeta: Vec<Vec<f64>>,
    pub treatments: Vec<TreatmentParams>,
}

impl ModelParams {
    pub fn n_treatments(&self) -> usize {
        self.zeta.len()
    }

    pub fn version_structure(&self) -> VersionStructure {
        VersionStructure(self.treatments.iter().map(|t| t.n_versions()).collect())
    }

    /// Checks the reference fixings, positivity of every sigma and all
    /// coefficient lengths against covariate dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        let d = p + 1;
        if self.zeta.len() != self.treatments.len() || self.zeta.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{} treatment-model vectors for {} treatments",
                self.zeta.len(),
                self.treatments.len()
            )));
        }
        if self.zeta.iter().any(|z| z.len() != d) {
            return Err(Error::InvalidParameter(format!(
                "treatment-model coefficient length must be {d}"
            )));
        }
        if self.zeta[0].iter().any(|&c| c != 0.0) {
            return Err(Error::InvalidParameter(
                "reference treatment-model vector is not zero".into(),
            ));
        }
        for (t, tp) in self.treatments.iter().enumerate() {
            tp.validate(d)
                .map_err(|e| e.context(format!("treatment {t}")))?;
        }
        Ok(())
    }
}

/// Joint propensity of a treatment-version pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropensityPair {
    pub e: f64,
    pub pi: f64,
    pub p_joint: f64,
}

impl PropensityPair {
    pub fn new(e: f64, pi: f64) -> Self {
        Self {
            e,
            pi,
            p_joint: e * pi,
        }
    }
}

/// `coef . (1, x)`.
#[inline]
pub fn linear_predictor(coef: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(coef.len(), x.len() + 1);
    coef[0] + coef[1..].iter().zip(x).map(|(c, xi)| c * xi).sum::<f64>()
}

/// Log of `sum(exp(v))`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Replaces logits by their softmax probabilities.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(Error::InvalidInput(format!(
            "non-finite covariate at position {j}"
        ))),
        None => Ok(()),
    }
}

fn softmax_probs(x: &[f64], coefs: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_finite(x)?;
    if let Some(k) = coefs.iter().position(|c| c.len() != x.len() + 1) {
        return Err(Error::InvalidParameter(format!(
            "coefficient vector {k} has length {}, expected {}",
            coefs[k].len(),
            x.len() + 1
        )));
    }
    let mut probs: Vec<f64> = coefs.iter().map(|c| linear_predictor(c, x)).collect();
    softmax_in_place(&mut probs);
    Ok(probs)
}

/// Treatment probabilities `e_t(x)` for all treatments.
pub fn treatment_probs(x: &[f64], zeta: &[Vec<f64>]) -> Result<Vec<f64>> {
    softmax_probs(x, zeta)
}

/// Version probabilities `pi_{t,v}(x)` for all versions of one treatment.
pub fn gating_probs(x: &[f64], eta_t: &[Vec<f64>]) -> Result<Vec<f64>> {
    softmax_probs(x, eta_t)
}

/// Log-density of the Gaussian expert at `y`.
pub fn expert_logdensity(y: f64, x: &[f64], beta: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "expert sigma must be positive, got {sigma}"
        )));
    }
    if beta.len() != x.len() + 1 {
        return Err(Error::InvalidParameter(format!(
            "expert coefficient length {} for {} covariates",
            beta.len(),
            x.len()
        )));
    }
    let resid = y - linear_predictor(beta, x);
    Ok(gaussian_logdensity(resid, sigma * sigma))
}

#[inline]
pub(crate) fn gaussian_logdensity(resid: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - resid * resid / (2.0 * var)
}

/// Generalized propensity `e_t(x) * pi_{t,v}(x)`.
pub fn generalized_propensity(
    x: &[f64],
    params: &ModelParams,
    t: usize,
    v: usize,
) -> Result<PropensityPair> {
    let e = treatment_probs(x, &params.zeta)?;
    let tp = params
        .treatments
        .get(t)
        .ok_or_else(|| Error::InvalidParameter(format!("no treatment {t}")))?;
    let pi = gating_probs(x, &tp.gating)?;
    let pi_v = *pi
        .get(v)
        .ok_or_else(|| Error::InvalidParameter(format!("treatment {t} has no version {v}")))?;
    Ok(PropensityPair::new(e[t], pi_v))
}
