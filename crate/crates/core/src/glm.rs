//! Multinomial logistic regression with hard or soft (fractional) labels,
//! fitted by damped Newton iterations.
//!
//! The same solver serves the treatment-assignment model (one-hot labels)
//! and the gating M-step (responsibilities as targets). Class 0 is the
//! reference and its coefficients are pinned at zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Relative class mass below which a class counts as degenerate.
const DEGENERATE_MASS: f64 = 1e-10;
const MAX_HALVINGS: usize = 60;

/// Row-major design of augmented rows plus a row-stochastic target matrix.
#[derive(Debug, Clone, Copy)]
pub struct SoftLabelProblem<'a> {
    design: &'a [f64],
    weights: &'a [f64],
    m: usize,
    d: usize,
    k: usize,
}

impl<'a> SoftLabelProblem<'a> {
    /// `design` is `m x d` and `weights` is `m x k`, both row-major.
    pub fn new(design: &'a [f64], d: usize, weights: &'a [f64], k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidInput("empty design or class set".into()));
        }
        if design.len() % d != 0 {
            return Err(Error::InvalidInput(format!(
                "design length {} not a multiple of {d}",
                design.len()
            )));
        }
        let m = design.len() / d;
        if weights.len() != m * k {
            return Err(Error::InvalidInput(format!(
                "weight matrix has {} entries, expected {m}x{k}",
                weights.len()
            )));
        }
        if let Some(j) = design.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite design entry at row {}",
                j / d
            )));
        }
        for (i, row) in weights.chunks_exact(k).enumerate() {
            if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidInput(format!(
                    "weights of row {i} outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "weights of row {i} sum to {s}, not 1"
                )));
            }
        }
        Ok(Self {
            design,
            weights,
            m,
            d,
            k,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.d..(i + 1) * self.d]
    }

    fn targets(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    fn n_free(&self) -> usize {
        (self.k - 1) * self.d
    }

    /// Per-class total weight.
    pub fn class_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.k];
        for row in self.weights.chunks_exact(self.k) {
            for (m, w) in mass.iter_mut().zip(row) {
                *m += w;
            }
        }
        mass
    }
}

/// One-hot target matrix for hard labels in `0..k`.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut w = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidInput(format!(
                "label {l} at row {i} outside 0..{k}"
            )));
        }
        w[i * k + l] = 1.0;
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    /// `k` coefficient vectors; `coefficients[0]` is zero.
    pub coefficients: Vec<Vec<f64>>,
    /// Final penalized objective.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

fn unpack(theta: &[f64], k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut coefs = Vec::with_capacity(k);
    coefs.push(vec![0.0; d]);
    coefs.extend(theta.chunks_exact(d).map(<[f64]>::to_vec));
    coefs
}

fn pack(coefs: &[Vec<f64>], k: usize, d: usize) -> Result<Vec<f64>> {
    if coefs.len() != k || coefs.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidParameter(format!(
            "expected {k} coefficient vectors of length {d}"
        )));
    }
    Ok(coefs[1..].iter().flatten().copied().collect())
}

/// Fills `logits[0..k]` for row `i`; the reference logit is 0.
#[inline]
fn row_logits(problem: &SoftLabelProblem, theta: &[f64], i: usize, logits: &mut [f64]) {
    let x = problem.row(i);
    logits[0] = 0.0;
    for (c, block) in theta.chunks_exact(problem.d).enumerate() {
        logits[c + 1] = block.iter().zip(x).map(|(b, xi)| b * xi).sum();
    }
}

fn objective(problem: &SoftLabelProblem, theta: &[f64], ridge: f64) -> f64 {
    let mut logits = vec![0.0; problem.k];
    let mut total = 0.0;
    for i in 0..problem.m {
        row_logits(problem, theta, i, &mut logits);
        let lse = crate::model::log_sum_exp(&logits);
        let w = problem.targets(i);
        let mass: f64 = w.iter().sum();
        total += w.iter().zip(&logits).map(|(wi, z)| wi * z).sum::<f64>() - mass * lse;
    }
    total - 0.5 * ridge * penalty(theta, problem.k, problem.d)
}

/// Squared norm of the coefficients centred across all `k` classes, the
/// reference included. Relabelling the classes or shifting every class by
/// the same vector leaves it unchanged.
fn penalty(theta: &[f64], k: usize, d: usize) -> f64 {
    let mut sq = 0.0;
    for j in 0..d {
        let col = theta.iter().skip(j).step_by(d);
        let sum: f64 = col.clone().sum();
        sq += col.map(|b| b * b).sum::<f64>() - sum * sum / k as f64;
    }
    sq
}

/// Gradient of the penalized objective and the (positive semi-definite)
/// Fisher matrix plus ridge, i.e. the negated Hessian.
fn gradient_and_fisher(
    problem: &SoftLabelProblem,
    theta: &[f64],
    ridge: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let (k, d) = (problem.k, problem.d);
    let q = problem.n_free();
    let mut grad = DVector::zeros(q);
    let mut fisher = DMatrix::zeros(q, q);
    let mut probs = vec![0.0; k];
    for i in 0..problem.m {
        row_logits(problem, theta, i, &mut probs);
        crate::model::softmax_in_place(&mut probs);
        let w = problem.targets(i);
        let mass: f64 = w.iter().sum();
        let x = problem.row(i);
        for a in 1..k {
            let resid = w[a] - mass * probs[a];
            let base = (a - 1) * d;
            for (j, xj) in x.iter().enumerate() {
                grad[base + j] += resid * xj;
            }
            for b in a..k {
                let delta = if a == b { probs[a] } else { 0.0 };
                let c = mass * (delta - probs[a] * probs[b]);
                if c == 0.0 {
                    continue;
                }
                let col_base = (b - 1) * d;
                for (r, xr) in x.iter().enumerate() {
                    let cx = c * xr;
                    for (s, xs) in x.iter().enumerate() {
                        fisher[(base + r, col_base + s)] += cx * xs;
                    }
                }
            }
        }
    }
    // mirror the upper block triangle
    for a in 1..k {
        for b in (a + 1)..k {
            let (ra, rb) = ((a - 1) * d, (b - 1) * d);
            for r in 0..d {
                for s in 0..d {
                    fisher[(rb + s, ra + r)] = fisher[(ra + r, rb + s)];
                }
            }
        }
    }
    if ridge > 0.0 {
        let kf = k as f64;
        for j in 0..d {
            let mean = (1..k).map(|a| theta[(a - 1) * d + j]).sum::<f64>() / kf;
            for a in 1..k {
                let r = (a - 1) * d + j;
                grad[r] -= ridge * (theta[r] - mean);
                for b in 1..k {
                    fisher[(r, (b - 1) * d + j)] += ridge * (if a == b { 1.0 } else { 0.0 } - 1.0 / kf);
                }
            }
        }
    }
    (grad, fisher)
}

/// Penalized objective `sum_i sum_k w_ik log softmax_k - ridge/2 sum_k |coef_k - mean coef|^2`.
pub fn logit_objective(
    problem: &SoftLabelProblem,
    coefficients: &[Vec<f64>],
    ridge: f64,
) -> Result<f64> {
    let theta = pack(coefficients, problem.k, problem.d)?;
    Ok(objective(problem, &theta, ridge))
}

/// Gradient over the non-reference coefficients (class-major, `(k-1)*d`
/// entries) and the Hessian of the penalized objective.
pub fn logit_grad_hess(
    problem: &SoftLabelProblem,
    coefficients: &[Vec<f64>],
    ridge: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let theta = pack(coefficients, problem.k, problem.d)?;
    let (grad, fisher) = gradient_and_fisher(problem, &theta, ridge);
    Ok((grad.as_slice().to_vec(), -fisher))
}

fn newton_direction(fisher: DMatrix<f64>, grad: &DVector<f64>, iteration: usize) -> Result<DVector<f64>> {
    let q = fisher.nrows();
    let scale = (0..q).map(|j| fisher[(j, j)].abs()).sum::<f64>() / q as f64 + 1e-300;
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut damped = fisher.clone();
        for j in 0..q {
            damped[(j, j)] += jitter;
        }
        if let Some(chol) = damped.cholesky() {
            let dir = chol.solve(grad);
            if dir.iter().all(|v| v.is_finite()) {
                return Ok(dir);
            }
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    Err(Error::Numerical(format!(
        "Hessian not positive definite after damping at Newton iteration {iteration}"
    )))
}

/// Maximizes the penalized soft-label log-likelihood starting from zero.
pub fn fit_multinomial_logit(problem: &SoftLabelProblem, options: &LogitOptions) -> Result<LogitFit> {
    fit_multinomial_logit_from(problem, options, None)
}

/// As [`fit_multinomial_logit`], optionally warm-started from `init`.
pub fn fit_multinomial_logit_from(
    problem: &SoftLabelProblem,
    options: &LogitOptions,
    init: Option<&[Vec<f64>]>,
) -> Result<LogitFit> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {}", options.tol)));
    }
    if !(options.ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ridge must be non-negative, got {}",
            options.ridge
        )));
    }
    let (k, d, m) = (problem.k, problem.d, problem.m);
    let mass = problem.class_mass();
    if let Some(class) = mass.iter().position(|&w| w < DEGENERATE_MASS * m as f64) {
        return Err(Error::DegenerateClass {
            class,
            weight: mass[class],
        });
    }
    let mut theta = match init {
        Some(c) => pack(c, k, d)?,
        None => vec![0.0; problem.n_free()],
    };
    let mut f = objective(problem, &theta, options.ridge);
    if !f.is_finite() {
        return Err(Error::Numerical("non-finite objective at the starting point".into()));
    }
    let mut trace = vec![f];
    if k == 1 {
        return Ok(LogitFit {
            coefficients: unpack(&theta, k, d),
            loglik: f,
            iterations: 0,
            converged: true,
            objective_trace: trace,
        });
    }
    let grad_tol = 1e-6 * m as f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let (grad, fisher) = gradient_and_fisher(problem, &theta, options.ridge);
        let dir = newton_direction(fisher, &grad, iterations)?;
        // objective differences below this are rounding noise
        let slack = 4.0 * f64::EPSILON * f.abs();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, s)| t + step * s).collect();
            let f_trial = objective(problem, &trial, options.ridge);
            if f_trial.is_finite() && f_trial >= f - slack {
                accepted = Some((trial, f_trial));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, f_trial)) = accepted else {
            // No ascent possible along the Newton direction: stationary up to rounding.
            let max_grad = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            converged = max_grad < grad_tol;
            break;
        };
        let rel = (f_trial - f).abs() / f.abs().max(1e-300);
        theta = trial;
        f = f_trial;
        trace.push(f);
        if rel < options.tol {
            let (grad, _) = gradient_and_fisher(problem, &theta, options.ridge);
            let max_grad = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if max_grad < grad_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(LogitFit {
        coefficients: unpack(&theta, k, d),
        loglik: f,
        iterations,
        converged,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fitted_probs(fit: &LogitFit, x: &[f64]) -> Vec<f64> {
        crate::model::gating_probs(x, &fit.coefficients).unwrap()
    }

    #[test]
    fn balanced_intercept_only() {
        let design = vec![1.0; 6];
        let weights = one_hot(&[0, 1, 0, 1, 1, 0], 2).unwrap();
        let problem = SoftLabelProblem::new(&design, 1, &weights, 2).unwrap();
        let fit = fit_multinomial_logit(&problem, &LogitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[1][0].abs() < 1e-8);
        assert_eq!(fit.coefficients[0], vec![0.0]);

        let (grad, _) = logit_grad_hess(&problem, &[vec![0.0], vec![0.0]], 0.0).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    /// Independent scalar Newton solve of the two-parameter logistic likelihood.
    fn scalar_logistic(xs: &[f64], ys: &[f64], ridge: f64) -> (f64, f64) {
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (-ridge * a, -ridge * b, ridge, 0.0, ridge);
            for (&x, &y) in xs.iter().zip(ys) {
                let p = 1.0 / (1.0 + (-(a + b * x)).exp());
                ga += y - p;
                gb += (y - p) * x;
                let w = p * (1.0 - p);
                haa += w;
                hab += w * x;
                hbb += w * x * x;
            }
            let det = haa * hbb - hab * hab;
            let da = (hbb * ga - hab * gb) / det;
            let db = (haa * gb - hab * ga) / det;
            a += da;
            b += db;
            if da.abs() + db.abs() < 1e-13 {
                break;
            }
        }
        (a, b)
    }

    #[test]
    fn separable_four_point_problem_with_ridge() {
        let design = vec![1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0];
        let weights = one_hot(&[0, 0, 1, 1], 2).unwrap();
        let problem = SoftLabelProblem::new(&design, 2, &weights, 2).unwrap();
        let options = LogitOptions {
            ridge: 1e-4,
            ..Default::default()
        };
        let fit = fit_multinomial_logit(&problem, &options).unwrap();
        assert!(fitted_probs(&fit, &[-1.0])[1] < 0.05);
        assert!(fitted_probs(&fit, &[1.0])[1] > 0.95);

        // with two classes the centred penalty is half the plain one
        let (a, b) = scalar_logistic(&[-1.0, -1.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0], 0.5e-4);
        assert!((fit.coefficients[1][0] - a).abs() < 1e-6 * (1.0 + a.abs()));
        assert!((fit.coefficients[1][1] - b).abs() < 1e-6 * (1.0 + b.abs()));
    }

    #[test]
    fn separable_without_ridge_hits_max_iter() {
        let design = vec![1.0, -1.0, 1.0, -2.0, 1.0, 1.0, 1.0, 2.0];
        let weights = one_hot(&[0, 0, 1, 1], 2).unwrap();
        let problem = SoftLabelProblem::new(&design, 2, &weights, 2).unwrap();
        let options = LogitOptions {
            ridge: 0.0,
            max_iter: 25,
            ..Default::default()
        };
        let fit = fit_multinomial_logit(&problem, &options).unwrap();
        assert!(!fit.converged);
        assert!(fit.loglik.is_finite());
    }

    #[test]
    fn degenerate_class_is_reported() {
        let design = vec![1.0; 3];
        let weights = one_hot(&[0, 0, 0], 2).unwrap();
        let problem = SoftLabelProblem::new(&design, 1, &weights, 2).unwrap();
        let err = fit_multinomial_logit(&problem, &LogitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateClass { class: 1, .. }));
    }

    #[test]
    fn invalid_weights_rejected() {
        let design = vec![1.0; 2];
        assert!(SoftLabelProblem::new(&design, 1, &[0.5, 0.6, 0.5, 0.5], 2).is_err());
        assert!(SoftLabelProblem::new(&design, 1, &[1.5, -0.5, 0.5, 0.5], 2).is_err());
        assert!(SoftLabelProblem::new(&design, 1, &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn hessian_is_symmetric() {
        let design: Vec<f64> = (0..30).map(|j| if j % 3 == 0 { 1.0 } else { ((j * 7) % 11) as f64 / 5.0 - 1.0 }).collect();
        let weights: Vec<f64> = (0..10).flat_map(|i| {
            let a = 0.1 + 0.08 * i as f64;
            vec![a, (1.0 - a) * 0.4, (1.0 - a) * 0.6]
        }).collect();
        let problem = SoftLabelProblem::new(&design, 3, &weights, 3).unwrap();
        let coefs = vec![vec![0.0; 3], vec![0.3, -0.2, 0.1], vec![-0.5, 0.4, 0.9]];
        let (_, hess) = logit_grad_hess(&problem, &coefs, 0.01).unwrap();
        for r in 0..hess.nrows() {
            for c in 0..hess.ncols() {
                assert!((hess[(r, c)] - hess[(c, r)]).abs() < 1e-10);
            }
        }
    }
}
