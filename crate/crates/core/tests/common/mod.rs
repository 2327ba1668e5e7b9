#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use versioncausal::em::TreatmentSlice;
use versioncausal::glm::{logit_objective, SoftLabelProblem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Row-major design with a leading column of ones.
pub fn random_design(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<f64> {
    let mut design = Vec::with_capacity(m * d);
    for _ in 0..m {
        design.push(1.0);
        for _ in 1..d {
            design.push(normal(rng));
        }
    }
    design
}

/// Random class targets: one-hot draws when `hard`, Dirichlet-like rows otherwise.
pub fn random_targets(rng: &mut ChaCha8Rng, m: usize, k: usize, hard: bool) -> Vec<f64> {
    let mut w = vec![0.0; m * k];
    for i in 0..m {
        if hard {
            // keep every class populated
            let c = if i < k { i } else { rng.random_range(0..k) };
            w[i * k + c] = 1.0;
        } else {
            let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..k {
                w[i * k + c] = raw[c] / s;
            }
        }
    }
    w
}

pub fn random_coefficients(rng: &mut ChaCha8Rng, k: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| (0..d).map(|_| if c == 0 { 0.0 } else { scale * normal(rng) }).collect())
        .collect()
}

/// Central finite-difference gradient of the logit objective over the
/// non-reference coefficients, in class-major order.
pub fn finite_difference_gradient(problem: &SoftLabelProblem, coefs: &[Vec<f64>], ridge: f64, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 1..coefs.len() {
        for j in 0..coefs[c].len() {
            let mut plus = coefs.to_vec();
            let mut minus = coefs.to_vec();
            plus[c][j] += h;
            minus[c][j] -= h;
            let fp = logit_objective(problem, &plus, ridge).unwrap();
            let fm = logit_objective(problem, &minus, ridge).unwrap();
            out.push((fp - fm) / (2.0 * h));
        }
    }
    out
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = ((row + 1)..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Weighted normal equations assembled entry by entry.
pub fn brute_force_wls(design: &[f64], d: usize, y: &[f64], w: &[f64]) -> Vec<f64> {
    let rows: Vec<&[f64]> = design.chunks(d).collect();
    let a = (0..d)
        .map(|r| (0..d).map(|c| rows.iter().zip(w).map(|(x, wi)| wi * x[r] * x[c]).sum()).collect())
        .collect();
    let b = (0..d).map(|r| rows.iter().zip(w).zip(y).map(|((x, wi), yi)| wi * x[r] * yi).sum()).collect();
    gauss_solve(a, b)
}

/// Draws a slice from a `k`-component Gaussian mixture of linear experts
/// with random gating.
pub fn moe_slice(rng: &mut ChaCha8Rng, n: usize, p: usize, k: usize, separation: f64) -> TreatmentSlice {
    let d = p + 1;
    let gating = random_coefficients(rng, k, d, 1.0);
    let betas: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..d).map(|j| if j == 0 { separation * c as f64 } else { normal(rng) }).collect())
        .collect();
    let mut covariates = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
        let mut logits: Vec<f64> = gating
            .iter()
            .map(|g| g[0] + g[1..].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        versioncausal::model::softmax_in_place(&mut logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = k - 1;
        for (j, p) in logits.iter().enumerate() {
            acc += p;
            if u < acc {
                c = j;
                break;
            }
        }
        let mean = betas[c][0] + betas[c][1..].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        y.push(mean + 0.5 * normal(rng));
        covariates.extend(x);
    }
    TreatmentSlice::from_rows(y, &covariates, p).unwrap()
}

/// Twelve rows: row 8 lacks an age and row 11 carries region W, which never
/// occurs under treatment A.
pub const FIXTURE_CSV: &str = "\
y,t,age,sex,region
1,A,20,F,N
2,A,25,M,N
3,A,25,F,S
4,A,30,M,S
5,A,30,F,N
6,A,30,M,S
7,B,35,F,N
8,B,NA,M,N
9,B,35,F,N
10,B,35,M,S
11,B,50,F,W
12,B,35,M,N
";

pub const FIXTURE_ROLES: &str = "\
outcome = \"y\"
treatment = \"t\"

[covariates]
age = \"numeric\"
sex = \"categorical\"
region = \"categorical\"
";

/// Columns age (mean 30, SD 5), sex=M (reference F wins the 5-5 tie) and
/// region=S (reference N).
pub const FIXTURE_DESIGN: [[f64; 3]; 10] = [
    [-2.0, 0.0, 0.0],
    [-1.0, 1.0, 0.0],
    [-1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 1.0, 0.0],
];

pub const FIXTURE_OUTCOMES: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0, 10.0, 12.0];
pub const FIXTURE_TREATMENTS: [usize; 10] = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
