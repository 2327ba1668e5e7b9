mod common;

use common::*;
use rand::Rng;
use versioncausal::em::{is_canonical, EmConfig};
use versioncausal::estimate::{bootstrap, estimate_all, fit_model, version_shares, BootstrapConfig, EstimandKey};
use versioncausal::io::{run_fit, write_run, BootstrapSettings, RunConfig};
use versioncausal::model::{Dataset, VersionStructure};
use versioncausal::sim::{build_truth, simulate_dataset, SimConfig};

fn quick() -> EmConfig {
    EmConfig {
        restarts: 3,
        ..EmConfig::default()
    }
}

fn sim_data(n: usize, p: usize, seed: u64) -> Dataset {
    let cfg = SimConfig {
        n,
        p,
        versions: VersionStructure::new(vec![2, 2]).unwrap(),
        snr: 10.0,
        reps: 1,
        seed,
    };
    let truth = build_truth(&cfg).unwrap();
    simulate_dataset(&truth, n, 10.0, seed).unwrap().data
}

/// Randomized treatments and versions, with the version label kept aside.
/// Version v of treatment t has mean 10 t + 8 v plus a small covariate slope.
fn observed_version_data(n: usize, seed: u64) -> (Dataset, Vec<usize>) {
    let mut rng = rng(seed);
    let (mut y, mut t, mut x, mut versions) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let ti = if i < 2 { i } else { rng.random_range(0..2) };
        let vi = usize::from(rng.random::<f64>() < 0.4);
        let xi = normal(&mut rng);
        y.push(10.0 * ti as f64 + 8.0 * vi as f64 + 0.3 * xi + normal(&mut rng));
        t.push(ti);
        x.push(xi);
        versions.push(vi);
    }
    (Dataset::new(y, t, x, 1, 2).unwrap(), versions)
}

#[test]
fn smoke_run_reports_every_estimand() {
    let data = sim_data(200, 3, 4);
    let versions = VersionStructure::new(vec![2, 2]).unwrap();
    let cfg = RunConfig {
        restarts: 3,
        ..RunConfig::new(versions.clone(), "unused")
    };
    let run = run_fit(&cfg, &data).unwrap();
    assert_eq!(run.report.psi.len(), versions.total());
    assert_eq!(run.report.psi_t.len(), 2);
    assert_eq!(run.report.contrasts.len(), 2);
    assert_eq!(run.report.n_used, 200);
    for t in 0..2 {
        let shares = version_shares(&data, &run.fitted.params, t).unwrap();
        assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(is_canonical(&run.fitted.params.treatments[t]));
    }
}

#[test]
fn identical_runs_write_identical_files() {
    let data = sim_data(300, 3, 9);
    let cfg = RunConfig {
        restarts: 3,
        bootstrap: Some(BootstrapSettings {
            replicates: 4,
            level: 0.9,
        }),
        ..RunConfig::new(VersionStructure::new(vec![2, 2]).unwrap(), "unused")
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        write_run(dir.path(), &run_fit(&cfg, &data).unwrap(), None).unwrap();
    }
    for name in ["estimates.csv", "report.json", "params.json", "bootstrap.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn scaling_outcomes_scales_every_estimate() {
    let data = sim_data(400, 3, 21);
    let versions = VersionStructure::new(vec![2, 2]).unwrap();
    let c = 3.5;
    let base = estimate_all(&data, &fit_model(&data, &versions, &quick()).unwrap(), None).unwrap();
    let scaled_fit = fit_model(&data.scale_outcomes(c), &versions, &quick()).unwrap();
    let scaled = estimate_all(&data.scale_outcomes(c), &scaled_fit, None).unwrap();
    for ((_, a), (_, b)) in base.keyed_estimates().iter().zip(scaled.keyed_estimates()) {
        assert!((c * a - b).abs() <= 1e-6 * b.abs().max(1.0), "{} vs {b}", c * a);
    }
}

#[test]
fn estimates_agree_with_stratified_means() {
    let (data, versions) = observed_version_data(800, 17);
    let structure = VersionStructure::new(vec![2, 2]).unwrap();
    let report = estimate_all(&data, &fit_model(&data, &structure, &quick()).unwrap(), None).unwrap();
    let boot = bootstrap(
        &data,
        &structure,
        &quick(),
        &BootstrapConfig {
            replicates: 40,
            level: 0.95,
            seed: 3,
            floor: None,
        },
    )
    .unwrap();
    for t in 0..2 {
        for v in 0..2 {
            let cell: Vec<f64> = (0..data.n())
                .filter(|&i| data.treatments()[i] == t && versions[i] == v)
                .map(|i| data.outcomes()[i])
                .collect();
            let stratified = cell.iter().sum::<f64>() / cell.len() as f64;
            let j = boot.keys.iter().position(|k| *k == EstimandKey::Psi { t, v }).unwrap();
            let reps = &boot.values[j];
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            let se = (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
            let psi = report.psi((t, v)).unwrap();
            assert!((psi - stratified).abs() < 3.0 * se, "({t},{v}): {psi} vs {stratified}, se {se}");
        }
    }
}

#[test]
fn constant_outcomes_give_zero_width_intervals() {
    let n = 60;
    let treatments: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = Dataset::new(vec![2.5; n], treatments, vec![0.0; n], 1, 2).unwrap();
    let boot = bootstrap(
        &data,
        &VersionStructure::new(vec![1, 1]).unwrap(),
        &quick(),
        &BootstrapConfig {
            replicates: 2,
            level: 0.95,
            seed: 1,
            floor: None,
        },
    )
    .unwrap();
    for (values, ci) in boot.values.iter().zip(&boot.ci) {
        // the treatment model only fits an intercept here, so every weight
        // sum equals the arm size up to the tiny ridge
        assert!((values[0] - values[1]).abs() < 1e-9);
        assert!(ci.upper - ci.lower < 1e-9);
        assert!((values[0] - 2.5).abs() < 1e-6);
    }
}

#[test]
fn bootstrap_replicates_are_label_aligned() {
    let data = sim_data(300, 3, 5);
    let boot = bootstrap(
        &data,
        &VersionStructure::new(vec![2, 2]).unwrap(),
        &quick(),
        &BootstrapConfig {
            replicates: 6,
            level: 0.95,
            seed: 8,
            floor: None,
        },
    )
    .unwrap();
    assert_eq!(boot.replicate_params.len(), 6);
    for params in &boot.replicate_params {
        assert!(params.treatments.iter().all(is_canonical));
    }
    for (values, ci) in boot.values.iter().zip(&boot.ci) {
        assert_eq!(values.len(), 6);
        assert!(ci.lower <= ci.upper);
    }
}
