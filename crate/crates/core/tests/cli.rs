use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use versioncausal::model::VersionStructure;
use versioncausal::sim::{build_truth, simulate_dataset, SimConfig};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_versioncausal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Writes a simulated two-arm sample with a categorical site column.
fn write_inputs(dir: &Path) {
    let cfg = SimConfig {
        n: 300,
        p: 3,
        versions: VersionStructure::new(vec![2, 2]).unwrap(),
        snr: 10.0,
        reps: 1,
        seed: 6,
    };
    let data = simulate_dataset(&build_truth(&cfg).unwrap(), 300, 10.0, 6).unwrap().data;
    let mut csv = String::from("outcome,arm,x1,x2,x3,site\n");
    for i in 0..data.n() {
        let x = data.x(i);
        let arm = ["control", "treated"][data.treatments()[i]];
        let site = ["north", "south", "east"][i % 3];
        writeln!(csv, "{},{arm},{},{},{},{site}", data.outcomes()[i], x[0], x[1], x[2]).unwrap();
    }
    std::fs::write(dir.join("data.csv"), csv).unwrap();
    std::fs::write(
        dir.join("roles.toml"),
        "outcome = \"outcome\"\ntreatment = \"arm\"\n\n[covariates]\nx1 = \"numeric\"\nx2 = \"numeric\"\nx3 = \"numeric\"\nsite = \"categorical\"\n",
    )
    .unwrap();
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_then_convert_reports() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let out = dir.path().join("fit");
    let data = dir.path().join("data.csv");
    let roles = dir.path().join("roles.toml");
    ok(&["fit", "--data", path(&data), "--roles", path(&roles), "--versions", "2,2", "--restarts", "3", "--out", path(&out)]);
    for name in ["estimates.csv", "report.json", "params.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let table = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("psi,")).count(), 4);
    assert!(table.starts_with("# n_used=300\n"));

    let converted = dir.path().join("converted.csv");
    ok(&["report", "--in", path(&out.join("report.json")), "--format", "tabular", "--out", path(&converted)]);
    assert_eq!(std::fs::read_to_string(&converted).unwrap(), table);

    let back = dir.path().join("back.json");
    ok(&["report", "--in", path(&converted), "--format", "structured", "--out", path(&back)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&back).unwrap()).unwrap();
    assert_eq!(json["estimates"]["psi"].as_array().unwrap().len(), 4);
}

#[test]
fn bootstrap_writes_intervals() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let out = dir.path().join("boot");
    ok(&[
        "bootstrap",
        "--data",
        path(&dir.path().join("data.csv")),
        "--roles",
        path(&dir.path().join("roles.toml")),
        "--versions",
        "2,2",
        "--restarts",
        "2",
        "--B",
        "4",
        "--level",
        "0.9",
        "--out",
        path(&out),
    ]);
    assert!(out.join("bootstrap.csv").is_file());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["bootstrap"]["replicates"], 4);
    for psi in json["estimates"]["psi"].as_array().unwrap() {
        assert!(psi["ci"]["lower"].as_f64().unwrap() <= psi["ci"]["upper"].as_f64().unwrap());
    }
}

#[test]
fn simulate_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&[
        "simulate", "--n", "300", "--p", "4", "--snr", "10", "--treatments", "2", "--versions", "2,2", "--reps", "3",
        "--restarts", "2", "--seed", "5", "--out", path(&out),
    ]);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(out.join("replicates.csv").is_file());
    assert!(out.join("truth.json").is_file());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let out = cli(&[
        "fit",
        "--data",
        path(&dir.path().join("data.csv")),
        "--roles",
        path(&dir.path().join("roles.toml")),
        "--versions",
        "2,2,2",
        "--out",
        path(&dir.path().join("fit")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--versions lists 3 treatments but the data has 2"));

    let missing = cli(&["report", "--in", path(&dir.path().join("nope.json")), "--format", "tabular", "--out", "x"]);
    assert!(!missing.status.success());
}
