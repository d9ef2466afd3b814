use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use misreport::cli::{read_artifact, read_manifest, Artifact};

const GENERATOR: &str = r#"
s_x = 3
s_z = 3
n_w_cells = 2
misclassification_strength = 0.3
eigenvalue_separation = 0.3
seed = 11
z_noise = 0.1
ord_margin = 0.05

[probit]
beta = [0.6, -0.4]
sigma = [1.0, 0.8]
cutpoints = [0.0, 1.0]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_misreport"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// simulate, test, identify and estimate in `dir` with relative paths.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("gen.toml"), GENERATOR).unwrap();
    ok(dir, &["simulate", "--spec", "gen.toml", "--n", "8000", "--seed", "5", "--out", "synth.csv", "--schema-out", "schema.toml", "--truth", "truth.csv"]);
    ok(dir, &["test", "--input", "synth.csv", "--schema", "schema.toml", "--by-cell", "--B", "99", "--seed", "42", "--out", "report.json"]);
    ok(dir, &["identify", "--input", "synth.csv", "--schema", "schema.toml", "--by-cell", "--method", "cmle", "--starts", "4", "--seed", "7", "--boot", "8", "--out", "models.json"]);
    ok(dir, &["estimate", "--models", "models.json", "--data", "synth.csv", "--schema", "schema.toml", "--model", "hoprobit", "--target", "latent", "--boot", "8", "--seed", "11", "--out", "fit.json"]);
    ok(dir, &["estimate", "--data", "synth.csv", "--schema", "schema.toml", "--model", "hoprobit", "--target", "reported", "--boot", "8", "--seed", "11", "--out", "fit_reported.json"]);
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report.txt")
}

#[test]
fn help_exits_zero() {
    let out = bin().args(["test", "--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--by-cell"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(bin().args(["test", "--frobnicate"]).output().unwrap().status.code(), Some(64));
    assert_eq!(bin().args(["nonsense"]).output().unwrap().status.code(), Some(64));
}

#[test]
fn empty_report_is_a_usage_error() {
    assert_eq!(bin().args(["report", "--inputs"]).output().unwrap().status.code(), Some(64));
    assert_eq!(bin().args(["report"]).output().unwrap().status.code(), Some(64));
}

#[test]
fn missing_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["test", "--input", "absent.csv", "--schema", "absent.toml", "--seed", "1", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn schema_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), r#"{"schema_version": 99, "kind": "fit"}"#).unwrap();
    std::fs::write(dir.path().join("b.json"), r#"{"schema_version": 1, "kind": "fit", "model": "linear"}"#).unwrap();
    assert_eq!(run(dir.path(), &["report", "--inputs", "a.json"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["report", "--inputs", "b.json"]).status.code(), Some(1));
}

#[test]
fn cmle_without_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gen.toml"), GENERATOR).unwrap();
    ok(dir.path(), &["simulate", "--spec", "gen.toml", "--n", "500", "--seed", "1", "--out", "s.csv", "--schema-out", "s.toml"]);
    let out = run(dir.path(), &["identify", "--input", "s.csv", "--schema", "s.toml", "--method", "cmle", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unidentifiable_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("x,y,z\n");
    for i in 0..300 {
        csv.push_str(&format!("{},{},{}\n", i % 3 + 1, i % 2, 1));
    }
    std::fs::write(d.join("flat.csv"), csv).unwrap();
    std::fs::write(
        d.join("flat.toml"),
        "x_column = \"x\"\ny_column = \"y\"\nz_column = \"z\"\nw_columns = []\nx_recode = [[1], [2], [3]]\nw_median_split = []\n[y_binning]\nthreshold = 0.5\n[z_binning]\ncuts = [1.5, 2.5]\n",
    )
    .unwrap();
    let out = run(d, &["identify", "--input", "flat.csv", "--schema", "flat.toml", "--method", "spectral", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_may_not_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gen.toml"), GENERATOR).unwrap();
    let out = run(dir.path(), &["simulate", "--spec", "gen.toml", "--n", "10", "--seed", "1", "--out", "gen.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read_to_string(dir.path().join("gen.toml")).unwrap(), GENERATOR);
}

#[test]
fn pipeline_artifacts_manifests_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    for name in ["synth.csv", "report.json", "models.json", "fit.json"] {
        assert!(d.join(name).exists(), "{name}");
        let manifest = read_manifest(&d.join(format!("{name}.manifest.json"))).unwrap();
        assert_eq!(manifest.version, env!("CARGO_PKG_VERSION"));
        assert!(manifest.outputs.contains_key(name));
        assert!(!manifest.inputs.is_empty());
    }
    match read_artifact(&d.join("report.json")).unwrap() {
        Artifact::Tests(t) => {
            assert_eq!(t.reports.len(), 3);
            assert_eq!(t.reports[0].w_label, None);
        }
        other => panic!("unexpected {other:?}"),
    }
    match read_artifact(&d.join("models.json")).unwrap() {
        Artifact::Models(m) => {
            assert_eq!(m.cells.len(), 2);
            assert!(m.cells.iter().all(|c| c.std_errors.as_ref().is_some_and(|s| s.len() == c.parameter_names.len())));
            assert!(m.cells.iter().all(|c| c.cmle.is_some()));
        }
        other => panic!("unexpected {other:?}"),
    }
    match read_artifact(&d.join("fit.json")).unwrap() {
        Artifact::Fit(f) => {
            assert_eq!(f.estimate_names, vec!["const", "w1"]);
            assert_eq!(f.fit.std_errors.as_ref().map(Vec::len), Some(2));
            assert!((f.fit.beta[1] + 0.4).abs() < 0.15, "{:?}", f.fit.beta);
        }
        other => panic!("unexpected {other:?}"),
    }

    let inputs_before = std::fs::read(d.join("synth.csv")).unwrap();
    let models_before = std::fs::read(d.join("models.json")).unwrap();
    let fit_before = std::fs::read(d.join("fit.json")).unwrap();
    for name in ["synth.csv", "report.json", "models.json", "fit.json"] {
        ok(d, &["replay", "--manifest", &format!("{name}.manifest.json"), "--check"]);
    }
    assert_eq!(std::fs::read(d.join("synth.csv")).unwrap(), inputs_before);
    assert_eq!(std::fs::read(d.join("models.json")).unwrap(), models_before);
    assert_eq!(std::fs::read(d.join("fit.json")).unwrap(), fit_before);
}

#[test]
fn replay_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.toml"), GENERATOR).unwrap();
    ok(d, &["simulate", "--spec", "gen.toml", "--n", "500", "--seed", "2", "--out", "s.csv", "--schema-out", "s.toml"]);
    ok(d, &["test", "--input", "s.csv", "--schema", "s.toml", "--B", "99", "--seed", "1", "--out", "r.json"]);
    std::fs::write(d.join("s.csv"), "x,y,z\n1,0,1\n").unwrap();
    assert_eq!(run(d, &["replay", "--manifest", "r.json.manifest.json"]).status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.toml"), GENERATOR).unwrap();
    ok(d, &["simulate", "--spec", "gen.toml", "--n", "3000", "--seed", "2", "--out", "s.csv", "--schema-out", "s.toml"]);
    for (threads, out) in [("1", "a.json"), ("3", "b.json")] {
        ok(d, &["--threads", threads, "identify", "--input", "s.csv", "--schema", "s.toml", "--by-cell", "--seed", "3", "--starts", "4", "--boot", "6", "--out", out]);
    }
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
}

#[test]
fn golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(d, &["report", "--inputs", "report.json", "models.json", "fit.json", "fit_reported.json", "--out", "tables.txt"]);
    let text = std::fs::read_to_string(d.join("tables.txt")).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &text).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).expect("golden file present");
    assert_eq!(text, golden);
    assert!(text.contains("***"));

    ok(d, &["report", "--inputs", "fit.json", "fit_reported.json", "--format", "csv", "--out", "fits.csv"]);
    let csv = std::fs::read_to_string(d.join("fits.csv")).unwrap();
    assert!(csv.starts_with("column,parameter,estimate,std_error\n"));
    assert_eq!(csv.lines().count(), 5);
}
