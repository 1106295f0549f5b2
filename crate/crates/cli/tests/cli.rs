use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kirchhoffnet"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn topo_prints_fc_edges() {
    let o = bin().args(["topo", "--kind", "fc", "--nodes", "3"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("edge ")).count(), 6, "{text}");
    assert!(text.starts_with("nodes 3"));
}

#[test]
fn topo_from_config() {
    let o = bin().arg("--config").arg(configs().join("mnist.json")).arg("topo").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("nodes 206"));
}

#[test]
fn scale_reports_femtoseconds() {
    let o = bin().args(["scale", "--a", "1e-15", "--horizon", "1.0"]).output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("1 fs"), "{text}");
    assert!(text.contains("1e-15 F"), "{text}");
    let bad = bin().args(["scale", "--a", "-1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_then_eval_sample_density() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("--config")
        .arg(configs().join("moons.json"))
        .arg("--out-dir")
        .arg(dir.path())
        .args(["train", "--epochs", "3"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.json", "metrics.csv", "config.json", "summary.json", "samples.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,test_metric,lr,wall_clock_s"));
    assert_eq!(metrics.lines().count(), 4);

    let o = bin()
        .arg("--config")
        .arg(configs().join("moons.json"))
        .arg("--out-dir")
        .arg(dir.path())
        .arg("eval")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let metric: f64 = stdout(&o).trim().parse().unwrap();
    assert!(metric.is_finite());

    let o = bin().arg("--out-dir").arg(dir.path()).args(["--seed", "5", "sample", "--n", "7"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let samples = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 8);

    let o = bin().arg("--out-dir").arg(dir.path()).args(["density", "--grid", "50", "--extent", "5"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("grid mass"));
    assert!(dir.path().join("density.csv").exists());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(configs().join("moons.json")).unwrap().replace("\"depth\": 2", "\"depth\": 0");
    std::fs::write(&path, text).unwrap();
    let o = bin().arg("--config").arg(&path).arg("train").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("net.depth"), "{}", stderr(&o));

    let o = bin().args(["--config", "/nonexistent.json", "train"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("train").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blowup.json");
    std::fs::write(
        &path,
        r#"{"version": 1, "task": "generation",
            "net": {"layer": "fc", "nodes": 2, "repeat": 2, "depth": 3, "horizon": 1e300, "steps": 1, "kind": "conductance"},
            "data": {"source": "toy2d", "name": "moons", "n_train": 16, "n_test": 16},
            "train": {"epochs": 1, "batch_size": 16, "lr": 0.01}}"#,
    )
    .unwrap();
    let o = bin().arg("--config").arg(&path).arg("--out-dir").arg(dir.path()).arg("train").output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = bin().args(["gradcheck", "--kind", "tanh3", "--nets", "3"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("PASS tanh3"));
}
