use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfl"))
        .args(args)
        .env_remove("DFL_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

#[test]
fn combine_reproduces_the_reported_groups() {
    let o = dfl(&["combine", "--a", "93.68,0.13", "--b", "93.59,0.13"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "93.64 ± 0.14");
    let o = dfl(&["combine", "--a", "71.82,0.34", "--b", "71.88,0.29"]);
    assert_eq!(stdout(&o).trim(), "71.85 ± 0.32");
}

#[test]
fn combine_rejects_malformed_pairs() {
    let o = dfl(&["combine", "--a", "93.68", "--b", "93.59,0.13"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("MEAN,STD"), "{}", stderr(&o));
}

#[test]
fn run_prints_epochs_and_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = dfl(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("epoch")).count(), 4);
    let dir = PathBuf::from(lines.last().unwrap());
    assert!(dir.starts_with(tmp.path()));
    assert!(dir.join("metrics.csv").is_file());
    let effective = std::fs::read_to_string(dir.join("effective-config.txt")).unwrap();
    assert!(effective.lines().any(|l| l == "seed = 3"), "{effective}");
}

#[test]
fn grid_then_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("grid.cfg");
    let out = tmp.path().join("out");
    let text = std::fs::read_to_string(smoke_config()).unwrap();
    std::fs::write(&cfg_path, text.replace("epochs = 4", "epochs = 2").replace("out = runs/smoke", "out = out")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dfl"))
        .args(["grid", "--config", cfg_path.to_str().unwrap(), "--k", "1,2", "--t", "1", "--seeds", "2"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "K,R,T_cycle,M,tiny_mlp");
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1].starts_with("1,1,1,1,") && rows[2].starts_with("2,1,1,1,"), "{table}");
    assert!(out.join("summary.csv").is_file());

    let o = dfl(&["aggregate", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.contains(" ± ") && last.ends_with("(n=4)"), "{last}");
}

#[test]
fn aggregate_needs_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = dfl(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = stdout(&o).lines().last().unwrap().to_string();
    let o = dfl(&["aggregate", &dir]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least two"), "{}", stderr(&o));
}

#[test]
fn bad_config_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    std::fs::write(&path, "K = 2\nK_max = 3\n").unwrap();
    let o = dfl(&["run", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_nonzero_and_keeps_the_partial_run() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("diverge.cfg");
    let text = std::fs::read_to_string(smoke_config()).unwrap();
    std::fs::write(&path, text.replace("lr = 0.05", "lr = 1e200")).unwrap();
    let o = dfl(&["run", "--config", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let run = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .unwrap()
        .path();
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,lr,"));
    let log = std::fs::read_to_string(run.join("events.log")).unwrap();
    assert!(log.contains("abort after epoch"), "{log}");
    assert!(!run.join("model.dflm").exists());
}

#[test]
fn dataset_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("datasets");
    let path = tmp.path().join("cifar.cfg");
    std::fs::write(&path, format!("dataset = cifar10\nL = 1\nout = {}\n", tmp.path().display())).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dfl"))
        .args(["run", "--config", path.to_str().unwrap()])
        .env("DFL_DATA_DIR", &root)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains(root.to_str().unwrap()), "{}", stderr(&o));
}
