use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn logan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "train": {
    "steps": 10,
    "batch_size": 8,
    "eval_every": 5,
    "arch": { "hidden_width": 6, "hidden_layers": 2, "leaky_slope": 0.2 },
    "eval": { "n_samples": 200 },
    "objective": { "loss_kind": "lol1", "penalty_kind": "pairwise_gp" }
  },
  "point_cloud_rows": 50,
  "contour": { "resolution": [6, 5] }
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn train_smoke_writes_all_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("run");
    let o = logan(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "experiment.json",
        "config.json",
        "metrics.csv",
        "losses.csv",
        "coverage.json",
        "contour.csv",
        "contour.json",
        "real.csv",
        "generated.csv",
        "reconstructed.csv",
        "real_tuples.csv",
        "fake_tuples.csv",
        "snapshots/step_00000000.json",
        "snapshots/step_00000005.json",
        "snapshots/step_00000010.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,lossD,lossEG,penalty,modes_captured,hq_fraction,x_l2,z_l2");
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn train_twice_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(logan(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(logan(&["train", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("run");
    assert!(logan(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "17"])
        .status
        .success());
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 17);
}

#[test]
fn schema_error_exits_nonzero_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "pairwise_gp"}, "stepz": 3}}"#,
    );
    let o = logan(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.stepz"), "{err}");
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn aborted_run_exits_nonzero_and_records_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace(r#""eval_every": 5,"#, r#""eval_every": 5, "adam": {"alpha": 1e300},"#);
    let cfg = write_config(tmp.path(), "boom.json", &text);
    let out = tmp.path().join("run");
    let o = logan(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(record["status"], "aborted");
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn sweep_two_losses_three_seeds_gives_six_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replacen(
        r#""point_cloud_rows": 50,"#,
        r#""point_cloud_rows": 50, "sweep": {"losses": ["vanilla", "lol1"], "penalties": ["pairwise_gp"], "seeds": [0, 1, 2]},"#,
        1,
    );
    let cfg = write_config(tmp.path(), "sweep.json", &text);
    let out = tmp.path().join("sweep");
    let o = logan(&["sweep", "--config", s(&cfg), "--out", s(&out), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "loss,penalty,seed,modes_captured,hq_fraction,x_l2,status");
    assert_eq!(lines.len(), 7);
    let keys: Vec<String> = lines[1..]
        .iter()
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        keys,
        [
            "vanilla,pairwise_gp,0",
            "vanilla,pairwise_gp,1",
            "vanilla,pairwise_gp,2",
            "lol1,pairwise_gp,0",
            "lol1,pairwise_gp,1",
            "lol1,pairwise_gp,2"
        ]
    );
    assert_eq!(String::from_utf8_lossy(&o.stdout), summary);
}

fn escape_rows(out: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(out.join("escape.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"d_crit"), "{header:?}");
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn escape_table_flips_at_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("esc");
    let o = logan(&["escape", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("escape.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (d_crit, mse) = (col("d_crit"), col("mse_crossed"));
    let rows = escape_rows(&out);
    assert!(rows.iter().all(|r| r[d_crit] == "2.5"));
    let outcomes: Vec<&str> = rows.iter().map(|r| r[mse].as_str()).collect();
    let flips = outcomes.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(flips, 1, "{outcomes:?}");
}

#[test]
fn escape_with_large_lambda_always_crosses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "esc.json",
        r#"{"train": {"objective": {"loss_kind": "lol1", "penalty_kind": "pairwise_gp"}},
            "escape": {"peak": 10.0, "depths": [0.5, 2.0, 5.0, 9.0],
                       "params": {"n_dims": 2, "lambda": 1000.0, "step_size": 0.001, "max_steps": 1000000}}}"#,
    );
    let out = tmp.path().join("esc");
    assert!(logan(&["escape", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let text = std::fs::read_to_string(out.join("escape.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let mse = header.iter().position(|h| *h == "mse_crossed").unwrap();
    assert!(escape_rows(&out).iter().all(|r| r[mse] == "true"));
}

#[test]
fn eval_and_contour_read_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let run = tmp.path().join("run");
    assert!(logan(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let snap = run.join("snapshots/step_00000010.json");

    let o = logan(&["eval", s(&snap), "--config", s(&cfg), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["coverage"]["n_samples"], 200);
    assert_eq!(report["seed"], 3);

    let grid = tmp.path().join("grid");
    let o = logan(&["contour", s(&snap), "--config", s(&cfg), "--out", s(&grid)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(grid.join("contour.csv")).unwrap(),
        std::fs::read(run.join("contour.csv")).unwrap()
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        logan_core::experiment::ExperimentConfig::from_json(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
