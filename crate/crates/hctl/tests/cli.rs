use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hctl::tasks::{DIAGNOSTICS_HEADER, HIT_HEADER};
use hctl::ResultRecord;

fn hctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hctl")).args(args).env_remove("HCTL_THREADS").output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn record(dir: &Path) -> ResultRecord {
    serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const ORACLE: &str = r#"{
  "density": { "kind": "gmrf", "params": { "shape": [2, 2, 4] }, "mask": { "kind": "half", "axis": "W" } },
  "model": { "backend": "gaussian" },
  "seeds": { "count": 2 },
  "oracle": { "burn_in": 50, "retained": 1000, "energy_points": 100, "permutations": 20, "batches": 10 }
}"#;

const TINY_TRAIN: &str = r#"{
  "train": { "iterations": 40, "batch": 32, "log_every": 10, "model": { "hidden": 16, "embed_dim": 8 } },
  "train_eval_samples": 200
}"#;

fn tiny_weights(tmp: &Path) -> PathBuf {
    let cfg = write(tmp, "train.json", TINY_TRAIN);
    let out = tmp.join("train");
    let o = hctl(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("weights.bin")
}

#[test]
fn malformed_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{ "seeds": { "count": 0 } }"#);
    let o = hctl(&["locality", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let unknown = write(tmp.path(), "unknown.json", r#"{ "sample_count": 3 }"#);
    assert_eq!(hctl(&["train", "--config", unknown.to_str().unwrap()]).status.code(), Some(1));
    let mismatch = write(tmp.path(), "mismatch.json", r#"{ "task": "sweep" }"#);
    assert_eq!(hctl(&["train", "--config", mismatch.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn missing_files_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let absent = tmp.path().join("absent.json");
    assert_eq!(hctl(&["train", "--config", absent.to_str().unwrap()]).status.code(), Some(2));

    // An output path that is a regular file cannot become a directory.
    let blocker = write(tmp.path(), "blocker", "");
    let cfg = write(tmp.path(), "loc.json", r#"{ "density": { "kind": "gmrf" }, "model": { "backend": "gaussian" } }"#);
    let out = blocker.join("out");
    let o = hctl(&["locality", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn diverging_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "diverge.json",
        r#"{ "train": { "iterations": 50, "batch": 8, "lr": 1e300, "model": { "hidden": 4, "embed_dim": 4 } } }"#,
    );
    let o = hctl(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn record_replays_from_its_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "oracle.json", ORACLE);
    let first = tmp.path().join("first");
    let o = hctl(&["gibbs-oracle", "--config", cfg.to_str().unwrap(), "--out", first.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = record(&first);

    // Replay the echoed config on a different worker count.
    let second = tmp.path().join("second");
    let mut echo = rec.config.clone();
    echo.out_dir = second.clone();
    let echo_path = write(tmp.path(), "echo.json", &serde_json::to_string_pretty(&echo).unwrap());
    let o = hctl(&["gibbs-oracle", "--config", echo_path.to_str().unwrap(), "--threads", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let again = record(&second);

    let mut a = rec.reproducible_part();
    let mut b = again.reproducible_part();
    a.config.out_dir = PathBuf::new();
    b.config.out_dir = PathBuf::new();
    assert_eq!(a, b);
    for name in rec.artifacts.iter().filter(|n| n.ends_with(".csv")) {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn training_is_reproducible_and_creates_its_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "train.json", TINY_TRAIN);
    let nested = tmp.path().join("a/b/c");
    let o = hctl(&["train", "--config", cfg.to_str().unwrap(), "--out", nested.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("manifold-hit"));
    for f in ["weights.bin", "loss.csv", "unconditional.svg", "results.json"] {
        assert!(nested.join(f).is_file(), "{f} missing");
    }
    assert_eq!(first_line(&nested.join("loss.csv")), "iteration,loss,lr");

    let other = tmp.path().join("again");
    assert!(hctl(&["train", "--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(nested.join("weights.bin")).unwrap(), fs::read(other.join("weights.bin")).unwrap());

    let reseeded = tmp.path().join("reseeded");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--out", reseeded.to_str().unwrap(), "--seed", "5"];
    assert!(hctl(&args).status.success());
    assert_ne!(fs::read(nested.join("weights.bin")).unwrap(), fs::read(reseeded.join("weights.bin")).unwrap());
    assert_eq!(record(&reseeded).config.seeds.master, 5);
}

#[test]
fn toy_figure_emits_a_cloud_and_scatter_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let weights = tiny_weights(tmp.path());
    let body = format!(
        r#"{{ "model": {{ "backend": "mlp", "weights": {:?} }}, "seeds": {{ "count": 2 }}, "samples_per_seed": 40, "steps": 10 }}"#,
        weights.to_str().unwrap()
    );
    let cfg = write(tmp.path(), "toy.json", &body);
    let out = tmp.path().join("toy");
    let o = hctl(&["toy-fig", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = record(&out);
    for label in ["oracle", "dps", "tfg_ugd", "h_control"] {
        assert!(rec.artifacts.contains(&format!("{label}.csv")), "{label}.csv missing from {:?}", rec.artifacts);
        assert!(out.join(format!("{label}.svg")).is_file());
        assert_eq!(first_line(&out.join(format!("{label}.csv"))), "seed,x1,x2");
    }
    assert_eq!(first_line(&out.join("hits.csv")), HIT_HEADER.join(","));
    assert_eq!(first_line(&out.join("h_control_diagnostics.csv")), DIAGNOSTICS_HEADER.join(","));
    // Ten steps: DPS costs two calls per step, TFG five, h-control J=4 five.
    assert_eq!(rec.nfe["dps"], 20.0);
    assert_eq!(rec.nfe["tfg_ugd"], 50.0);
    assert!(rec.nfe["h_control"] <= 50.0);
    assert_eq!(rec.config.methods.len(), 3);
}

#[test]
fn table_headers_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "oracle.json", ORACLE);
    let mut headers = Vec::new();
    for run in ["one", "two"] {
        let out = tmp.path().join(run);
        assert!(hctl(&["gibbs-oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
        headers.push((first_line(&out.join("oracle.csv")), first_line(&out.join("zscores.csv"))));
    }
    assert_eq!(headers[0], headers[1]);
    assert_eq!(headers[0].1, "check,seed,coord,z");
    assert!(headers[0].0.starts_with("check,seed,max_abs_z,cov_rel_error,energy"));
}
