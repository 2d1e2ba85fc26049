use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--name=small",
    "--task.n_train=32",
    "--task.n_test=12",
    "--train.epochs=1",
    "--train.batch_size=16",
    "--train.train_views=2",
    "--aggregation.num_views=4",
    "--aggregation.top_k=2",
    "--analysis.trajectories=6",
    "--analysis.lipschitz_samples=4",
    "--analysis.stability_samples=4",
    "--analysis.diagnostics_samples=4",
    "--analysis.margin_trials=200",
    "--analysis.outlier_trials=200",
    "--stability.probes=2",
];

fn clbp(root: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_clbp"))
        .args(args)
        .env("CLBP_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn with_small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_then_reuse_the_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("small");
    assert!(clbp(root.path(), &with_small("train", &[])).status.success());
    for f in ["config.json", "config.hash", "task.json", "train_history.csv", "model.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let hash = std::fs::read_to_string(run.join("config.hash")).unwrap();
    let history = std::fs::read_to_string(run.join("train_history.csv")).unwrap();
    assert!(history.starts_with("config_hash,"));
    assert_eq!(history.lines().count(), 3);
    assert!(history.lines().skip(1).all(|l| l.starts_with(hash.trim())));

    let ckpt = run.join("model.json");
    let ckpt = ckpt.to_str().unwrap();
    let eval = ["--checkpoint", ckpt, "--steps=2", "--restarts=1"];
    let out = clbp(root.path(), &with_small("eval", &eval));
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("baseline") && stdout.contains("clbp"));
    let csv = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["clbp"]["n"], 12);

    let sweep = ["--checkpoint", ckpt, "--steps=1", "--axis", "restarts", "--values", "1,2"];
    assert!(clbp(root.path(), &with_small("sweep", &sweep)).status.success());
    let csv = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = clbp(root.path(), &with_small("verify", &["--checkpoint", ckpt, "--steps=1"]));
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("margin_lemma") && stdout.contains("convergence"));
    assert!(run.join("verify.json").exists() && run.join("depth.csv").exists());
}

#[test]
fn config_files_and_bad_input() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.json");
    std::fs::write(&cfg, r#"{"name": "from_file", "task": {"n_train": 16, "n_test": 4}, "train": {"epochs": 1}}"#).unwrap();
    let out = clbp(root.path(), &["train", cfg.to_str().unwrap(), "--train.batch_size=16", "--train.train_views=2"]);
    assert!(out.status.success());
    let saved = std::fs::read_to_string(root.path().join("from_file/config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&saved).unwrap();
    assert_eq!(v["task"]["n_train"], 16);
    assert_eq!(v["train"]["batch_size"], 16);

    for bad in [
        vec!["train", "--train.no_such_key=1"],
        vec!["train", "--train.epochs=many"],
        vec!["eval", "--eps=-1"],
        vec!["explode"],
    ] {
        let out = clbp(root.path(), &bad);
        assert!(!out.status.success(), "{bad:?}");
    }
    std::fs::write(&cfg, "{\"name\": ").unwrap();
    assert!(!clbp(root.path(), &["train", cfg.to_str().unwrap()]).status.success());
}
