use std::path::Path;
use std::process::{Command, Output};

fn tokenflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenflow"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tokenflow(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--model", "tiny", "--scenarios", "6", "--frames", "16"];

fn generate(dir: &Path, data: &str, seed: &str) -> serde_json::Value {
    let mut args = vec!["generate", "--dataset", data, "--seed", seed];
    args.extend_from_slice(SMALL);
    serde_json::from_str(&ok(dir, &args)).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(tmp.path(), "a", "5");
    let b = generate(tmp.path(), "b", "5");
    let c = generate(tmp.path(), "c", "6");
    assert_eq!(a["manifest_sha256"], b["manifest_sha256"]);
    assert_ne!(a["manifest_sha256"], c["manifest_sha256"]);
    assert_eq!(a["samples"], 6 * 15);
    assert_eq!(
        std::fs::read(tmp.path().join("a/records.bin")).unwrap(),
        std::fs::read(tmp.path().join("b/records.bin")).unwrap()
    );
}

#[test]
fn train_eval_benchmark_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir, "data", "1");
    let config = "# small run\nepochs = 1\nbatch = 8\ntrain_samples = 16\nval_samples = 8\nlr = 1e-3\nbench_runs = 3\n";
    std::fs::write(dir.join("run.cfg"), config).unwrap();
    let common = ["--config", "run.cfg", "--dataset", "data", "--model", "tiny"];

    let mut args = vec!["train", "--out", "run", "--gamma-prime", "0.5"];
    args.extend_from_slice(&common);
    let records: serde_json::Value = serde_json::from_str(&ok(dir, &args)).unwrap();
    assert_eq!(records[0]["gamma_prime"], 0.5);
    for f in ["model.ckpt", "metrics.json", "keep_ratios.csv", "flops.json"] {
        assert!(dir.join("run").join(f).is_file(), "{f}");
    }

    let mut args = vec!["eval", "--out", "run"];
    args.extend_from_slice(&common);
    let report: serde_json::Value = serde_json::from_str(&ok(dir, &args)).unwrap();
    assert_eq!(report["eval"], records[0]["eval"]);

    let mut args = vec!["benchmark", "--out", "run"];
    args.extend_from_slice(&common);
    let csv = ok(dir, &args);
    assert!(csv.starts_with("label,ratio,tokens,median_ms,flops"));
    assert_eq!(csv.lines().count(), 6);

    let mut args = vec!["ablate", "--out", "abl", "--seeds", "1"];
    args.extend_from_slice(&common);
    let csv = ok(dir, &args);
    let modes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["none", "freeze_tokenizers", "random_routing", "uniform_ratio(0.5)"]);
    assert!(dir.join("abl/ablation.json").is_file());
}

#[test]
fn bad_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        vec!["train", "--ablation", "sideways"],
        vec!["train", "--set", "bogus=1"],
        vec!["train", "--set", "no_equals_sign"],
        vec!["train", "--dataset", "missing"],
        vec!["eval", "--checkpoint", "missing.ckpt"],
        vec!["generate", "--config", "missing.cfg"],
    ] {
        let out = tokenflow(dir, &args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn keys_lists_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["keys"]);
    assert!(out.lines().any(|l| l.starts_with("gamma_prime")));
}
