use std::path::Path;
use std::process::{Command, Output};

use aether_core::eval::MetricsReport;
use aether_core::gnn::Model;
use serde_json::json;

fn aether(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aether"))
        .args(args)
        .env("AETHER_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, seed: &str) {
    let p = dir.to_str().unwrap();
    ok(aether(&["gen", "--setting", "electrostatic", "--train", "4", "--val", "2", "--test", "2", "--seed", seed, "--out", p]));
}

fn write_config(path: &Path, value: serde_json::Value) {
    std::fs::write(path, value.to_string()).unwrap();
}

fn tiny_run(variant: &str) -> serde_json::Value {
    json!({
        "data": "data",
        "out": variant,
        "variant": variant,
        "hidden": 8,
        "train": {"epochs": 1, "batch_size": 2, "chunk": 2, "val_sims": 2, "val_horizon": 2}
    })
}

/// A workspace with a generated dataset and one trained checkpoint.
fn trained(variant: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("data"), "3");
    let cfg = dir.path().join("run.json");
    write_config(&cfg, tiny_run(variant));
    ok(aether(&["train", "--config", cfg.to_str().unwrap()]));
    dir
}

#[test]
fn generation_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "11");
    gen(b.path(), "11");
    let manifest = std::fs::read_to_string(a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read_to_string(b.path().join("manifest.json")).unwrap());
    for split in ["train", "val", "test"] {
        let name = format!("{split}.aeth");
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap()
        );
    }
}

#[test]
fn train_eval_and_field_export() {
    let dir = trained("aether");
    let run = dir.path().join("aether");
    for file in ["checkpoint.aetk", "train_log.csv", "resolved_config.json"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["hidden"], 8);

    let ckpt = run.join("checkpoint.aetk");
    let ckpt = ckpt.to_str().unwrap();
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();
    let metrics_dir = dir.path().join("eval");
    ok(aether(&["eval", "--ckpt", ckpt, "--data", data, "--out", metrics_dir.to_str().unwrap()]));
    let report = MetricsReport::from_json(&std::fs::read_to_string(metrics_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((report.burn_in, report.horizon, report.num_sims), (29, 20, 2));
    assert!(report.mse.contains_key("mse@20"));

    let csv = dir.path().join("field/aether.csv");
    ok(aether(&[
        "field", "--ckpt", ckpt, "--grid", "8", "--out", csv.to_str().unwrap(), "--data", data, "--recovery",
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x,y,fx,fy");
    assert_eq!(lines.count(), 64);
    let rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(csv.with_extension("recovery.json")).unwrap()).unwrap();
    assert!(rec["median_cosine"].as_f64().unwrap().abs() <= 1.0);
}

#[test]
fn locs_has_no_field() {
    let dir = trained("locs");
    let ckpt = dir.path().join("locs/checkpoint.aetk");
    let (model, _) = Model::load(&ckpt).unwrap();
    assert!(model.params.entries().iter().all(|e| !e.name.starts_with("field.")));
    let out = aether(&[
        "field", "--ckpt", ckpt.to_str().unwrap(), "--out", dir.path().join("f.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant locs has no field"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = trained("locs");
    let ckpt = dir.path().join("locs/checkpoint.aetk");
    let ckpt = ckpt.to_str().unwrap();
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();
    let out = dir.path().join("eval");
    let out = out.to_str().unwrap();

    let too_long = aether(&["eval", "--ckpt", ckpt, "--data", data, "--horizon", "30", "--out", out]);
    assert_eq!(code(&too_long), 2);

    let cfg = dir.path().join("eval.json");
    write_config(&cfg, json!({"data": "data", "eval": {"horizon": 10}}));
    let cfg = cfg.to_str().unwrap();
    ok(aether(&["eval", "--ckpt", ckpt, "--config", cfg, "--out", out]));
    let mismatch = aether(&["eval", "--ckpt", ckpt, "--config", cfg, "--horizon", "5", "--out", out]);
    assert_eq!(code(&mismatch), 2);

    let unknown = dir.path().join("unknown.json");
    let mut value = tiny_run("locs");
    value["train"]["learning_rate"] = json!(0.1);
    write_config(&unknown, value);
    assert_eq!(code(&aether(&["train", "--config", unknown.to_str().unwrap()])), 2);

    let conflicting = dir.path().join("conflict.json");
    let mut value = tiny_run("locs");
    value["model"] = serde_json::to_value(Model::load(Path::new(ckpt)).unwrap().0.cfg).unwrap();
    write_config(&conflicting, value);
    let out = aether(&["train", "--config", conflicting.to_str().unwrap(), "--variant", "aether"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn file_errors_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.aetk");
    let out = dir.path().join("eval");
    let data = dir.path().join("data");
    gen(&data, "5");
    let args = |ckpt: &Path| {
        aether(&[
            "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ])
    };
    assert_eq!(code(&args(&missing)), 4);
    let garbage = dir.path().join("garbage.aetk");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&args(&garbage)), 4);
}
