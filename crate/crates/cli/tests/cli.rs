use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deps-cli"))
}

fn tiny() -> Value {
    json!({
        "seed": 3,
        "world": {"n_users": 20, "n_items": 15, "horizon": 600},
        "model": {"dim": 8, "layers": 1, "heads": 2, "max_len": 10},
        "training": {"n_p": 1, "n_u": 2, "n_b": 1, "batch_size": 64, "mlm_batch": 16},
        "oracle": {"replications": 1000, "accesses": 5, "clips": [0.1]},
        "sweep_clips": [0.05, 0.1],
        "sweep_alphas": [0.0, 1.0]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let p = dir.join("c.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.display().to_string()
}

fn run(args: &[&str], config: &str, out: &Path) -> Output {
    bin()
        .args(args)
        .args(["--config", config, "--out"])
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(
        o.status.success(),
        "stdout {text}\nstderr {}",
        String::from_utf8_lossy(&o.stderr)
    );
    text
}

#[test]
fn commands_compose_into_a_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    for step in ["simulate", "split", "train", "eval"] {
        ok(&run(&[step], &cfg, &out));
    }
    for f in [
        "config.json",
        "log.tsv",
        "hidden.tsv",
        "world.json",
        "dataset.json",
        "train.tsv",
        "valid.tsv",
        "test.tsv",
        "split.json",
        "model.ckpt",
        "model.json",
        "training_run.json",
        "training_trace.jsonl",
        "metrics.tsv",
        "metrics.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let echo: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 3);
    assert_eq!(echo["world"]["seed"], 3);
    assert_eq!(echo["training"]["alpha"], 0.5);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metadata"]["ips_mode"], "dual");
    assert_eq!(metrics["policy"], "all_unseen_items");
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    ok(&run(&["simulate"], &cfg, &out));
    ok(&run(&["split"], &cfg, &out));
    ok(&run(&["train"], &cfg, &out));
    let trace = fs::read(out.join("training_trace.jsonl")).unwrap();
    let ckpt = fs::read(out.join("model.ckpt")).unwrap();
    ok(&run(&["train"], &cfg, &out));
    assert_eq!(fs::read(out.join("training_trace.jsonl")).unwrap(), trace);
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    let o = bin()
        .args(["simulate", "--config", &cfg, "--seed", "11", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    ok(&o);
    let echo: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 11);
    assert_eq!(echo["split"]["seed"], 11);
}

#[test]
fn unknown_keys_fail_validation_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c["training"]["learning_rate"] = json!(0.1);
    let cfg = write_config(dir.path(), &c);
    let o = run(&["simulate"], &cfg, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let mut c = tiny();
    c["training"]["alpha"] = json!(2.0);
    let cfg = write_config(dir.path(), &c);
    let o = run(&["simulate"], &cfg, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn bad_arguments_and_missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let o = run(&["eval"], &cfg, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_training_is_an_invariant_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c["training"]["lr_propensity"] = json!(1e300);
    c["training"]["lr"] = json!(1e300);
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    ok(&run(&["simulate"], &cfg, &out));
    ok(&run(&["split"], &cfg, &out));
    let o = run(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn verify_reports_small_bias_on_default_world() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"oracle": {"replications": 2000, "accesses": 10}}));
    let out = dir.path().join("run");
    ok(&run(&["verify"], &cfg, &out));
    let reports: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 3 + 3 * 3);
    for r in &reports {
        if r["clip"] == 0.0 {
            assert!(r["relative_bias"].as_f64().unwrap().abs() < 0.02);
        }
        assert_eq!(r["variance"]["bound_violations"], 0);
    }
}

#[test]
fn ablation_covers_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    ok(&run(&["ablate"], &cfg, &out));
    let modes = ["dual", "item_only", "user_only", "none", "frequency_dual"];
    for m in modes {
        let t: Value =
            serde_json::from_str(&fs::read_to_string(out.join("ablate").join(m).join("metrics.json")).unwrap())
                .unwrap();
        assert_eq!(t["metadata"]["ips_mode"], m);
        assert_eq!(t["metadata"]["stage1"], "true");
    }
    let t: Value = serde_json::from_str(
        &fs::read_to_string(out.join("ablate").join("dual_no_stage1").join("metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(t["metadata"]["stage1"], "false");
    let summary = fs::read_to_string(out.join("ablate.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 6);
}

#[test]
fn sweeps_write_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    ok(&run(&["sweep", "--key", "alpha", "--values", "0.25,0.75"], &cfg, &out));
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("sweep_alpha.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["alpha"], 0.75);
    ok(&run(&["sweep", "--key", "clip"], &cfg, &out));
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("sweep_clip.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1]["bias"].as_f64().unwrap() >= rows[0]["bias"].as_f64().unwrap());
}

#[test]
fn external_logs_are_remapped() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("raw.tsv");
    let mut text = String::new();
    for t in 0..200 {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            100 + t % 7,
            5000 + (t * 3) % 11,
            t,
            (t % 3 != 0) as u8
        ));
    }
    fs::write(&data, text).unwrap();
    let mut c = tiny();
    c["data"] = json!(data.display().to_string());
    c["split"] = json!({"gamma": 0.0});
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    for step in ["split", "train", "eval"] {
        ok(&run(&[step], &cfg, &out));
    }
    let d: Value = serde_json::from_str(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(d["user_count"], 7);
    assert_eq!(d["item_count"], 11);
    assert_eq!(d["ids"]["users"][0], 100);
    let o = run(&["verify"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
}
