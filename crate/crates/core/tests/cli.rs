use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shardgraph")).args(args).env_remove("SHARDGRAPH_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = sg(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn gen(dir: &Path, name: &str, args: &[&str]) -> String {
    let p = dir.join(name).to_str().unwrap().to_string();
    let mut a = vec!["gen"];
    a.extend(args);
    a.extend(["-o", &p]);
    ok(&a);
    p
}

#[test]
fn gen_mlp_has_two_weights_adam_and_a_loop() {
    let text = ok(&["gen", "mlp", "--layers", "2"]);
    assert_eq!(text.matches(" all-reduce(").count(), 2);
    assert!(text.contains(" while("));
    assert!(text.contains("%nv0"), "ADAM second moment");
    assert_eq!(ok(&["gen", "mlp", "--layers", "2"]), text, "deterministic");
}

#[test]
fn gen_rejects_unknown_model() {
    let o = sg(&["gen", "perceptron"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown model"));
}

#[test]
fn analyze_reports_verdicts_and_decisions() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.ir", &["mlp"]);
    let j: Value = serde_json::from_str(&ok(&["analyze", &m])).unwrap();
    assert_eq!(j["instructions"]["g0"], "redundant");
    assert_eq!(j["instructions"]["gl0.mat"], "non_redundant");
    let p: Value = serde_json::from_str(&ok(&["analyze", &m, "--profit"])).unwrap();
    let c = &p["clusters"][0];
    for k in ["members", "frontier", "benefit_sec", "cost_sec", "decision", "groups"] {
        assert!(!c[k].is_null(), "{k}");
    }
}

#[test]
fn transform_writes_three_programs_and_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.ir", &["mlp", "--replicas", "8"]);
    let out = d.path().join("out");
    ok(&["transform", &m, "--out-dir", out.to_str().unwrap(), "--force", "--batch"]);
    for f in ["main.ir", "shard.ir", "unshard.ir", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["variables"].as_array().unwrap().iter().any(|v| v["residency"] == "sharded-across-steps"));
    let main = std::fs::read_to_string(out.join("main.ir")).unwrap();
    assert!(main.contains("kind=reduce-scatter"));
    // the written program parses and runs
    let sim: Value = serde_json::from_str(&ok(&["simulate", out.join("shard.ir").to_str().unwrap()])).unwrap();
    assert_eq!(sim["replicas"].as_array().unwrap().len(), 8);
}

#[test]
fn simulate_is_seeded() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.ir", &["mlp", "--replicas", "2", "--steps", "1"]);
    let a = ok(&["simulate", &m, "--seed", "5"]);
    assert_eq!(a, ok(&["simulate", &m, "--seed", "5"]));
    assert_ne!(a, ok(&["simulate", &m, "--seed", "6"]));
    let env = Command::new(env!("CARGO_BIN_EXE_shardgraph")).args(["simulate", &m]).env("SHARDGRAPH_SEED", "5").output().unwrap();
    assert_eq!(String::from_utf8(env.stdout).unwrap(), a);
}

#[test]
fn simulate_reads_inputs_and_writes_outputs() {
    let d = tempfile::tempdir().unwrap();
    let m = d.path().join("add.ir");
    std::fs::write(
        &m,
        "module N=2 topology=ring {\nentry computation e (s32[2]) -> s32[2] {\n  %x = s32[2] parameter(0)\n  %s = s32[2] all-reduce(%x), op=add\n  return (%s)\n}\n}\n",
    )
    .unwrap();
    let ins = d.path().join("in.json");
    std::fs::write(&ins, r#"{"replicas": [[{"type": "s32[2]", "data": [1, 2]}], [{"type": "s32[2]", "data": [10, 20]}]]}"#).unwrap();
    let out = d.path().join("out.json");
    ok(&["simulate", m.to_str().unwrap(), "--inputs", ins.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    let j: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(j["replicas"][1]["data"], serde_json::json!([11, 22]));
}

#[test]
fn cost_honors_model_overrides() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.ir", &["mlp", "--replicas", "8"]);
    let base: Value = serde_json::from_str(&ok(&["cost", &m])).unwrap();
    let slow: Value = serde_json::from_str(&ok(&["cost", &m, "--latency", "1e-3"])).unwrap();
    assert!(slow["collective_time"].as_f64() > base["collective_time"].as_f64());
    assert!(base["memory"]["peak"].as_u64().unwrap() > 0);
    let cm = d.path().join("cm.json");
    std::fs::write(&cm, r#"{"mem_bandwidth": 1e12, "link_bandwidth": 1e11, "per_message_latency": 1e-3}"#).unwrap();
    let file: Value = serde_json::from_str(&ok(&["cost", &m, "--cost-model", cm.to_str().unwrap()])).unwrap();
    assert!(file["compute_time"].as_f64() < base["compute_time"].as_f64());
    assert_eq!(sg(&["cost", &m, "--latency", "-1"]).status.code(), Some(2));
}

#[test]
fn compare_tiny_sgd_and_single_replica() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.ir", &["mlp", "--replicas", "2", "--optimizer", "sgd", "--steps", "2"]);
    let report = d.path().join("r.json");
    let text = ok(&["compare", &m, "--steps", "2", "--json", report.to_str().unwrap()]);
    assert!(text.contains("speedup"));
    let j: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(j["numerics"]["max_abs_diff"], 0.0);
    assert!((j["speedup"].as_f64().unwrap() - 1.0).abs() < 0.1);

    let one: Value = {
        let p = d.path().join("one.json");
        ok(&["compare", &m, "--replicas", "1", "--json", p.to_str().unwrap()]);
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    assert_eq!(one["sharded"], 0);
    assert_eq!(one["speedup"], 1.0);
}

#[test]
fn compare_fails_beyond_tolerance() {
    let d = tempfile::tempdir().unwrap();
    // sharded weight norms sum in a different order
    let m = gen(d.path(), "m.ir", &["mlp", "--replicas", "4", "--optimizer", "lars", "--steps", "2"]);
    let strict = sg(&["compare", &m, "--force", "--steps", "2", "--tolerance", "0"]);
    assert_eq!(strict.status.code(), Some(1));
    ok(&["compare", &m, "--force", "--steps", "2"]);
}

#[test]
fn transformer_like_at_scale_is_faster() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "t.ir", &["transformer-like", "--replicas", "2048", "--topology", "32x64", "--bf16"]);
    let p = d.path().join("r.json");
    ok(&["compare", &m, "--no-simulate", "--json", p.to_str().unwrap()]);
    let j: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    assert!(j["speedup"].as_f64().unwrap() > 1.4);
}
