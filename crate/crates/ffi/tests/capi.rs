use std::ffi::{CStr, CString};
use std::ptr;

use serde_json::Value;
use shardgraph_ffi::*;

const ADD: &str = "module N=2 topology=ring {\nentry computation e (s32[2]) -> s32[2] {\n  %x = s32[2] parameter(0)\n  %s = s32[2] all-reduce(%x), op=add\n  return (%s)\n}\n}\n";

fn take(s: *mut std::ffi::c_char) -> String {
    let t = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { sg_string_free(s) };
    t
}

fn parse(text: &str) -> *mut SgModule {
    let c = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sg_module_parse(c.as_ptr(), &mut m) }, SgStatus::Ok);
    m
}

fn mlp() -> String {
    let mut cfg = shardgraph::gen::GenConfig::new(shardgraph::gen::Model::Mlp, 4);
    cfg.loop_steps = Some(2);
    cfg.weights = Some(vec![shardgraph::gen::WeightSpec { shape: vec![8, 128], rows: 4 }]);
    shardgraph::ir::print_module(&shardgraph::gen::generate(&cfg).unwrap())
}

#[test]
fn parse_print_round_trip() {
    let m = parse(ADD);
    assert_eq!(unsafe { sg_module_replicas(m) }, 2);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sg_module_print(m, &mut out) }, SgStatus::Ok);
    let text = take(out);
    let again = parse(&text);
    unsafe {
        sg_module_free(m);
        sg_module_free(again);
    }
}

#[test]
fn errors_set_status_and_message() {
    let bad = CString::new("module N=2 {").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sg_module_parse(bad.as_ptr(), &mut m) }, SgStatus::Parse);
    assert!(m.is_null());
    let msg = unsafe { CStr::from_ptr(sg_last_error()) }.to_str().unwrap();
    assert!(msg.contains("syntax error"), "{msg}");

    assert_eq!(unsafe { sg_module_parse(ptr::null(), &mut m) }, SgStatus::NullArgument);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sg_cost(ptr::null(), ptr::null(), &mut out) }, SgStatus::NullArgument);

    let m = parse(ADD);
    let cm = CString::new(r#"{"mem_bandwidth": -1, "link_bandwidth": 1, "per_message_latency": 0}"#).unwrap();
    assert_eq!(unsafe { sg_cost(m, cm.as_ptr(), &mut out) }, SgStatus::Invalid);
    unsafe { sg_module_free(m) };
}

#[test]
fn simulate_with_inputs() {
    let m = parse(ADD);
    let ins = CString::new(r#"{"replicas": [[{"type": "s32[2]", "data": [1, 2]}], [{"type": "s32[2]", "data": [10, 20]}]]}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sg_simulate(m, ins.as_ptr(), 0, &mut out) }, SgStatus::Ok);
    let j: Value = serde_json::from_str(&take(out)).unwrap();
    let data: Vec<f64> = serde_json::from_value(j["replicas"][0]["data"].clone()).unwrap();
    assert_eq!(data, [11.0, 22.0]);
    unsafe { sg_module_free(m) };
}

#[test]
fn analyze_transform_and_cost() {
    let m = parse(&mlp());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sg_analyze(m, false, ptr::null(), &mut out) }, SgStatus::Ok);
    let j: Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(j["instructions"]["g0"], "redundant");
    assert_eq!(unsafe { sg_analyze(m, true, ptr::null(), &mut out) }, SgStatus::Ok);
    let j: Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(j["summary"]["clusters"], 1);

    let mut t = ptr::null_mut();
    assert_eq!(unsafe { sg_transform(m, true, ptr::null(), &mut t) }, SgStatus::Ok);
    assert_eq!(unsafe { sg_transform_manifest(t, &mut out) }, SgStatus::Ok);
    let manifest: Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(manifest["decisions"][0]["decision"], "shard");
    let mut main = ptr::null_mut();
    assert_eq!(unsafe { sg_transform_program(t, SgProgram::Main, &mut main) }, SgStatus::Ok);
    assert_eq!(unsafe { sg_module_print(main, &mut out) }, SgStatus::Ok);
    assert!(take(out).contains("reduce-scatter"));

    assert_eq!(unsafe { sg_cost(main, ptr::null(), &mut out) }, SgStatus::Ok);
    let c: Value = serde_json::from_str(&take(out)).unwrap();
    assert!(c["memory"]["peak"].as_u64().unwrap() > 0);
    unsafe {
        sg_module_free(main);
        sg_transform_free(t);
        sg_module_free(m);
        sg_string_free(ptr::null_mut());
    }
}
