//! C ABI for shardgraph.
//!
//! Modules and transform results are opaque handles owned by the caller and
//! released with their `_free` function. Every fallible call returns an
//! [`SgStatus`]; on failure the message is available from [`sg_last_error`]
//! until the next failing call on the same thread. Strings handed out by the
//! library are NUL-terminated UTF-8 and must be released with
//! [`sg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use serde_json::{json, Value as Json};
use shardgraph::ir::{parse_module, print_module, Module};
use shardgraph::profitability::{decide, CostModel, ProfitOptions};
use shardgraph::simulator::{cost, inputs, peak_memory, run, RunOptions};
use shardgraph::transform::{apply, TransformResult};
use shardgraph::{redundancy, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Verify = 4,
    Simulation = 5,
    Transform = 6,
    Invalid = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgProgram {
    Main = 0,
    Shard = 1,
    Unshard = 2,
}

/// A parsed, verified module.
pub struct SgModule(Module);

/// The three programs and manifest produced by a transform.
pub struct SgTransform(TransformResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::Syntax { .. } | Error::DuplicateId(_) | Error::UndefinedReference { .. } | Error::Cycle(_) => SgStatus::Parse,
        Error::Verify(_) => SgStatus::Verify,
        Error::Simulation(_) => SgStatus::Simulation,
        Error::Transform(_) => SgStatus::Transform,
        Error::Invalid(_) | Error::Json(_) => SgStatus::Invalid,
        Error::Io(_) => SgStatus::Io,
    }
}

struct Fail(SgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(SgStatus::Invalid, e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(SgStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Fail(SgStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(SgStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(SgStatus::NullArgument, format!("{what} is null")))
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("NULs were replaced").into_raw()
}

fn json_out(out: &mut *mut c_char, j: &Json) -> Result<(), Fail> {
    *out = into_c(serde_json::to_string(j)?);
    Ok(())
}

unsafe fn cost_model(json: *const c_char) -> Result<CostModel, Fail> {
    if json.is_null() {
        return Ok(CostModel::default());
    }
    let cm: CostModel = serde_json::from_str(str_arg(json, "cost_model")?)?;
    cm.validate().map_err(|e| Fail(SgStatus::Invalid, e))?;
    Ok(cm)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and verifies module text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_module_parse(text: *const c_char, out: *mut *mut SgModule) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = parse_module(str_arg(text, "text")?)?;
        shardgraph::ir::verify(&m)?;
        *out = Box::into_raw(Box::new(SgModule(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_module_free(m: *mut SgModule) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Prints a module in its text form.
///
/// # Safety
/// `m` must be a live module handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_module_print(m: *const SgModule, out: *mut *mut c_char) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = into_c(print_module(&ref_arg(m, "module")?.0));
        Ok(())
    })
}

/// Number of replicas the module runs on, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live module handle.
#[no_mangle]
pub unsafe extern "C" fn sg_module_replicas(m: *const SgModule) -> usize {
    m.as_ref().map_or(0, |m| m.0.replica_count)
}

/// Redundancy verdicts as JSON. With `profit`, the sharding decisions under
/// `cost_model` (JSON, null for defaults) instead.
///
/// # Safety
/// `m` must be a live module handle, `cost_model` null or a NUL-terminated
/// string, and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_analyze(
    m: *const SgModule,
    profit: bool,
    cost_model_json: *const c_char,
    out: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = &ref_arg(m, "module")?.0;
        let j = if profit {
            let d = decide(m, &cost_model(cost_model_json)?, &ProfitOptions::default());
            json!({
                "clusters": d.iter().map(|d| d.to_json()).collect::<Vec<_>>(),
                "summary": {"clusters": d.len(), "sharded": d.iter().filter(|d| d.shard).count()},
            })
        } else {
            redundancy::analyze(m).to_json()
        };
        json_out(out, &j)
    })
}

/// Shards the weight updates the cost model finds profitable, or every
/// supported one with `force`.
///
/// # Safety
/// `m` must be a live module handle, `cost_model` null or a NUL-terminated
/// string, and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_transform(
    m: *const SgModule,
    force: bool,
    cost_model_json: *const c_char,
    out: *mut *mut SgTransform,
) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = &ref_arg(m, "module")?.0;
        let opts = ProfitOptions { force: force.then_some(true), ..Default::default() };
        let r = apply(m, &decide(m, &cost_model(cost_model_json)?, &opts))?;
        *out = Box::into_raw(Box::new(SgTransform(r)));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_transform_free(t: *mut SgTransform) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Copies one of the transformed programs out as a new module handle.
///
/// # Safety
/// `t` must be a live transform handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_transform_program(
    t: *const SgTransform,
    which: SgProgram,
    out: *mut *mut SgModule,
) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = &ref_arg(t, "transform")?.0;
        let m = match which {
            SgProgram::Main => &r.main,
            SgProgram::Shard => &r.shard_program,
            SgProgram::Unshard => &r.unshard_program,
        };
        *out = Box::into_raw(Box::new(SgModule(m.clone())));
        Ok(())
    })
}

/// The transform manifest as JSON.
///
/// # Safety
/// `t` must be a live transform handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_transform_manifest(t: *const SgTransform, out: *mut *mut c_char) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        json_out(out, &ref_arg(t, "transform")?.0.manifest.to_json())
    })
}

/// Runs the module on every replica. Inputs are JSON in the CLI's format, or
/// null for seeded random inputs.
///
/// # Safety
/// `m` must be a live module handle, `inputs_json` null or a NUL-terminated
/// string, and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_simulate(
    m: *const SgModule,
    inputs_json: *const c_char,
    seed: u64,
    out: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = &ref_arg(m, "module")?.0;
        let ins = if inputs_json.is_null() {
            inputs::random_inputs(m, seed)
        } else {
            inputs::from_json(&serde_json::from_str(str_arg(inputs_json, "inputs")?)?)?
        };
        let r = run(m, &ins, &RunOptions::default())?;
        let outfeeds: Vec<Json> = r
            .outfeeds
            .iter()
            .map(|log| log.iter().map(|(n, v)| json!({"instruction": n, "value": v.to_json()})).collect())
            .collect();
        json_out(
            out,
            &json!({
                "replicas": r.outputs.iter().map(|v| v.to_json()).collect::<Vec<_>>(),
                "outfeeds": outfeeds,
            }),
        )
    })
}

/// Modeled run time and peak memory as JSON.
///
/// # Safety
/// `m` must be a live module handle, `cost_model` null or a NUL-terminated
/// string, and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_cost(m: *const SgModule, cost_model_json: *const c_char, out: *mut *mut c_char) -> SgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = &ref_arg(m, "module")?.0;
        let mut j = serde_json::to_value(cost(m, &cost_model(cost_model_json)?))?;
        j["memory"] = serde_json::to_value(peak_memory(m))?;
        json_out(out, &j)
    })
}
