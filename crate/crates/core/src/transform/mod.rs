//! Rewrites a module per its sharding decisions into a sharding program, a
//! main program and an unsharding program.

mod batch;
mod demote;
mod partial;
mod rewrite;

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{verify, Builder, Computation, Module, Op, Type};
use crate::loops::step_info;
use crate::profitability::{FrontierUse, Placement, ShardingDecision};
use crate::sharding_spec::{build_shard_ops, build_unshard_ops, ShardingSpec};
use crate::simulator::{peak_memory, run, MemoryReport, RunOptions, RunResult, Value};

pub use batch::batch_collectives;
pub use demote::demote_allgather_precision;
pub use partial::apply_partial_sharding;

use rewrite::{Ctx, Rewriter, SlotPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Residency {
    ShardedAcrossSteps,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Weight,
    Auxiliary,
    Replicated,
}

#[derive(Debug, Clone, Serialize)]
pub struct Variable {
    pub slot: usize,
    /// Entry parameter holding the initial value, if any.
    pub parameter: Option<usize>,
    #[serde(rename = "type")]
    pub ty: String,
    pub spec: Option<String>,
    pub residency: Residency,
    pub role: Role,
    #[serde(skip)]
    pub sharding: Option<ShardingSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub variables: Vec<Variable>,
    pub placements: Vec<FrontierUse>,
    pub decisions: Vec<serde_json::Value>,
    pub runtime_contract: String,
}

const CONTRACT: &str = "Run shard.ir once on the initial entry arguments and pass its flattened \
outputs to main.ir. Feed main.ir's outputs back for further steps, and pass them to unshard.ir to \
recover the full state. Sharding is not idempotent: never shard an already sharded state or \
unshard a full one.";

#[derive(Debug, Clone)]
pub struct TransformResult {
    pub main: Module,
    pub shard_program: Module,
    pub unshard_program: Module,
    pub manifest: Manifest,
}

impl Manifest {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }
}

fn check_fresh(step: &Computation, d: &ShardingDecision) -> Result<()> {
    let c = &d.cluster;
    let stale = |what: &str, name: &str| Err(Error::Transform(format!("decision refers to stale {what} `{name}`")));
    if c.computation != step.name {
        return stale("computation", &c.computation);
    }
    match step.get(&c.anchor) {
        Some(i) if matches!(i.op, Op::AllReduce { .. }) && i.operands.first() == Some(&c.gradient) => {}
        _ => return stale("all-reduce", &c.anchor),
    }
    for x in c.members.iter().chain(c.state_inputs.keys()) {
        if step.get(x).is_none() {
            return stale("instruction", x);
        }
    }
    if d.spec.is_none() {
        return Err(Error::Transform(format!("decision for `{}` has no spec", c.anchor)));
    }
    Ok(())
}

/// Rewrites `m` for every decision with `shard` set.
pub fn apply(m: &Module, decisions: &[ShardingDecision]) -> Result<TransformResult> {
    verify(m)?;
    let step = step_info(m);
    let yes: Vec<&ShardingDecision> = decisions.iter().filter(|d| d.shard).collect();
    for d in &yes {
        check_fresh(step.computation, d)?;
    }
    let entry = m.entry_computation();

    // state slot types and the plan
    let slot_types: Vec<Type> = match step.while_loop {
        Some(w) => w.ty.as_tuple().map(<[Type]>::to_vec).unwrap_or_default(),
        None => step.outputs().iter().map(|o| entry.get(o).expect("root operand").ty.clone()).collect(),
    };
    let mut plan: SlotPlan = vec![None; step.n_state];
    for d in &yes {
        for &k in &d.cluster.loop_state_slots {
            if plan[k].is_some() {
                return Err(Error::Transform(format!("state slot {k} claimed by two clusters")));
            }
            plan[k] = d.spec_for(&slot_types[k]);
        }
    }

    let mut b = Builder::for_module(m);
    let mut replaced: Vec<Computation> = Vec::new();
    let mut extra: Vec<Computation> = Vec::new();
    let param_specs: HashMap<String, ShardingSpec>;
    let mut slot_params: HashMap<usize, usize> = HashMap::new();
    let param_index = |n: &str| match entry.get(n).map(|i| &i.op) {
        Some(Op::Parameter { index, .. }) => Some(*index),
        _ => None,
    };

    let root_val = match step.while_loop {
        Some(w) => {
            let (cond_name, body_name) = match &w.op {
                Op::While { condition, body } => (condition, body),
                _ => unreachable!(),
            };
            let body = step.computation;
            let body_param = body.parameters()[0].name.clone();
            let ctx = Ctx {
                decisions: yes.clone(),
                tuple_plans: HashMap::from([(body_param, plan.clone()), (body.root.clone(), plan.clone())]),
                ..Ctx::default()
            };
            let (nb, _, ex) = Rewriter::new(m, body, ctx, &mut b).run()?;
            replaced.push(nb);
            extra.extend(ex);

            let cond = m.computation(cond_name).expect("verified loop condition");
            if cond_name != body_name {
                let ctx = Ctx {
                    tuple_plans: HashMap::from([(cond.parameters()[0].name.clone(), plan.clone())]),
                    ..Ctx::default()
                };
                let (nc, _, _) = Rewriter::new(m, cond, ctx, &mut b).run()?;
                replaced.push(nc);
            }

            let init = entry.get(&w.operands[0]).expect("verified loop init");
            let mut pre = HashMap::new();
            for (k, o) in init.operands.iter().enumerate() {
                if let (Some(spec), Some(idx)) = (&plan[k], param_index(o)) {
                    slot_params.insert(k, idx);
                    pre.entry(o.clone()).or_insert_with(|| spec.clone());
                }
            }
            if !matches!(init.op, Op::Tuple) {
                return Err(Error::Transform(format!("loop `{}` must be initialized by a tuple", w.name)));
            }
            param_specs = pre.clone();
            let ctx = Ctx {
                pre_sharded: pre,
                tuple_plans: HashMap::from([(init.name.clone(), plan.clone()), (w.name.clone(), plan.clone())]),
                keep_root_sharded: true,
                ..Ctx::default()
            };
            let (ne, root, _) = Rewriter::new(m, entry, ctx, &mut b).run()?;
            replaced.push(ne);
            root
        }
        None => {
            let mut pre = HashMap::new();
            for (name, &k) in &step.carried {
                if let Some(spec) = &plan[k] {
                    pre.insert(name.clone(), spec.clone());
                    if let Some(idx) = param_index(name) {
                        slot_params.insert(k, idx);
                    }
                }
            }
            param_specs = pre.clone();
            let ctx = Ctx {
                decisions: yes.clone(),
                pre_sharded: pre,
                tuple_plans: HashMap::from([(entry.root.clone(), plan.clone())]),
                keep_root_sharded: true,
            };
            let (ne, root, ex) = Rewriter::new(m, entry, ctx, &mut b).run()?;
            replaced.push(ne);
            extra.extend(ex);
            root
        }
    };

    let mut main = m.clone();
    for c in replaced {
        let name = c.name.clone();
        *main.computation_mut(&name).expect("rewritten computation exists") = c;
    }
    let at = main.computations.iter().position(|c| c.name == step.computation.name).unwrap_or(0);
    let mut j = 0;
    for c in extra {
        if let Some(slot) = main.computation_mut(&c.name) {
            *slot = c;
        } else {
            main.computations.insert(at + j, c);
            j += 1;
        }
    }
    verify(&main)?;

    let entry_specs: Vec<Option<ShardingSpec>> =
        entry.parameters().iter().map(|p| param_specs.get(&p.name).cloned()).collect();
    let shard_program = shard_program(m, &entry_specs);
    let root_ty = main.entry_computation().root_instruction().expect("entry root").ty.clone();
    let root_specs: SlotPlan = match root_ty.as_tuple() {
        Some(ts) => root_val.elems.clone().unwrap_or_else(|| vec![None; ts.len()]),
        None => vec![root_val.spec.clone()],
    };
    let unshard_program = unshard_program(m, &root_ty, &root_specs);
    verify(&shard_program)?;
    verify(&unshard_program)?;

    let manifest = manifest(&step, &plan, &slot_types, &slot_params, &yes, decisions, m);
    Ok(TransformResult { main, shard_program, unshard_program, manifest })
}

fn program(m: &Module, name: &str, c: Computation) -> Module {
    Module {
        computations: vec![c],
        entry: name.to_string(),
        replica_count: m.replica_count,
        topology: m.topology.clone(),
        steps: m.steps,
        tiling: m.tiling,
    }
}

/// Baseline entry arguments to main's: shards for sharded parameters.
fn shard_program(m: &Module, specs: &[Option<ShardingSpec>]) -> Module {
    let mut b = Builder::new();
    let params = m.entry_computation().parameters();
    let mut outs = Vec::new();
    let names: Vec<String> = params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let eq = matches!(p.op, Op::Parameter { replica_equal: true, .. });
            b.parameter(&p.name, p.ty.clone(), k, eq)
        })
        .collect();
    let mut rid = None;
    for (k, name) in names.iter().enumerate() {
        match &specs[k] {
            Some(spec) => {
                let r = rid.get_or_insert_with(|| b.replica_id("rid")).clone();
                let s = build_shard_ops(&mut b, spec, name, &r);
                outs.push((s, Type::Array(spec.shard_shape())));
            }
            None => outs.push((name.clone(), params[k].ty.clone())),
        }
    }
    let elems: Vec<(&str, Type)> = outs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let root = b.tuple("sharded", &elems);
    program(m, "shard", Computation { name: "shard".into(), instructions: b.take(), root })
}

/// Main's flattened outputs to the baseline result: gathers sharded elements.
fn unshard_program(m: &Module, main_root: &Type, specs: &[Option<ShardingSpec>]) -> Module {
    let mut b = Builder::new();
    let tys: Vec<Type> = match main_root.as_tuple() {
        Some(ts) => ts.to_vec(),
        None => vec![main_root.clone()],
    };
    let mut outs = Vec::new();
    for (k, t) in tys.iter().enumerate() {
        let p = b.parameter(&format!("out{k}"), t.clone(), k, false);
        match &specs[k] {
            Some(spec) => outs.push((build_unshard_ops(&mut b, spec, &p), Type::Array(spec.source.clone()))),
            None => outs.push((p, t.clone())),
        }
    }
    let root = if main_root.as_tuple().is_some() {
        let elems: Vec<(&str, Type)> = outs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        b.tuple("full", &elems)
    } else {
        outs[0].0.clone()
    };
    program(m, "unshard", Computation { name: "unshard".into(), instructions: b.take(), root })
}

fn manifest(
    step: &crate::loops::StepInfo<'_>,
    plan: &SlotPlan,
    slot_types: &[Type],
    slot_params: &HashMap<usize, usize>,
    yes: &[&ShardingDecision],
    all: &[ShardingDecision],
    m: &Module,
) -> Manifest {
    // slots whose carried value is needed in full inside the step
    let mut gathered: HashSet<usize> = HashSet::new();
    for d in yes {
        for f in &d.cluster.frontier {
            if f.placement != Placement::LoopBoundary {
                if let Some(&k) = step.carried.get(&f.value) {
                    gathered.insert(k);
                }
            }
        }
    }
    let mut param_of: HashMap<usize, usize> = slot_params.clone();
    if step.while_loop.is_none() {
        for (name, &k) in &step.carried {
            if let Some(Op::Parameter { index, .. }) = m.entry_computation().get(name).map(|i| &i.op) {
                param_of.entry(k).or_insert(*index);
            }
        }
    }
    let variables = (0..step.n_state)
        .map(|k| {
            let spec = plan[k].clone();
            Variable {
                slot: k,
                parameter: param_of.get(&k).copied(),
                ty: slot_types.get(k).map_or_else(String::new, |t| t.to_string()),
                spec: spec.as_ref().map(|s| s.to_string()),
                residency: if spec.is_some() { Residency::ShardedAcrossSteps } else { Residency::Full },
                role: match (&spec, gathered.contains(&k)) {
                    (None, _) => Role::Replicated,
                    (Some(_), true) => Role::Weight,
                    (Some(_), false) => Role::Auxiliary,
                },
                sharding: spec,
            }
        })
        .collect();
    Manifest {
        variables,
        placements: yes.iter().flat_map(|d| d.cluster.frontier.iter().cloned()).collect(),
        decisions: all.iter().map(ShardingDecision::to_json).collect(),
        runtime_contract: CONTRACT.to_string(),
    }
}

/// Peak memory of a transformed run: the main program's step with the full
/// state materialized at the program boundaries.
pub fn memory_plan(result: &TransformResult) -> MemoryReport {
    let mut r = peak_memory(&result.main);
    let tiling = result.main.tiling;
    let mut full_state = r.weight_bytes + r.aux_bytes;
    for v in &result.manifest.variables {
        if let (Some(spec), true) = (&v.sharding, r.aux_slots.contains(&v.slot)) {
            full_state += Type::Array(spec.source.clone()).physical_bytes(tiling);
            full_state -= Type::Array(spec.shard_shape()).physical_bytes(tiling);
        }
    }
    r.outside_peak = r.outside_peak.max(full_state);
    r.peak = r.inside_peak.max(r.outside_peak);
    r
}

fn flatten(v: &Value) -> Vec<Value> {
    match v {
        Value::Tuple(vs) => vs.clone(),
        v => vec![v.clone()],
    }
}

/// Which entry parameter each flattened output slot replaces between runs.
/// A loop's slots go back to the parameters its initial tuple was built
/// from; other programs pair outputs and parameters by position and type.
pub fn feedback_slots(m: &Module) -> Vec<Option<usize>> {
    let e = m.entry_computation();
    let root = e.get(&e.root).expect("verified root");
    let param = |name: &str| match e.get(name).map(|i| &i.op) {
        Some(Op::Parameter { index, .. }) => Some(*index),
        _ => None,
    };
    if let Op::While { .. } = root.op {
        if let Some(init) = e.get(&root.operands[0]).filter(|i| matches!(i.op, Op::Tuple)) {
            return init.operands.iter().map(|o| param(o)).collect();
        }
    }
    let params = e.parameters();
    let outs: Vec<Type> = match &root.ty {
        Type::Tuple(ts) => ts.clone(),
        t => vec![t.clone()],
    };
    outs.iter()
        .enumerate()
        .map(|(j, t)| params.iter().find(|p| matches!(p.op, Op::Parameter { index, .. } if index == j)).filter(|p| &p.ty == t).map(|_| j))
        .collect()
}

/// Runs `m` `k` times, feeding each run's outputs back per
/// [`feedback_slots`]; other arguments are passed again unchanged.
pub fn run_steps(m: &Module, inputs: &[Vec<Value>], k: usize, opts: &RunOptions) -> Result<RunResult> {
    let slots = feedback_slots(m);
    let mut args = inputs.to_vec();
    let mut outfeeds = vec![Vec::new(); inputs.len()];
    let mut last = None;
    for _ in 0..k.max(1) {
        let r = run(m, &args, opts)?;
        for (rep, log) in r.outfeeds.iter().enumerate() {
            outfeeds[rep].extend(log.iter().cloned());
        }
        for (a, out) in args.iter_mut().zip(&r.outputs) {
            for (slot, y) in slots.iter().zip(flatten(out)) {
                if let Some(p) = slot {
                    a[*p] = y;
                }
            }
        }
        last = Some(r);
    }
    let mut r = last.expect("at least one run");
    r.outfeeds = outfeeds;
    Ok(r)
}

/// Runs the sharding program, `main` `k` times, then the unsharding program.
pub fn run_transformed(result: &TransformResult, inputs: &[Vec<Value>], k: usize, opts: &RunOptions) -> Result<RunResult> {
    let sharded = run(&result.shard_program, inputs, opts)?;
    let args: Vec<Vec<Value>> = sharded.outputs.iter().map(flatten).collect();
    let out = run_steps(&result.main, &args, k, opts)?;
    let flat: Vec<Vec<Value>> = out.outputs.iter().map(flatten).collect();
    let mut full = run(&result.unshard_program, &flat, opts)?;
    full.outfeeds = out.outfeeds;
    Ok(full)
}

#[cfg(test)]
mod tests;
