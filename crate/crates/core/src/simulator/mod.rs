//! Deterministic lockstep multi-replica interpreter.
//!
//! All replicas advance through each computation instruction by instruction.
//! Loops and conditionals run on the subset of replicas that take them;
//! collectives require every member of each participating group to be
//! present, otherwise the program would deadlock and the run fails.

pub mod collective;
pub mod cost;
mod kernels;
pub mod inputs;
pub mod memory;
pub mod value;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::{Computation, FusionKind, Instruction, Module, Op, ReplicaGroups, Type};
use kernels::LocalCtx;
pub use collective::{all_reduce, ring_all_gather, ring_reduce_scatter, RingStats};
pub use cost::{cost, CollectiveCost, CostModel, CostReport};
pub use memory::{peak_memory, MemoryReport};
pub use value::{round, round_f16r, Tensor, Value};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub max_iterations: u64,
    /// Evaluate replicas on the rayon pool; results are identical to the
    /// sequential mode.
    pub parallel: bool,
    /// Record which instructions produced differing values across replicas.
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: 0, max_iterations: 1_000_000, parallel: false, trace: false }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunResult {
    /// Entry root value of each replica.
    pub outputs: Vec<Value>,
    /// Outfeed log of each replica: (instruction, value) in program order.
    pub outfeeds: Vec<Vec<(String, Value)>>,
    /// With tracing: instructions that ran at least once.
    pub observed: BTreeSet<String>,
    /// With tracing: instructions whose values differed across replicas, or
    /// that ran on only some of them.
    pub divergent: BTreeSet<String>,
}

impl RunResult {
    pub fn bitwise_eq(&self, other: &RunResult) -> bool {
        self.outputs.len() == other.outputs.len()
            && self.outputs.iter().zip(&other.outputs).all(|(a, b)| a.bitwise_eq(b))
            && self.outfeeds.len() == other.outfeeds.len()
            && self.outfeeds.iter().zip(&other.outfeeds).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && x.1.bitwise_eq(&y.1))
            })
    }
}

/// Runs the entry computation on every replica. `inputs[r]` holds replica
/// r's entry arguments.
pub fn run(m: &Module, inputs: &[Vec<Value>], opts: &RunOptions) -> Result<RunResult> {
    let n = m.replica_count;
    if inputs.len() != n {
        return Err(Error::Invalid(format!("expected inputs for {n} replicas, got {}", inputs.len())));
    }
    let entry = m.computation(&m.entry).ok_or_else(|| Error::Invalid("module has no entry".into()))?;
    check_inputs(entry, inputs)?;
    let mut engine = Engine {
        m,
        opts,
        plans: HashMap::new(),
        outfeeds: vec![Vec::new(); n],
        counters: vec![HashMap::new(); n],
        observed: BTreeSet::new(),
        divergent: BTreeSet::new(),
    };
    let active: Vec<usize> = (0..n).collect();
    let outputs = engine.exec(entry, &active, inputs.to_vec())?;
    Ok(RunResult { outputs, outfeeds: engine.outfeeds, observed: engine.observed, divergent: engine.divergent })
}

fn check_inputs(entry: &Computation, inputs: &[Vec<Value>]) -> Result<()> {
    let params = entry.parameters();
    for (r, args) in inputs.iter().enumerate() {
        if args.len() != params.len() {
            return Err(Error::Invalid(format!(
                "replica {r}: expected {} arguments, got {}",
                params.len(),
                args.len()
            )));
        }
        for (p, a) in params.iter().zip(args) {
            if a.ty() != p.ty {
                return Err(Error::Invalid(format!(
                    "replica {r}: argument %{} is {}, expected {}",
                    p.name,
                    a.ty(),
                    p.ty
                )));
            }
        }
    }
    for (k, p) in params.iter().enumerate() {
        if let Op::Parameter { replica_equal: true, .. } = p.op {
            if inputs.iter().any(|args| !args[k].bitwise_eq(&inputs[0][k])) {
                return Err(Error::Invalid(format!(
                    "replica_equal violation: %{} differs across replicas",
                    p.name
                )));
            }
        }
    }
    Ok(())
}

/// Per-computation lookup tables.
struct Plan {
    operands: Vec<Vec<usize>>,
    /// Slots whose last use is instruction i.
    frees: Vec<Vec<usize>>,
    root: usize,
}

impl Plan {
    fn new(c: &Computation) -> Result<Plan> {
        let idx = c.index();
        let mut operands = Vec::with_capacity(c.instructions.len());
        let mut last = vec![usize::MAX; c.instructions.len()];
        for (i, inst) in c.instructions.iter().enumerate() {
            let mut ops = Vec::new();
            for o in &inst.operands {
                let j = *idx.get(o.as_str()).ok_or_else(|| Error::UndefinedReference {
                    name: o.clone(),
                    context: format!("computation {}", c.name),
                })?;
                if j >= i {
                    return Err(Error::Simulation(format!("%{} used before definition in {}", o, c.name)));
                }
                last[j] = i;
                ops.push(j);
            }
            operands.push(ops);
        }
        let root = *idx.get(c.root.as_str()).ok_or_else(|| Error::UndefinedReference {
            name: c.root.clone(),
            context: format!("root of {}", c.name),
        })?;
        let mut frees = vec![Vec::new(); c.instructions.len()];
        for (j, &l) in last.iter().enumerate() {
            if l != usize::MAX && j != root {
                frees[l].push(j);
            }
        }
        Ok(Plan { operands, frees, root })
    }
}

struct Engine<'a> {
    m: &'a Module,
    opts: &'a RunOptions,
    plans: HashMap<String, Arc<Plan>>,
    outfeeds: Vec<Vec<(String, Value)>>,
    counters: Vec<HashMap<String, u64>>,
    observed: BTreeSet<String>,
    divergent: BTreeSet<String>,
}

fn sim(msg: impl Into<String>) -> Error {
    Error::Simulation(msg.into())
}

impl<'a> Engine<'a> {
    fn plan(&mut self, c: &Computation) -> Result<Arc<Plan>> {
        if let Some(p) = self.plans.get(&c.name) {
            return Ok(p.clone());
        }
        let p = Arc::new(Plan::new(c)?);
        self.plans.insert(c.name.clone(), p.clone());
        Ok(p)
    }

    fn computation(&self, name: &str) -> Result<&'a Computation> {
        self.m.computation(name).ok_or_else(|| sim(format!("computation `{name}` not found")))
    }

    /// Runs `c` on the replicas in `active`; `args[i]` belongs to `active[i]`.
    fn exec(&mut self, c: &'a Computation, active: &[usize], args: Vec<Vec<Value>>) -> Result<Vec<Value>> {
        let plan = self.plan(c)?;
        let k = active.len();
        let mut env: Vec<Vec<Option<Value>>> = vec![vec![None; c.instructions.len()]; k];
        for (i, inst) in c.instructions.iter().enumerate() {
            let operands = |env: &Vec<Vec<Option<Value>>>, a: usize| -> Vec<Value> {
                plan.operands[i].iter().map(|&j| env[a][j].clone().expect("operand evaluated")).collect()
            };
            let results: Vec<Value> = match &inst.op {
                Op::Parameter { index, .. } => (0..k)
                    .map(|a| args[a].get(*index).cloned().ok_or_else(|| sim(format!("missing argument {index}"))))
                    .collect::<Result<_>>()?,
                Op::AllReduce { op, groups } => {
                    let ops: Vec<Vec<Value>> = (0..k).map(|a| operands(&env, a)).collect();
                    self.all_reduce(inst, active, &ops, *op, groups)?
                }
                Op::Fusion(FusionKind::ReduceScatter { op, specs }) => {
                    let ops: Vec<Vec<Value>> = (0..k).map(|a| operands(&env, a)).collect();
                    self.reduce_scatter(inst, active, &ops, *op, specs)?
                }
                Op::Fusion(FusionKind::Unshard { specs }) => {
                    let ops: Vec<Vec<Value>> = (0..k).map(|a| operands(&env, a)).collect();
                    self.all_gather(inst, active, &ops, specs)?
                }
                Op::Fusion(FusionKind::Loop { calls }) => {
                    let callee = self.computation(calls)?;
                    let ops: Vec<Vec<Value>> = (0..k).map(|a| operands(&env, a)).collect();
                    self.exec(callee, active, ops)?
                }
                Op::While { condition, body } => {
                    let states: Vec<Value> = (0..k).map(|a| operands(&env, a).remove(0)).collect();
                    self.run_while(inst, condition, body, active, states)?
                }
                Op::Conditional { branches } => {
                    let ops: Vec<Vec<Value>> = (0..k).map(|a| operands(&env, a)).collect();
                    self.run_conditional(inst, branches, active, ops)?
                }
                Op::Outfeed => {
                    for (a, &r) in active.iter().enumerate() {
                        let v = operands(&env, a).remove(0);
                        self.outfeeds[r].push((inst.name.clone(), v));
                    }
                    vec![Value::unit(); k]
                }
                _ => {
                    let invocations: Vec<u64> = active
                        .iter()
                        .map(|&r| {
                            let c = self.counters[r].entry(inst.name.clone()).or_insert(0);
                            *c += 1;
                            *c - 1
                        })
                        .collect();
                    let ops: Vec<Vec<Value>> = (0..k).map(|a| operands(&env, a)).collect();
                    let m = self.m;
                    let seed = self.opts.seed;
                    let eval = |a: usize| -> Result<Value> {
                        let ctx = LocalCtx {
                            replica: active[a],
                            seed,
                            invocation: invocations[a],
                            tiling: m.tiling,
                            topology: &m.topology,
                        };
                        let refs: Vec<&Value> = ops[a].iter().collect();
                        kernels::eval(inst, &refs, &ctx)
                    };
                    if self.opts.parallel {
                        (0..k).into_par_iter().map(eval).collect::<Result<Vec<_>>>()?
                    } else {
                        (0..k).map(eval).collect::<Result<Vec<_>>>()?
                    }
                }
            };
            if self.opts.trace {
                self.observed.insert(inst.name.clone());
                let uniform = active.len() == self.m.replica_count
                    && results.iter().all(|v| v.bitwise_eq(&results[0]));
                if !uniform {
                    self.divergent.insert(inst.name.clone());
                }
            }
            for (a, v) in results.into_iter().enumerate() {
                env[a][i] = Some(v);
            }
            for &j in &plan.frees[i] {
                for slots in env.iter_mut() {
                    slots[j] = None;
                }
            }
        }
        Ok(env.into_iter().map(|mut slots| slots[plan.root].take().expect("root evaluated")).collect())
    }

    fn run_while(
        &mut self,
        inst: &Instruction,
        condition: &str,
        body: &str,
        active: &[usize],
        states: Vec<Value>,
    ) -> Result<Vec<Value>> {
        let cond = self.computation(condition)?;
        let body = self.computation(body)?;
        let mut done: Vec<Option<Value>> = vec![None; active.len()];
        // (position in `active`, state) of replicas still looping
        let mut live: Vec<(usize, Value)> = states.into_iter().enumerate().collect();
        let mut iterations = 0u64;
        loop {
            let ids: Vec<usize> = live.iter().map(|(a, _)| active[*a]).collect();
            let preds = self.exec(cond, &ids, live.iter().map(|(_, s)| vec![s.clone()]).collect())?;
            let mut next = Vec::new();
            for ((a, s), p) in live.into_iter().zip(preds) {
                if p.as_tensor()?.data[0] != 0.0 {
                    next.push((a, s));
                } else {
                    done[a] = Some(s);
                }
            }
            if next.is_empty() {
                break;
            }
            iterations += 1;
            if iterations > self.opts.max_iterations {
                return Err(sim(format!(
                    "%{} did not terminate within {} iterations",
                    inst.name, self.opts.max_iterations
                )));
            }
            let ids: Vec<usize> = next.iter().map(|(a, _)| active[*a]).collect();
            let positions: Vec<usize> = next.iter().map(|(a, _)| *a).collect();
            let out = self.exec(body, &ids, next.into_iter().map(|(_, s)| vec![s]).collect())?;
            live = positions.into_iter().zip(out).collect();
        }
        Ok(done.into_iter().map(|d| d.expect("loop finished")).collect())
    }

    fn run_conditional(
        &mut self,
        inst: &Instruction,
        branches: &[String],
        active: &[usize],
        ops: Vec<Vec<Value>>,
    ) -> Result<Vec<Value>> {
        let mut chosen = Vec::with_capacity(active.len());
        for o in &ops {
            let p = o[0].as_tensor()?;
            let b = if p.shape.etype == crate::ir::ElementType::Pred {
                if p.data[0] != 0.0 {
                    0
                } else {
                    1
                }
            } else {
                let i = p.data[0];
                if i < 0.0 || i as usize >= branches.len() {
                    branches.len() - 1
                } else {
                    i as usize
                }
            };
            chosen.push(b);
        }
        let mut out: Vec<Option<Value>> = vec![None; active.len()];
        for (b, name) in branches.iter().enumerate() {
            let members: Vec<usize> = (0..active.len()).filter(|&a| chosen[a] == b).collect();
            if members.is_empty() {
                continue;
            }
            let comp = self.computation(name)?;
            let ids: Vec<usize> = members.iter().map(|&a| active[a]).collect();
            let args: Vec<Vec<Value>> = members.iter().map(|&a| vec![ops[a][b + 1].clone()]).collect();
            let res = self.exec(comp, &ids, args)?;
            for (a, v) in members.into_iter().zip(res) {
                out[a] = Some(v);
            }
        }
        if out.iter().any(Option::is_none) {
            return Err(sim(format!("%{}: branch produced no value", inst.name)));
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    /// Checks that every group touched by `active` is complete.
    fn rendezvous(&self, inst: &Instruction, active: &[usize], groups: &ReplicaGroups, need_all: bool) -> Result<()> {
        let n = self.m.replica_count;
        let present: BTreeSet<usize> = active.iter().copied().collect();
        let ok = if need_all {
            present.len() == n
        } else {
            groups.resolve(n).iter().all(|g| {
                let hit = g.iter().filter(|r| present.contains(r)).count();
                hit == 0 || hit == g.len()
            })
        };
        if ok {
            Ok(())
        } else {
            Err(sim(format!(
                "collective %{} reached by only replicas {:?} of its group; the program would deadlock",
                inst.name, active
            )))
        }
    }

    fn all_reduce(
        &mut self,
        inst: &Instruction,
        active: &[usize],
        ops: &[Vec<Value>],
        op: crate::ir::ReduceKind,
        groups: &ReplicaGroups,
    ) -> Result<Vec<Value>> {
        self.rendezvous(inst, active, groups, groups.is_all())?;
        let n = self.m.replica_count;
        let pos: HashMap<usize, usize> = active.iter().enumerate().map(|(a, &r)| (r, a)).collect();
        let nops = ops[0].len();
        let mut per_operand: Vec<Vec<Option<Tensor>>> = vec![vec![None; active.len()]; nops];
        for (o, slot) in per_operand.iter_mut().enumerate() {
            let et = ops[0][o].as_tensor()?.shape.etype;
            let shape = ops[0][o].as_tensor()?.shape.clone();
            for g in groups.resolve(n) {
                if !pos.contains_key(&g[0]) {
                    continue;
                }
                let get = |r: usize| -> Arc<[f64]> { ops[pos[&r]][o].as_tensor().expect("array operand").data.clone() };
                let folded: Arc<[f64]> = collective::fold_group(&self.m.topology, groups, &g, &get, op, et).into();
                for r in &g {
                    slot[pos[r]] = Some(Tensor { shape: shape.clone(), data: folded.clone() });
                }
            }
        }
        Ok((0..active.len())
            .map(|a| {
                let mut vs: Vec<Value> =
                    per_operand.iter().map(|p| Value::Array(p[a].clone().expect("folded"))).collect();
                if vs.len() == 1 {
                    vs.remove(0)
                } else {
                    Value::Tuple(vs)
                }
            })
            .collect())
    }

    fn reduce_scatter(
        &mut self,
        inst: &Instruction,
        active: &[usize],
        ops: &[Vec<Value>],
        op: crate::ir::ReduceKind,
        specs: &[crate::sharding_spec::ShardingSpec],
    ) -> Result<Vec<Value>> {
        self.rendezvous(inst, active, &ReplicaGroups::All, true)?;
        let mut per: Vec<Vec<Value>> = vec![Vec::new(); active.len()];
        for (o, spec) in specs.iter().enumerate() {
            let mut values = vec![Vec::new(); self.m.replica_count];
            for (a, &r) in active.iter().enumerate() {
                values[r] = ops[a][o].as_tensor()?.data.to_vec();
            }
            let (shards, _) = ring_reduce_scatter(&values, spec, &self.m.topology, op, self.m.tiling)?;
            for (a, &r) in active.iter().enumerate() {
                per[a].push(Value::Array(Tensor::new(spec.shard_shape(), shards[r].clone())));
            }
        }
        Ok(pack(per))
    }

    fn all_gather(
        &mut self,
        inst: &Instruction,
        active: &[usize],
        ops: &[Vec<Value>],
        specs: &[crate::sharding_spec::ShardingSpec],
    ) -> Result<Vec<Value>> {
        self.rendezvous(inst, active, &ReplicaGroups::All, true)?;
        let mut per: Vec<Vec<Value>> = vec![Vec::new(); active.len()];
        for (o, spec) in specs.iter().enumerate() {
            let mut shards = vec![Vec::new(); self.m.replica_count];
            for (a, &r) in active.iter().enumerate() {
                shards[r] = ops[a][o].as_tensor()?.data.to_vec();
            }
            let (full, _) = ring_all_gather(&shards, spec, &self.m.topology, self.m.tiling)?;
            for (a, &r) in active.iter().enumerate() {
                per[a].push(Value::Array(Tensor::new(spec.source.clone(), full[r].clone())));
            }
        }
        Ok(pack(per))
    }
}

fn pack(per: Vec<Vec<Value>>) -> Vec<Value> {
    per.into_iter()
        .map(|mut vs| if vs.len() == 1 { vs.remove(0) } else { Value::Tuple(vs) })
        .collect()
}

/// Zero-filled value of a type.
pub fn zeros(ty: &Type) -> Value {
    match ty {
        Type::Array(s) => Value::Array(Tensor::splat(s.clone(), 0.0)),
        Type::Tuple(ts) => Value::Tuple(ts.iter().map(zeros).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, ElementType, Shape};

    fn scalar(v: f64) -> Value {
        Value::Array(Tensor::scalar(ElementType::F32, v))
    }

    #[test]
    fn all_reduce_of_two_replicas() {
        let m = parse_module(
            "module N=2 topology=ring {
entry computation e (f32[]) -> f32[] {
  %p = f32[] parameter(0)
  %a = f32[] all-reduce(%p), op=add
  return (%a)
}
}",
        )
        .unwrap();
        let r = run(&m, &[vec![scalar(1.0)], vec![scalar(2.0)]], &RunOptions::default()).unwrap();
        assert!(r.outputs.iter().all(|o| o.bitwise_eq(&scalar(3.0))));
    }

    #[test]
    fn while_counts_to_five() {
        let m = parse_module(
            "module N=3 topology=ring {
computation c (s32[]) -> pred[] {
  %ci = s32[] parameter(0)
  %five = s32[] constant(5)
  %lt = pred[] compare(%ci, %five), dir=lt
  return (%lt)
}
computation b (s32[]) -> s32[] {
  %bi = s32[] parameter(0)
  %one = s32[] constant(1)
  %nx = s32[] add(%bi, %one)
  return (%nx)
}
entry computation e () -> s32[] {
  %z = s32[] constant(0)
  %w = s32[] while(%z), condition=c, body=b
  return (%w)
}
}",
        )
        .unwrap();
        let r = run(&m, &[vec![], vec![], vec![]], &RunOptions::default()).unwrap();
        let five = Value::Array(Tensor::scalar(ElementType::S32, 5.0));
        assert!(r.outputs.iter().all(|o| o.bitwise_eq(&five)));
    }

    #[test]
    fn replica_equal_inputs_are_checked() {
        let m = parse_module(
            "module N=2 topology=ring {
entry computation e (f32[]) -> f32[] {
  %p = f32[] parameter(0) {replica_equal}
  return (%p)
}
}",
        )
        .unwrap();
        let err = run(&m, &[vec![scalar(1.0)], vec![scalar(2.0)]], &RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("replica_equal"));
    }

    #[test]
    fn divergent_loop_with_collective_fails() {
        let m = parse_module(
            "module N=2 topology=ring {
computation c (s32[]) -> pred[] {
  %ci = s32[] parameter(0)
  %id = s32[] replica-id()
  %lt = pred[] compare(%ci, %id), dir=lt
  return (%lt)
}
computation b (s32[]) -> s32[] {
  %bi = s32[] parameter(0)
  %s = s32[] all-reduce(%bi), op=add
  %one = s32[] constant(1)
  %nx = s32[] add(%bi, %one)
  return (%nx)
}
entry computation e () -> s32[] {
  %z = s32[] constant(0)
  %w = s32[] while(%z), condition=c, body=b
  return (%w)
}
}",
        )
        .unwrap();
        let err = run(&m, &[vec![], vec![]], &RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("deadlock"), "{err}");
    }

    #[test]
    fn parallel_matches_sequential() {
        let m = parse_module(
            "module N=4 topology=mesh 2x2 {
entry computation e (f32[8]) -> f32[8] {
  %p = f32[8] parameter(0)
  %r = f32[8] rng()
  %x = f32[8] mul(%p, %r)
  %a = f32[8] all-reduce(%x), op=add
  return (%a)
}
}",
        )
        .unwrap();
        let inputs: Vec<Vec<Value>> = (0..4)
            .map(|r| vec![Value::Array(Tensor::splat(Shape::new(ElementType::F32, vec![8]), r as f64 + 0.5))])
            .collect();
        let seq = run(&m, &inputs, &RunOptions { seed: 3, ..Default::default() }).unwrap();
        let par = run(&m, &inputs, &RunOptions { seed: 3, parallel: true, ..Default::default() }).unwrap();
        assert!(seq.bitwise_eq(&par));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn runs_are_deterministic(cfg in crate::gen::strategies::arb_config(), seed in 0u64..1000) {
            let m = crate::gen::generate(&cfg).unwrap();
            let ins = inputs::random_inputs(&m, seed);
            let o = RunOptions { seed, ..Default::default() };
            let a = run(&m, &ins, &o).unwrap();
            proptest::prop_assert!(a.bitwise_eq(&run(&m, &ins, &o).unwrap()));
            let par = RunOptions { parallel: true, ..o.clone() };
            proptest::prop_assert!(a.bitwise_eq(&run(&m, &ins, &par).unwrap()));
        }
    }
}
