//! Structural verifier: per-opcode shape rules and control-flow signatures.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::instr::{FusionKind, Instruction, Literal, Op};
use super::module::{Computation, Module};
use super::shape::{ElementType, Shape, Type};
use crate::error::{Error, Result};
use crate::sharding_spec::ShardingSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub instruction: String,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}: {}: {}", self.instruction, self.rule, self.message)
    }
}

/// Runs every check and fails with the collected diagnostics.
pub fn verify(m: &Module) -> Result<()> {
    let diags = diagnostics(m);
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::Verify(diags))
    }
}

pub fn diagnostics(m: &Module) -> Vec<Diagnostic> {
    let mut v = Verifier { m, out: Vec::new() };
    v.module();
    v.out
}

struct Verifier<'a> {
    m: &'a Module,
    out: Vec<Diagnostic>,
}

fn arr(t: &Type) -> Option<&Shape> {
    t.as_array()
}

impl<'a> Verifier<'a> {
    fn diag(&mut self, inst: &str, rule: &str, message: impl Into<String>) {
        self.out.push(Diagnostic { instruction: inst.to_string(), rule: rule.to_string(), message: message.into() });
    }

    fn module(&mut self) {
        let m = self.m;
        if m.replica_count == 0 || m.topology.replica_count() != m.replica_count {
            self.diag("module", "topology", format!("topology {} does not hold N={}", m.topology, m.replica_count));
        }
        if m.computation(&m.entry).is_none() {
            self.diag("module", "entry", format!("entry computation `{}` not found", m.entry));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for c in &m.computations {
            if !seen.insert(c.name.as_str()) {
                self.diag(&c.name, "duplicate id", "computation name reused");
            }
            for i in &c.instructions {
                if !seen.insert(i.name.as_str()) {
                    self.diag(&i.name, "duplicate id", "instruction name reused");
                }
            }
        }
        for c in &m.computations {
            self.computation(c);
        }
    }

    fn computation(&mut self, c: &Computation) {
        let mut defined: HashMap<&str, &Type> = HashMap::new();
        let mut indices = Vec::new();
        for inst in &c.instructions {
            let mut ok = true;
            for o in &inst.operands {
                if !defined.contains_key(o.as_str()) {
                    self.diag(&inst.name, "def before use", format!("operand %{o} is not defined earlier in {}", c.name));
                    ok = false;
                }
            }
            if let Op::Parameter { index, replica_equal } = inst.op {
                indices.push(index);
                if replica_equal && c.name != self.m.entry {
                    self.diag(&inst.name, "replica_equal", "annotation is only allowed on entry parameters");
                }
            }
            if ok {
                let ops: Vec<&Type> = inst.operands.iter().map(|o| defined[o.as_str()]).collect();
                self.instruction(inst, &ops);
            }
            defined.insert(&inst.name, &inst.ty);
        }
        indices.sort_unstable();
        if indices.iter().enumerate().any(|(k, &i)| k != i) {
            self.diag(&c.name, "parameter numbering", format!("parameter indices {indices:?} are not 0..n"));
        }
        if !defined.contains_key(c.root.as_str()) {
            self.diag(&c.name, "root", format!("root %{} is not defined", c.root));
        }
    }

    fn expect_eq(&mut self, inst: &Instruction, rule: &str, want: &Type) {
        if &inst.ty != want {
            self.diag(&inst.name, rule, format!("result is {} but rule gives {}", inst.ty, want));
        }
    }

    fn arity(&mut self, inst: &Instruction, ops: &[&Type], n: usize) -> bool {
        if ops.len() != n {
            self.diag(&inst.name, "arity", format!("`{}` expects {n} operand(s), got {}", inst.op.opcode(), ops.len()));
            return false;
        }
        true
    }

    fn arrays<'t>(&mut self, inst: &Instruction, ops: &[&'t Type]) -> Option<Vec<&'t Shape>> {
        let mut out = Vec::new();
        for (k, t) in ops.iter().enumerate() {
            match arr(t) {
                Some(s) => out.push(s),
                None => {
                    self.diag(&inst.name, "operand type", format!("operand {k} must be an array, got {t}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn callee(&mut self, inst: &Instruction, name: &str) -> Option<&'a Computation> {
        let c = self.m.computation(name);
        if c.is_none() {
            self.diag(&inst.name, "undefined computation", format!("`{name}` not found"));
        }
        c
    }

    fn instruction(&mut self, inst: &Instruction, ops: &[&Type]) {
        let name = inst.name.as_str();
        let out = arr(&inst.ty).cloned();
        match &inst.op {
            Op::Parameter { .. } => {
                self.arity(inst, ops, 0);
            }
            Op::Constant(lit) => {
                if !self.arity(inst, ops, 0) {
                    return;
                }
                match (&out, lit) {
                    (None, _) => self.diag(name, "constant", "constant must be an array"),
                    (Some(s), Literal::Dense(vs)) if vs.len() != s.element_count() => self.diag(
                        name,
                        "constant",
                        format!("{} values for {} elements", vs.len(), s.element_count()),
                    ),
                    _ => {}
                }
            }
            Op::Iota { dim } => {
                if self.arity(inst, ops, 0) {
                    match &out {
                        Some(s) if *dim < s.rank() => {}
                        _ => self.diag(name, "iota", "iota dim out of range"),
                    }
                }
            }
            Op::ReplicaId => {
                if self.arity(inst, ops, 0) {
                    self.expect_eq(inst, "replica-id", &Type::array(ElementType::S32, vec![]));
                }
            }
            Op::Rng => {
                if self.arity(inst, ops, 0) && !out.as_ref().is_some_and(|s| s.etype.is_float()) {
                    self.diag(name, "rng", "rng produces a float array");
                }
            }
            Op::Binary(_) => {
                if !self.arity(inst, ops, 2) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                if s[0] != s[1] {
                    self.diag(name, "elementwise operands", format!("{} vs {}", s[0], s[1]));
                } else if s[0].etype == ElementType::Pred {
                    self.diag(name, "elementwise operands", "arithmetic on pred");
                } else {
                    self.expect_eq(inst, "elementwise result", &Type::Array(s[0].clone()));
                }
            }
            Op::Sqrt => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                if !s[0].etype.is_float() {
                    self.diag(name, "sqrt", "sqrt needs a float operand");
                }
                self.expect_eq(inst, "elementwise result", &Type::Array(s[0].clone()));
            }
            Op::Compare(_) => {
                if !self.arity(inst, ops, 2) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                if s[0] != s[1] {
                    self.diag(name, "compare operands", format!("{} vs {}", s[0], s[1]));
                } else {
                    self.expect_eq(inst, "compare result", &Type::Array(s[0].with_etype(ElementType::Pred)));
                }
            }
            Op::Select => {
                if !self.arity(inst, ops, 3) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                if s[0].etype != ElementType::Pred || s[0].dims != s[1].dims || s[1] != s[2] {
                    self.diag(name, "select operands", format!("select({}, {}, {})", s[0], s[1], s[2]));
                } else {
                    self.expect_eq(inst, "select result", &Type::Array(s[1].clone()));
                }
            }
            Op::Convert => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                if out.as_ref().map(|o| &o.dims) != Some(&s[0].dims) {
                    self.diag(name, "convert", "convert must keep dims");
                }
            }
            Op::Broadcast { dims } => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                let Some(o) = &out else { return self.diag(name, "broadcast", "result must be an array") };
                let ok = dims.len() == s[0].rank()
                    && dims.windows(2).all(|w| w[0] < w[1])
                    && dims.iter().enumerate().all(|(i, &d)| d < o.rank() && o.dims[d] == s[0].dims[i])
                    && o.etype == s[0].etype;
                if !ok {
                    self.diag(name, "broadcast", format!("cannot broadcast {} to {} with dims {dims:?}", s[0], o));
                }
            }
            Op::Dot { lhs_contract, rhs_contract } => {
                if !self.arity(inst, ops, 2) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                let (l, r) = (s[0], s[1]);
                if l.rank() != 2 || r.rank() != 2 || *lhs_contract > 1 || *rhs_contract > 1 {
                    return self.diag(name, "dot", "dot takes rank-2 operands");
                }
                if l.dims[*lhs_contract] != r.dims[*rhs_contract] || l.etype != r.etype {
                    return self.diag(name, "dot", format!("contracting mismatch {l} . {r}"));
                }
                let want = Shape::new(l.etype, vec![l.dims[1 - lhs_contract], r.dims[1 - rhs_contract]]);
                self.expect_eq(inst, "dot result", &Type::Array(want));
            }
            Op::Reduce { dims, .. } => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                let mut sorted = dims.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != dims.len() || dims.iter().any(|&d| d >= s[0].rank()) {
                    return self.diag(name, "reduce", format!("bad reduce dims {dims:?}"));
                }
                let kept: Vec<usize> =
                    (0..s[0].rank()).filter(|d| !dims.contains(d)).map(|d| s[0].dims[d]).collect();
                self.expect_eq(inst, "reduce result", &Type::Array(s[0].with_dims(kept)));
            }
            Op::Reshape => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                let ok = out
                    .as_ref()
                    .is_some_and(|o| o.element_count() == s[0].element_count() && o.etype == s[0].etype);
                if !ok {
                    self.diag(name, "reshape", format!("cannot reshape {} to {}", s[0], inst.ty));
                }
            }
            Op::Bitcast => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                let t = self.m.tiling;
                let ok = out
                    .as_ref()
                    .is_some_and(|o| o.etype == s[0].etype && t.physical_bytes(o) == t.physical_bytes(s[0]));
                if !ok {
                    self.diag(name, "bitcast", format!("{} and {} differ in physical size", s[0], inst.ty));
                }
            }
            Op::Pad { high, .. } => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let Some(s) = self.arrays(inst, ops) else { return };
                if high.len() != s[0].rank() {
                    return self.diag(name, "pad", "pad config rank mismatch");
                }
                let dims: Vec<usize> = s[0].dims.iter().zip(high).map(|(a, b)| a + b).collect();
                self.expect_eq(inst, "pad result", &Type::Array(s[0].with_dims(dims)));
            }
            Op::DynamicSlice { sizes } => {
                let Some(s) = self.arrays(inst, ops) else { return };
                let Some(first) = s.first() else { return self.diag(name, "arity", "dynamic-slice needs an operand") };
                if s.len() != first.rank() + 1 {
                    return self.diag(
                        name,
                        "arity",
                        format!("`dynamic-slice` expects {} operand(s), got {}", first.rank() + 1, s.len()),
                    );
                }
                if s[1..].iter().any(|i| i.etype != ElementType::S32 || !i.is_scalar()) {
                    return self.diag(name, "dynamic-slice", "start indices must be s32 scalars");
                }
                if sizes.len() != first.rank() || sizes.iter().zip(&first.dims).any(|(a, b)| a > b) {
                    return self.diag(name, "dynamic-slice", format!("bad sizes {sizes:?} for {first}"));
                }
                self.expect_eq(inst, "dynamic-slice result", &Type::Array(first.with_dims(sizes.clone())));
            }
            Op::Tuple => {
                self.expect_eq(inst, "tuple result", &Type::Tuple(ops.iter().map(|t| (*t).clone()).collect()));
            }
            Op::GetTupleElement { index } => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                match ops[0].as_tuple().and_then(|ts| ts.get(*index)) {
                    Some(t) => self.expect_eq(inst, "get-tuple-element result", t),
                    None => self.diag(name, "get-tuple-element", format!("index {index} out of range for {}", ops[0])),
                }
            }
            Op::AllReduce { groups, .. } => {
                if ops.is_empty() {
                    return self.diag(name, "arity", "`all-reduce` expects at least 1 operand");
                }
                if self.arrays(inst, ops).is_none() {
                    return;
                }
                if let Err(e) = groups.validate(self.m.replica_count) {
                    self.diag(name, "groups not disjoint / not covering", e);
                }
                let want = if ops.len() == 1 {
                    ops[0].clone()
                } else {
                    Type::Tuple(ops.iter().map(|t| (*t).clone()).collect())
                };
                self.expect_eq(inst, "all-reduce result", &want);
            }
            Op::While { condition, body } => {
                if !self.arity(inst, ops, 1) {
                    return;
                }
                let t = ops[0];
                if let Some(b) = self.callee(inst, body) {
                    if b.parameter_types() != vec![t.clone()] || b.result_type() != Some(t) {
                        let got = b.result_type().map_or("?".into(), |r| r.to_string());
                        self.diag(name, "while body shape mismatch", format!("body {} is not {t} => {t} (returns {got})", b.name));
                    }
                }
                if let Some(c) = self.callee(inst, condition) {
                    let pred = Type::array(ElementType::Pred, vec![]);
                    if c.parameter_types() != vec![t.clone()] || c.result_type() != Some(&pred) {
                        self.diag(name, "while condition shape mismatch", format!("condition {} is not {t} => pred[]", c.name));
                    }
                }
                self.expect_eq(inst, "while result", t);
            }
            Op::Conditional { branches } => {
                if !self.arity(inst, ops, branches.len() + 1) {
                    return;
                }
                let pred_ok = match arr(ops[0]) {
                    Some(p) if p.is_scalar() && p.etype == ElementType::Pred => branches.len() == 2,
                    Some(p) if p.is_scalar() && p.etype == ElementType::S32 => !branches.is_empty(),
                    _ => false,
                };
                if !pred_ok {
                    self.diag(name, "conditional predicate", "needs pred[] with 2 branches or s32[] index");
                }
                let mut results: Vec<Type> = Vec::new();
                for (k, b) in branches.iter().enumerate() {
                    let Some(c) = self.callee(inst, b) else { continue };
                    if c.parameter_types() != vec![ops[k + 1].clone()] {
                        self.diag(name, "conditional branch argument", format!("branch {b} does not take {}", ops[k + 1]));
                    }
                    if let Some(r) = c.result_type() {
                        results.push(r.clone());
                    }
                }
                if results.windows(2).any(|w| w[0] != w[1]) {
                    let list: Vec<String> = results.iter().map(|t| t.to_string()).collect();
                    self.diag(name, "conditional branch shape mismatch", format!("branches return {}", list.join(" vs ")));
                } else if let Some(r) = results.first() {
                    self.expect_eq(inst, "conditional result", r);
                }
            }
            Op::Fusion(kind) => self.fusion(inst, kind, ops),
            Op::Outfeed => {
                if self.arity(inst, ops, 1) {
                    self.expect_eq(inst, "outfeed result", &Type::unit());
                }
            }
        }
    }

    fn spec_ok(&mut self, inst: &Instruction, spec: &ShardingSpec) {
        if let Err(e) = spec.validate(self.m.tiling) {
            self.diag(&inst.name, "sharding spec", e);
        }
        if let Err(e) = spec.group.validate(self.m.replica_count) {
            self.diag(&inst.name, "groups not disjoint / not covering", e);
        } else if spec.shard_count != spec.group.group_size(self.m.replica_count) && spec.shard_count != 1 {
            self.diag(
                &inst.name,
                "sharding spec",
                format!("shard count {} differs from group size", spec.shard_count),
            );
        }
    }

    fn fusion(&mut self, inst: &Instruction, kind: &FusionKind, ops: &[&Type]) {
        let name = inst.name.as_str();
        let tuple_or_one = |ts: Vec<Type>| if ts.len() == 1 { ts[0].clone() } else { Type::Tuple(ts) };
        match kind {
            FusionKind::Loop { calls } => {
                if let Some(c) = self.callee(inst, calls) {
                    let args: Vec<Type> = ops.iter().map(|t| (*t).clone()).collect();
                    if c.parameter_types() != args {
                        self.diag(name, "fusion signature", format!("operands do not match {}", c.name));
                    }
                    if let Some(r) = c.result_type() {
                        self.expect_eq(inst, "fusion result", r);
                    }
                }
            }
            FusionKind::Shard { spec } => {
                if !self.arity(inst, ops, 2) {
                    return;
                }
                self.spec_ok(inst, spec);
                if ops[0] != &Type::Array(spec.source.clone()) {
                    self.diag(name, "shard operand", format!("{} is not spec source {}", ops[0], spec.source));
                }
                if ops[1] != &Type::array(ElementType::S32, vec![]) {
                    self.diag(name, "shard operand", "second operand must be the replica id");
                }
                self.expect_eq(inst, "shard result", &Type::Array(spec.shard_shape()));
            }
            FusionKind::ReduceScatter { specs, .. } | FusionKind::Unshard { specs } => {
                let scatter = matches!(kind, FusionKind::ReduceScatter { .. });
                if specs.is_empty() || !self.arity(inst, ops, specs.len()) {
                    return;
                }
                for s in specs {
                    self.spec_ok(inst, s);
                }
                if specs.iter().any(|s| s.group != specs[0].group || s.shard_count != specs[0].shard_count) {
                    self.diag(name, "sharding spec", "batched specs disagree on groups or shard count");
                }
                let (ins, outs): (Vec<Type>, Vec<Type>) = specs
                    .iter()
                    .map(|s| (Type::Array(s.source.clone()), Type::Array(s.shard_shape())))
                    .unzip();
                let (want_in, want_out) = if scatter { (ins, outs) } else { (outs, ins) };
                for (k, (got, want)) in ops.iter().zip(&want_in).enumerate() {
                    if *got != want {
                        self.diag(name, "collective fusion operand", format!("operand {k} is {got}, spec wants {want}"));
                    }
                }
                self.expect_eq(inst, "collective fusion result", &tuple_or_one(want_out));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::text::parse_module;

    fn diags(text: &str) -> Vec<Diagnostic> {
        diagnostics(&parse_module(text).unwrap())
    }

    #[test]
    fn while_body_mismatch() {
        let d = diags(
            "module N=1 topology=ring {
computation c (f32[4]) -> pred[] {
  %cp = f32[4] parameter(0)
  %t = pred[] constant(1)
  return (%t)
}
computation b (f32[4]) -> f32[8] {
  %bp = f32[4] parameter(0)
  %z = f32[8] constant(0)
  return (%z)
}
entry computation e (f32[4]) -> f32[4] {
  %p = f32[4] parameter(0)
  %w = f32[4] while(%p), condition=c, body=b
  return (%w)
}
}",
        );
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].rule, "while body shape mismatch");
        assert_eq!(d[0].instruction, "w");
    }

    #[test]
    fn conditional_branch_mismatch() {
        let d = diags(
            "module N=1 topology=ring {
computation a (f32[4]) -> f32[4] {
  %ap = f32[4] parameter(0)
  return (%ap)
}
computation b (f32[4]) -> f32[8] {
  %bp = f32[4] parameter(0)
  %z = f32[8] constant(0)
  return (%z)
}
entry computation e (f32[4], pred[]) -> f32[4] {
  %p = f32[4] parameter(0)
  %q = pred[] parameter(1)
  %c = f32[4] conditional(%q, %p, %p), branches={a, b}
  return (%c)
}
}",
        );
        assert!(d.iter().any(|x| x.rule == "conditional branch shape mismatch"), "{d:?}");
    }

    #[test]
    fn overlapping_groups() {
        let d = diags(
            "module N=4 topology=ring {
entry computation e (f32[4]) -> f32[4] {
  %p = f32[4] parameter(0)
  %a = f32[4] all-reduce(%p), op=add, groups={{0,1},{1,2}}
  return (%a)
}
}",
        );
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, "groups not disjoint / not covering");
    }

    #[test]
    fn shape_rules() {
        let d = diags(
            "module N=1 topology=ring {
entry computation e (f32[4,8], f32[8,2]) -> f32[4,2] {
  %x = f32[4,8] parameter(0)
  %w = f32[8,2] parameter(1)
  %y = f32[4,2] dot(%x, %w), lhs_contract=1, rhs_contract=0
  %bad = f32[4,3] add(%y, %y)
  %r = f32[4] reduce(%y), dims={1}, op=add
  %b = f32[4,2] broadcast(%r), dims={0}
  %s = f32[5,3] bitcast(%x)
  return (%b)
}
}",
        );
        let rules: Vec<&str> = d.iter().map(|x| x.rule.as_str()).collect();
        assert_eq!(rules, ["elementwise result"], "{d:?}");
    }
}
