//! Cross-replica redundancy: which instructions provably compute the same
//! value on every replica.
//!
//! Sources are constants, iota, replica_equal entry parameters and
//! all-reduces (or all-gathers) spanning every replica. Tuple values keep a
//! verdict per element so loop-carried state is tracked slot by slot; an
//! instruction is Redundant when every element of its value is.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use serde_json::{json, Value as Json};

use crate::ir::{Computation, FusionKind, Instruction, Module, Op, ReplicaGroups, Type};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Redundant,
    NonRedundant,
}

impl Verdict {
    pub fn is_redundant(self) -> bool {
        self == Verdict::Redundant
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Redundant => "redundant",
            Verdict::NonRedundant => "non_redundant",
        }
    }
}

/// Verdict per leaf of a (possibly tuple) value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    Leaf(bool),
    Tuple(Vec<Tree>),
}

impl Tree {
    pub fn uniform(ty: &Type, v: bool) -> Tree {
        match ty {
            Type::Array(_) => Tree::Leaf(v),
            Type::Tuple(ts) => Tree::Tuple(ts.iter().map(|t| Tree::uniform(t, v)).collect()),
        }
    }

    pub fn all(&self) -> bool {
        match self {
            Tree::Leaf(v) => *v,
            Tree::Tuple(ts) => ts.iter().all(Tree::all),
        }
    }

    fn and(&self, other: &Tree) -> Tree {
        match (self, other) {
            (Tree::Tuple(a), Tree::Tuple(b)) if a.len() == b.len() => {
                Tree::Tuple(a.iter().zip(b).map(|(x, y)| x.and(y)).collect())
            }
            _ => Tree::Leaf(self.all() && other.all()),
        }
    }

    fn element(&self, i: usize) -> Tree {
        match self {
            Tree::Tuple(ts) => ts.get(i).cloned().unwrap_or(Tree::Leaf(false)),
            Tree::Leaf(v) => Tree::Leaf(*v),
        }
    }

    fn falsify(&self) -> Tree {
        match self {
            Tree::Leaf(_) => Tree::Leaf(false),
            Tree::Tuple(ts) => Tree::Tuple(ts.iter().map(Tree::falsify).collect()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RedundancyMap {
    verdicts: BTreeMap<String, Verdict>,
    trees: HashMap<String, Tree>,
    /// Parameter verdicts of each nested computation.
    pub parameters: BTreeMap<String, Vec<Verdict>>,
}

impl RedundancyMap {
    pub fn get(&self, name: &str) -> Option<Verdict> {
        self.verdicts.get(name).copied()
    }

    pub fn is_redundant(&self, name: &str) -> bool {
        self.get(name).is_some_and(Verdict::is_redundant)
    }

    /// Per-element verdicts of a tuple-valued instruction.
    pub fn tree(&self, name: &str) -> Option<&Tree> {
        self.trees.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Verdict)> {
        self.verdicts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn count(&self, v: Verdict) -> usize {
        self.verdicts.values().filter(|&&x| x == v).count()
    }

    pub fn to_json(&self) -> Json {
        let map: serde_json::Map<String, Json> =
            self.verdicts.iter().map(|(k, v)| (k.clone(), json!(v.as_str()))).collect();
        json!({
            "instructions": map,
            "summary": {
                "redundant": self.count(Verdict::Redundant),
                "non_redundant": self.count(Verdict::NonRedundant),
                "total": self.len(),
            }
        })
    }

    /// Records `t`, only ever lowering an existing verdict. A computation
    /// called from several sites ends with the conjunction of its uses.
    fn record(&mut self, name: &str, t: &Tree) {
        let t = match self.trees.get(name) {
            Some(old) => old.and(t),
            None => t.clone(),
        };
        let v = if t.all() { Verdict::Redundant } else { Verdict::NonRedundant };
        self.verdicts.insert(name.to_string(), v);
        self.trees.insert(name.to_string(), t);
    }
}

fn spans_all(groups: &ReplicaGroups, n: usize) -> bool {
    groups.is_all() || groups.resolve(n).iter().any(|g| g.len() == n)
}

struct Analyzer<'m> {
    m: &'m Module,
    map: RedundancyMap,
}

impl<'m> Analyzer<'m> {
    /// Analyzes `c` with the given parameter verdicts and returns the root's.
    fn computation(&mut self, c: &'m Computation, params: &[Tree]) -> Tree {
        if c.name != self.m.entry {
            let vs = params.iter().map(|t| if t.all() { Verdict::Redundant } else { Verdict::NonRedundant });
            let merged: Vec<Verdict> = match self.map.parameters.get(&c.name) {
                Some(old) => old
                    .iter()
                    .zip(vs)
                    .map(|(a, b)| if a.is_redundant() && b.is_redundant() { *a } else { Verdict::NonRedundant })
                    .collect(),
                None => vs.collect(),
            };
            self.map.parameters.insert(c.name.clone(), merged);
        }
        let mut env: HashMap<&str, Tree> = HashMap::new();
        let order = c.topo_order().unwrap_or_else(|_| c.instructions.iter().collect());
        for i in order {
            let t = self.instruction(c, i, params, &env);
            self.map.record(&i.name, &t);
            env.insert(&i.name, t);
        }
        env.remove(c.root.as_str()).unwrap_or(Tree::Leaf(false))
    }

    fn operands(&self, i: &Instruction, env: &HashMap<&str, Tree>) -> Vec<Tree> {
        i.operands.iter().map(|o| env.get(o.as_str()).cloned().unwrap_or(Tree::Leaf(false))).collect()
    }

    fn instruction(&mut self, c: &'m Computation, i: &'m Instruction, params: &[Tree], env: &HashMap<&str, Tree>) -> Tree {
        let n = self.m.replica_count;
        let ops = self.operands(i, env);
        let all_ops = ops.iter().all(Tree::all);
        let uniform = |v: bool| Tree::uniform(&i.ty, v);
        match &i.op {
            Op::Parameter { index, replica_equal } => {
                if c.name == self.m.entry {
                    uniform(*replica_equal)
                } else {
                    params.get(*index).cloned().unwrap_or_else(|| uniform(false))
                }
            }
            Op::Constant(_) | Op::Iota { .. } => uniform(true),
            Op::ReplicaId | Op::Rng | Op::Outfeed => uniform(false),
            Op::AllReduce { groups, .. } => uniform(spans_all(groups, n)),
            Op::Fusion(FusionKind::Unshard { specs }) => {
                uniform(specs.first().is_some_and(|s| spans_all(&s.group, n)))
            }
            Op::Fusion(FusionKind::Shard { .. } | FusionKind::ReduceScatter { .. }) => uniform(false),
            Op::Fusion(FusionKind::Loop { calls }) => match self.m.computation(calls) {
                Some(f) => {
                    let root = self.computation(f, &ops);
                    if f.instructions.iter().all(|x| x.op.is_pure()) {
                        root
                    } else {
                        root.falsify()
                    }
                }
                None => uniform(false),
            },
            Op::Tuple => Tree::Tuple(ops),
            Op::GetTupleElement { index } => ops[0].element(*index),
            Op::While { condition, body } => self.analyze_loop(condition, body, &ops[0]),
            Op::Conditional { branches } => self.analyze_conditional(branches, &ops),
            _ => uniform(all_ops),
        }
    }

    fn analyze_loop(&mut self, condition: &str, body: &str, init: &Tree) -> Tree {
        let (Some(cond), Some(body)) = (self.m.computation(condition), self.m.computation(body)) else {
            return init.falsify();
        };
        let mut state = init.clone();
        let cond_ok = loop {
            let cond_ok = self.computation(cond, std::slice::from_ref(&state)).all();
            let next = state.and(&self.computation(body, std::slice::from_ref(&state)));
            if next == state {
                break cond_ok;
            }
            state = next;
        };
        if !cond_ok {
            // replicas may run different trip counts
            self.falsify_computation(cond);
            self.falsify_computation(body);
            return state.falsify();
        }
        state
    }

    fn analyze_conditional(&mut self, branches: &[String], ops: &[Tree]) -> Tree {
        let pred_ok = ops.first().is_some_and(Tree::all);
        let mut result: Option<Tree> = None;
        for (k, b) in branches.iter().enumerate() {
            let Some(comp) = self.m.computation(b) else { continue };
            let arg = ops.get(k + 1).cloned().unwrap_or(Tree::Leaf(false));
            let root = self.computation(comp, &[arg]);
            result = Some(match result {
                Some(r) => r.and(&root),
                None => root,
            });
        }
        let result = result.unwrap_or(Tree::Leaf(false));
        if !pred_ok {
            for b in branches {
                if let Some(comp) = self.m.computation(b) {
                    self.falsify_computation(comp);
                }
            }
            return result.falsify();
        }
        result
    }

    fn falsify_computation(&mut self, c: &Computation) {
        for i in &c.instructions {
            self.map.record(&i.name, &Tree::uniform(&i.ty, false));
            for callee in i.op.called_computations() {
                if let Some(nested) = self.m.computation(callee) {
                    self.falsify_computation(nested);
                }
            }
        }
        if let Some(ps) = self.map.parameters.get_mut(&c.name) {
            ps.iter_mut().for_each(|p| *p = Verdict::NonRedundant);
        }
    }
}

/// Redundancy verdicts for every instruction of a verified module.
pub fn analyze(m: &Module) -> RedundancyMap {
    let mut a = Analyzer { m, map: RedundancyMap::default() };
    a.computation(m.entry_computation(), &[]);
    // computations never reached from the entry
    for c in &m.computations {
        if c.instructions.iter().any(|i| a.map.get(&i.name).is_none()) {
            let params: Vec<Tree> = c.parameter_types().iter().map(|t| Tree::uniform(t, false)).collect();
            a.computation(c, &params);
        }
    }
    a.map
}

/// Verdicts inside the loop `w` of `m` given the verdict of its initial
/// tuple; returns the verdict of the loop's result.
pub fn analyze_loop(m: &Module, w: &Instruction, init: &Tree) -> (Tree, RedundancyMap) {
    let mut a = Analyzer { m, map: RedundancyMap::default() };
    let t = match &w.op {
        Op::While { condition, body } => a.analyze_loop(condition, body, init),
        _ => init.falsify(),
    };
    (t, a.map)
}

/// Verdict of a conditional given its operand verdicts (predicate first).
pub fn analyze_conditional(m: &Module, cond: &Instruction, operands: &[Tree]) -> Verdict {
    let mut a = Analyzer { m, map: RedundancyMap::default() };
    let t = match &cond.op {
        Op::Conditional { branches } => a.analyze_conditional(branches, operands),
        _ => Tree::Leaf(false),
    };
    if t.all() {
        Verdict::Redundant
    } else {
        Verdict::NonRedundant
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn entry(n: usize, body: &str) -> Module {
        parse_module(&format!("module N={n} topology=ring {{\nentry computation e () -> f32[] {{\n{body}\n}}\n}}")).unwrap()
    }

    #[test]
    fn sources_and_taint() {
        let m = entry(
            4,
            "%c = f32[] constant(3.0)
  %r = f32[] rng()
  %t = f32[] add(%r, %c)
  %a = f32[] all-reduce(%t), op=add
  %s = f32[] all-reduce(%t), op=add, groups={{0,1},{2,3}}
  %x = f32[] add(%a, %s)
  return (%x)",
        );
        let r = analyze(&m);
        assert!(r.is_redundant("c"));
        assert!(!r.is_redundant("t"));
        assert!(r.is_redundant("a"));
        assert!(!r.is_redundant("s"));
        assert!(!r.is_redundant("x"));
        assert_eq!(r.count(Verdict::Redundant), 2);
    }

    fn looped(cond_extra: &str, cond_pred: &str, grad: &str) -> Module {
        parse_module(&format!(
            "module N=2 topology=ring {{
computation c ((s32[], f32[], f32[])) -> pred[] {{
  %cp = (s32[], f32[], f32[]) parameter(0)
  %ci = s32[] get-tuple-element(%cp), index=0
  %lim = s32[] constant(1000)
  {cond_extra}
  %lt = pred[] compare({cond_pred}, %lim), dir=lt
  return (%lt)
}}
computation b ((s32[], f32[], f32[])) -> (s32[], f32[], f32[]) {{
  %bp = (s32[], f32[], f32[]) parameter(0)
  %bi = s32[] get-tuple-element(%bp), index=0
  %bw = f32[] get-tuple-element(%bp), index=1
  %bg = f32[] get-tuple-element(%bp), index=2
  %nw = f32[] sub(%bw, %bg)
  {grad}
  %one = s32[] constant(1)
  %ni = s32[] add(%bi, %one)
  %nt = (s32[], f32[], f32[]) tuple(%ni, %nw, %ng)
  return (%nt)
}}
entry computation e (f32[], f32[]) -> (s32[], f32[], f32[]) {{
  %w = f32[] parameter(0) {{replica_equal}}
  %g = f32[] parameter(1) {{replica_equal}}
  %i0 = s32[] constant(0)
  %t = (s32[], f32[], f32[]) tuple(%i0, %w, %g)
  %loop = (s32[], f32[], f32[]) while(%t), condition=c, body=b
  return (%loop)
}}
}}"
        ))
        .unwrap()
    }

    #[test]
    fn counter_loop_stays_redundant() {
        let m = looped("", "%ci", "%ng = f32[] add(%bg, %bg)");
        let r = analyze(&m);
        for i in ["bi", "bw", "nw", "ni", "lt", "loop"] {
            assert!(r.is_redundant(i), "{i}");
        }
    }

    #[test]
    fn taint_reaches_weight_after_two_rounds() {
        // round 1: only g is tainted; round 2: w picks it up through nw
        let m = looped("", "%ci", "%rn = f32[] rng()\n  %ng = f32[] add(%bg, %rn)");
        let r = analyze(&m);
        assert!(!r.is_redundant("bg"));
        assert!(!r.is_redundant("bw"));
        assert!(!r.is_redundant("nw"));
        assert!(r.is_redundant("bi"));
        assert_eq!(r.tree("loop"), Some(&Tree::Tuple(vec![Tree::Leaf(true), Tree::Leaf(false), Tree::Leaf(false)])));
    }

    #[test]
    fn replica_varying_condition_taints_whole_loop() {
        let m = looped(
            "%rid = s32[] replica-id()\n  %sum = s32[] add(%ci, %rid)",
            "%sum",
            "%ng = f32[] add(%bg, %bg)",
        );
        let r = analyze(&m);
        for i in ["bi", "bw", "nw", "ni", "one", "lim", "loop"] {
            assert!(!r.is_redundant(i), "{i}");
        }
        assert_eq!(r.parameters["b"], vec![Verdict::NonRedundant]);
    }

    fn conditional(pred: &str, branch_root: &str) -> Module {
        parse_module(&format!(
            "module N=2 topology=ring {{
computation y (f32[]) -> f32[] {{
  %yp = f32[] parameter(0)
  {branch_root}
  return (%yr)
}}
computation n (f32[]) -> f32[] {{
  %np = f32[] parameter(0)
  %nr = f32[] add(%np, %np)
  return (%nr)
}}
entry computation e (f32[]) -> f32[] {{
  %x = f32[] parameter(0) {{replica_equal}}
  {pred}
  %cd = f32[] conditional(%p, %x, %x), branches={{y, n}}
  return (%cd)
}}
}}"
        ))
        .unwrap()
    }

    #[test]
    fn conditional_rules() {
        let pure = "%yr = f32[] sqrt(%yp)";
        let m = conditional("%p = pred[] constant(1)", pure);
        assert!(analyze(&m).is_redundant("cd"));

        let m = conditional("%rid = s32[] replica-id()\n  %z = s32[] constant(0)\n  %p = pred[] compare(%rid, %z), dir=eq", pure);
        let r = analyze(&m);
        assert!(!r.is_redundant("cd"));
        assert!(!r.is_redundant("nr"));

        let m = conditional("%p = pred[] constant(1)", "%rn = f32[] rng()\n  %yr = f32[] add(%yp, %rn)");
        let r = analyze(&m);
        assert!(!r.is_redundant("cd"));
        assert!(r.is_redundant("nr"));
        let e = m.entry_computation();
        let v = analyze_conditional(&m, e.get("cd").unwrap(), &[Tree::Leaf(true), Tree::Leaf(true), Tree::Leaf(true)]);
        assert_eq!(v, Verdict::NonRedundant);
    }

    /// A different valid topological order of every computation.
    fn reordered(m: &Module, seed: u64) -> Module {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = m.clone();
        for c in &mut out.computations {
            let mut pending: Vec<crate::ir::Instruction> = c.instructions.clone();
            let mut done: std::collections::HashSet<String> = Default::default();
            let mut order = Vec::new();
            while !pending.is_empty() {
                let ready: Vec<usize> =
                    (0..pending.len()).filter(|&i| pending[i].operands.iter().all(|o| done.contains(o))).collect();
                let pick = *ready.choose(&mut rng).unwrap();
                let inst = pending.remove(pick);
                done.insert(inst.name.clone());
                order.push(inst);
            }
            c.instructions = order;
        }
        out
    }

    fn redundant_set(m: &Module) -> std::collections::BTreeSet<String> {
        analyze(m).iter().filter(|(_, v)| v.is_redundant()).map(|(n, _)| n.to_string()).collect()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn dropping_an_annotation_never_grows_the_redundant_set(
            cfg in crate::gen::strategies::arb_config(),
            pick in 0usize..16,
        ) {
            let m = crate::gen::generate(&cfg).unwrap();
            let before = redundant_set(&m);
            let mut stripped = m.clone();
            let e = stripped.entry_computation_mut();
            let annotated: Vec<usize> = (0..e.instructions.len())
                .filter(|&i| matches!(e.instructions[i].op, Op::Parameter { replica_equal: true, .. }))
                .collect();
            if !annotated.is_empty() {
                let i = annotated[pick % annotated.len()];
                if let Op::Parameter { replica_equal, .. } = &mut e.instructions[i].op {
                    *replica_equal = false;
                }
            }
            proptest::prop_assert!(redundant_set(&stripped).is_subset(&before));
        }

        #[test]
        fn verdicts_do_not_depend_on_visit_order(cfg in crate::gen::strategies::arb_config(), seed in 0u64..1000) {
            let m = crate::gen::generate(&cfg).unwrap();
            let a: Vec<(String, Verdict)> = analyze(&m).iter().map(|(n, v)| (n.to_string(), v)).collect();
            let b: Vec<(String, Verdict)> = analyze(&reordered(&m, seed)).iter().map(|(n, v)| (n.to_string(), v)).collect();
            proptest::prop_assert_eq!(a, b);
        }

        #[test]
        fn redundant_values_agree_across_replicas(cfg in crate::gen::strategies::arb_config(), seed in 0u64..1000) {
            use crate::simulator::{inputs::random_inputs, run, RunOptions};
            let m = crate::gen::generate(&cfg).unwrap();
            let r = run(&m, &random_inputs(&m, seed), &RunOptions { trace: true, ..Default::default() }).unwrap();
            for (name, v) in analyze(&m).iter() {
                proptest::prop_assert!(!(v.is_redundant() && r.divergent.contains(name)), "{} diverged", name);
            }
        }
    }
}
