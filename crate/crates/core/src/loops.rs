//! Loop induction variables, trip counts and branch frequencies.

use std::collections::HashMap;

use serde::Serialize;

use crate::ir::{BinaryOp, CompareDir, Computation, Instruction, Literal, Module, Op};

/// The computation that runs once per training step and its carried state.
///
/// With an entry-level while loop this is the loop body and every tuple slot
/// is state. Otherwise the entry is a step program: parameter `k` pairs with
/// element `k` of the root tuple when their types agree.
#[derive(Debug, Clone)]
pub struct StepInfo<'m> {
    pub computation: &'m Computation,
    pub while_loop: Option<&'m Instruction>,
    pub n_state: usize,
    /// Instructions reading carried state: name -> slot.
    pub carried: HashMap<String, usize>,
}

impl StepInfo<'_> {
    /// Operand of the root tuple producing the next value of each slot.
    pub fn outputs(&self) -> Vec<&str> {
        self.computation
            .root_instruction()
            .filter(|r| matches!(r.op, Op::Tuple))
            .map_or(Vec::new(), |r| r.operands.iter().map(String::as_str).collect())
    }
}

pub fn step_info(m: &Module) -> StepInfo<'_> {
    let e = m.entry_computation();
    let w = e.instructions.iter().find(|i| matches!(i.op, Op::While { .. }));
    let body = w.and_then(|w| match &w.op {
        Op::While { body, .. } => m.computation(body),
        _ => None,
    });
    let c = body.unwrap_or(e);
    let root = c.root_instruction().filter(|r| matches!(r.op, Op::Tuple));
    let n_state = root.map_or(0, |r| r.operands.len());
    let mut carried = HashMap::new();
    if body.is_some() {
        for i in &c.instructions {
            if let Op::GetTupleElement { index } = i.op {
                if c.get(&i.operands[0]).is_some_and(|p| matches!(p.op, Op::Parameter { .. })) {
                    carried.insert(i.name.clone(), index);
                }
            }
        }
    } else if let Some(r) = root {
        for i in &c.instructions {
            if let Op::Parameter { index, .. } = i.op {
                let paired = r.operands.get(index).and_then(|o| c.get(o)).is_some_and(|o| o.ty == i.ty);
                if paired {
                    carried.insert(i.name.clone(), index);
                }
            }
        }
    }
    StepInfo { computation: c, while_loop: body.and(w), n_state, carried }
}

/// A counted loop `for i in start..bound step 1` over tuple slot `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Induction {
    pub slot: usize,
    pub start: Option<i64>,
    pub bound: i64,
    pub inclusive: bool,
}

impl Induction {
    pub fn trip_count(&self) -> Option<u64> {
        let start = self.start?;
        let end = if self.inclusive { self.bound + 1 } else { self.bound };
        Some((end - start).max(0) as u64)
    }
}

fn scalar_constant(c: &Computation, name: &str) -> Option<f64> {
    let i = c.get(name)?;
    match &i.op {
        Op::Constant(Literal::Splat(v)) => Some(*v),
        Op::Constant(Literal::Dense(vs)) if vs.len() == 1 => Some(vs[0]),
        Op::Broadcast { .. } => scalar_constant(c, &i.operands[0]),
        Op::Convert | Op::Reshape => scalar_constant(c, &i.operands[0]),
        _ => None,
    }
}

/// Tuple slot read by `name` when it is a get-tuple-element of the
/// computation's parameter.
fn param_slot(c: &Computation, name: &str) -> Option<usize> {
    let i = c.get(name)?;
    match i.op {
        Op::GetTupleElement { index } => {
            let src = c.get(&i.operands[0])?;
            matches!(src.op, Op::Parameter { .. }).then_some(index)
        }
        _ => None,
    }
}

/// Recognizes `slot < bound` in the condition and `slot + 1` in the body.
pub fn induction(m: &Module, host: &Computation, w: &Instruction) -> Option<Induction> {
    let Op::While { condition, body } = &w.op else { return None };
    let cond = m.computation(condition)?;
    let body = m.computation(body)?;
    let root = cond.root_instruction()?;
    let Op::Compare(dir) = root.op else { return None };
    let (lhs, rhs) = (&root.operands[0], &root.operands[1]);
    let (slot, bound, inclusive) = match (param_slot(cond, lhs), scalar_constant(cond, rhs), dir) {
        (Some(s), Some(b), CompareDir::Lt) => (s, b, false),
        (Some(s), Some(b), CompareDir::Le) => (s, b, true),
        _ => match (scalar_constant(cond, lhs), param_slot(cond, rhs), dir) {
            (Some(b), Some(s), CompareDir::Gt) => (s, b, false),
            (Some(b), Some(s), CompareDir::Ge) => (s, b, true),
            _ => return None,
        },
    };
    let broot = body.root_instruction()?;
    if !matches!(broot.op, Op::Tuple) {
        return None;
    }
    let next = body.get(broot.operands.get(slot)?)?;
    let increments = matches!(next.op, Op::Binary(BinaryOp::Add))
        && param_slot(body, &next.operands[0]) == Some(slot)
        && scalar_constant(body, &next.operands[1]) == Some(1.0);
    if !increments {
        return None;
    }
    let start = host
        .get(&w.operands[0])
        .filter(|t| matches!(t.op, Op::Tuple))
        .and_then(|t| t.operands.get(slot))
        .and_then(|s| scalar_constant(host, s))
        .map(|v| v as i64);
    Some(Induction { slot, start, bound: bound as i64, inclusive })
}

pub fn trip_count(m: &Module, host: &Computation, w: &Instruction) -> Option<u64> {
    induction(m, host, w)?.trip_count()
}

/// How often a branch runs per loop iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Frequency {
    /// `num / den` of the iterations.
    Known { num: u64, den: u64 },
    Unknown,
}

impl Frequency {
    /// Fraction of iterations; unknown frequencies count as every iteration.
    pub fn value(&self) -> f64 {
        match *self {
            Frequency::Known { num, den } => num as f64 / den as f64,
            Frequency::Unknown => 1.0,
        }
    }
}

/// Frequency of the first (true) branch of `cond`, which sits in the body of
/// `w`. Recognizes `compare(rem(i, k), c)` over the induction variable.
pub fn estimate_branch_frequency(m: &Module, host: &Computation, cond: &Instruction, w: &Instruction) -> Frequency {
    let Some(ind) = induction(m, host, w) else { return Frequency::Unknown };
    let Op::While { body, .. } = &w.op else { return Frequency::Unknown };
    let Some(body) = m.computation(body) else { return Frequency::Unknown };
    let Some(pred) = cond.operands.first().and_then(|p| body.get(p)) else { return Frequency::Unknown };
    let Op::Compare(dir) = pred.op else { return Frequency::Unknown };
    let Some(rem) = body.get(&pred.operands[0]) else { return Frequency::Unknown };
    if !matches!(rem.op, Op::Binary(BinaryOp::Rem)) || param_slot(body, &rem.operands[0]) != Some(ind.slot) {
        return Frequency::Unknown;
    }
    let (Some(k), Some(c)) = (scalar_constant(body, &rem.operands[1]), scalar_constant(body, &pred.operands[1])) else {
        return Frequency::Unknown;
    };
    if k < 1.0 || k.fract() != 0.0 {
        return Frequency::Unknown;
    }
    let k = k as u64;
    let hits = (c >= 0.0 && c < k as f64 && c.fract() == 0.0) as u64;
    let num = match dir {
        CompareDir::Eq => hits,
        CompareDir::Ne => k - hits,
        _ => return Frequency::Unknown,
    };
    if num == 0 {
        return Frequency::Unknown;
    }
    let g = gcd(num, k);
    Frequency::Known { num: num / g, den: k / g }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Frequency of each branch of a conditional inside `w`.
pub fn branch_frequencies(m: &Module, host: &Computation, cond: &Instruction, w: Option<&Instruction>) -> Vec<f64> {
    let Op::Conditional { branches } = &cond.op else { return Vec::new() };
    let body_cond = w.and_then(|w| match &w.op {
        Op::While { body, .. } => m.computation(body).map(|b| (b, w)),
        _ => None,
    });
    match body_cond {
        Some((_, w)) if branches.len() == 2 => match estimate_branch_frequency(m, host, cond, w) {
            // a branch that is never taken counts as unknown, like in the estimate
            Frequency::Known { num, den } if num < den => {
                let f = num as f64 / den as f64;
                vec![f, 1.0 - f]
            }
            Frequency::Known { .. } => vec![1.0, 1.0],
            Frequency::Unknown => vec![1.0; 2],
        },
        _ => vec![1.0; branches.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn module(pred: &str) -> Module {
        parse_module(&format!(
            "module N=1 topology=ring {{
computation c ((s32[], f32[])) -> pred[] {{
  %cp = (s32[], f32[]) parameter(0)
  %ci = s32[] get-tuple-element(%cp), index=0
  %lim = s32[] constant(3000)
  %lt = pred[] compare(%ci, %lim), dir=lt
  return (%lt)
}}
computation yes (f32[]) -> f32[] {{
  %yp = f32[] parameter(0)
  return (%yp)
}}
computation no (f32[]) -> f32[] {{
  %np = f32[] parameter(0)
  return (%np)
}}
computation b ((s32[], f32[])) -> (s32[], f32[]) {{
  %bp = (s32[], f32[]) parameter(0)
  %bi = s32[] get-tuple-element(%bp), index=0
  %bx = f32[] get-tuple-element(%bp), index=1
  %k = s32[] constant(1000)
  %r = s32[] rem(%bi, %k)
  %zero = s32[] constant(0)
  %half = f32[] constant(0.5)
  {pred}
  %sel = f32[] conditional(%q, %bx, %bx), branches={{yes, no}}
  %one = s32[] constant(1)
  %ni = s32[] add(%bi, %one)
  %nt = (s32[], f32[]) tuple(%ni, %sel)
  return (%nt)
}}
entry computation e (f32[]) -> (s32[], f32[]) {{
  %x = f32[] parameter(0)
  %i0 = s32[] constant(0)
  %t = (s32[], f32[]) tuple(%i0, %x)
  %w = (s32[], f32[]) while(%t), condition=c, body=b
  return (%w)
}}
}}"
        ))
        .unwrap()
    }

    fn freq(m: &Module) -> Frequency {
        let e = m.entry_computation();
        let w = e.get("w").unwrap();
        let b = m.computation("b").unwrap();
        estimate_branch_frequency(m, e, b.get("sel").unwrap(), w)
    }

    #[test]
    fn every_thousandth_step() {
        let m = module("%q = pred[] compare(%r, %zero), dir=eq");
        assert_eq!(freq(&m), Frequency::Known { num: 1, den: 1000 });
        let e = m.entry_computation();
        assert_eq!(trip_count(&m, e, e.get("w").unwrap()), Some(3000));
    }

    #[test]
    fn data_dependent_predicate_is_unknown() {
        let m = module("%q = pred[] compare(%bx, %half), dir=lt");
        assert_eq!(freq(&m), Frequency::Unknown);
    }

    #[test]
    fn mod_one_is_always() {
        let m = module("%k1 = s32[] constant(1)\n  %r1 = s32[] rem(%bi, %k1)\n  %q = pred[] compare(%r1, %zero), dir=eq");
        assert_eq!(freq(&m), Frequency::Known { num: 1, den: 1 });
    }

    proptest::proptest! {
        #[test]
        fn frequencies_lie_in_unit_interval(k in 1i64..50, c in -3i64..60, eq in proptest::bool::ANY) {
            let dir = if eq { "eq" } else { "ne" };
            let m = module(&format!(
                "%kk = s32[] constant({k})\n  %rr = s32[] rem(%bi, %kk)\n  %cc = s32[] constant({c})\n  %q = pred[] compare(%rr, %cc), dir={dir}"
            ));
            if let Frequency::Known { num, den } = freq(&m) {
                proptest::prop_assert!(num > 0 && num <= den);
            }
            let e = m.entry_computation();
            for f in branch_frequencies(&m, e, m.computation("b").unwrap().get("sel").unwrap(), e.get("w")) {
                proptest::prop_assert!(f > 0.0 && f <= 1.0, "{}", f);
            }
        }
    }
}
