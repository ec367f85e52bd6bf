//! Peak-memory accounting over one training step.
//!
//! The step computation is the body of the first entry-level while loop, or
//! the entry itself for a step program (whose root tuple has one output per
//! state parameter, parameters `0..n_state`). Accounting model:
//!
//! * every carried state slot is resident for the whole step at its largest
//!   materialization: carried-in size, carried-out size, or the size of an
//!   all-gather of it;
//! * a slot is an auxiliary variable when it is optimizer state (its next
//!   value comes from a gradient all-reduce) and every direct consumer lies in
//!   the update region; all other slots count as weights;
//! * transients are the remaining values of the step computation, live from
//!   definition to last use, excluding compile-time static values and the
//!   update region: the descendants of all-reduce / reduce-scatter
//!   collectives plus the values derived only from optimizer state and
//!   static values that feed them;
//! * nested computations (branches, fusions) are treated as fused into the
//!   instruction that calls them.
//!
//! Inside the loop the peak is W + V + P; outside it the full carried state
//! W + V is resident.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::ir::{FusionKind, Instruction, Module, Op, Type};
use crate::loops::step_info;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    /// W: weights and other resident non-auxiliary state.
    pub weight_bytes: usize,
    /// V: auxiliary variables at their carried size.
    pub aux_bytes: usize,
    /// P: peak of simultaneously live transients.
    pub transient_peak: usize,
    pub inside_peak: usize,
    pub outside_peak: usize,
    pub peak: usize,
    pub weight_slots: Vec<usize>,
    pub aux_slots: Vec<usize>,
}

fn is_static_op(op: &Op) -> bool {
    matches!(op, Op::Constant(_) | Op::Iota { .. } | Op::ReplicaId)
}

pub fn peak_memory(m: &Module) -> MemoryReport {
    let step = step_info(m);
    let (c, w, n_state) = (step.computation, step.while_loop, step.n_state);
    let carried = &step.carried;
    let tiling = m.tiling;
    let bytes = |t: &Type| t.physical_bytes(tiling);
    let outs = step.outputs();
    let by_name: HashMap<&str, &Instruction> = c.instructions.iter().map(|i| (i.name.as_str(), i)).collect();
    let users = c.users();

    // static values
    let mut statics: HashSet<&str> = HashSet::new();
    for i in &c.instructions {
        let pure = i.op.is_pure() || matches!(i.op, Op::ReplicaId);
        if is_static_op(&i.op)
            || (pure
                && !i.operands.is_empty()
                && !matches!(i.op, Op::Parameter { .. } | Op::Rng)
                && i.operands.iter().all(|o| statics.contains(o.as_str())))
        {
            statics.insert(&i.name);
        }
    }

    // update region: descendants of reducing collectives
    let mut region: HashSet<&str> = HashSet::new();
    for i in &c.instructions {
        let reducing = matches!(i.op, Op::AllReduce { .. } | Op::Fusion(FusionKind::ReduceScatter { .. }));
        if i.name != c.root && (reducing || i.operands.iter().any(|o| region.contains(o.as_str()))) {
            region.insert(&i.name);
        }
    }

    // optimizer-state slots: next value computed in the update region
    let optimizer: HashSet<usize> =
        (0..n_state).filter(|&k| outs.get(k).is_some_and(|o| region.contains(o))).collect();
    let opt_carried: HashSet<&str> =
        carried.iter().filter(|(_, k)| optimizer.contains(k)).map(|(n, _)| n.as_str()).collect();

    // values derived only from optimizer state and statics
    let mut derived: HashSet<&str> = HashSet::new();
    for i in &c.instructions {
        if opt_carried.contains(i.name.as_str()) || statics.contains(i.name.as_str()) {
            continue;
        }
        if i.op.is_pure()
            && !i.operands.is_empty()
            && i.operands.iter().all(|o| {
                let o = o.as_str();
                opt_carried.contains(o) || statics.contains(o) || derived.contains(o) || region.contains(o)
            })
        {
            derived.insert(&i.name);
        }
    }
    // ...that feed the update region
    loop {
        let mut grew = false;
        for i in c.instructions.iter().rev() {
            let n = i.name.as_str();
            if derived.contains(n) && !region.contains(n) && users[n].iter().any(|u| region.contains(u)) {
                region.insert(n);
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }

    // all-gathers of carried values (possibly through a convert)
    let mut gathered: HashMap<&str, usize> = HashMap::new();
    for i in &c.instructions {
        if let Op::Fusion(FusionKind::Unshard { .. }) = i.op {
            for o in &i.operands {
                let mut src = o.as_str();
                if let Some(x) = by_name.get(src) {
                    if matches!(x.op, Op::Convert) {
                        src = x.operands[0].as_str();
                    }
                }
                if let Some(&k) = carried.get(src) {
                    gathered.insert(&i.name, k);
                }
            }
        }
    }

    let mut resident = vec![0usize; n_state];
    let mut weight = vec![false; n_state];
    for (name, &k) in carried {
        if k >= n_state {
            continue;
        }
        resident[k] = resident[k].max(bytes(&by_name[name.as_str()].ty));
        let outside_use = users[name.as_str()].iter().any(|u| !region.contains(u) && *u != c.root);
        if outside_use || !optimizer.contains(&k) {
            weight[k] = true;
        }
    }
    for (k, o) in outs.iter().enumerate() {
        if let Some(i) = by_name.get(o) {
            resident[k] = resident[k].max(bytes(&i.ty));
        }
    }
    for (g, &k) in &gathered {
        resident[k] = resident[k].max(bytes(&by_name[g].ty));
    }
    // carried slots with no reader in the body are still resident
    if let Some(w) = w {
        if let Some(ts) = w.ty.as_tuple() {
            for (k, t) in ts.iter().enumerate().take(n_state) {
                if !carried.values().any(|&s| s == k) {
                    resident[k] = resident[k].max(bytes(t));
                    weight[k] = true;
                }
            }
        }
    }

    let weight_slots: Vec<usize> = (0..n_state).filter(|&k| weight[k]).collect();
    let aux_slots: Vec<usize> = (0..n_state).filter(|&k| !weight[k]).collect();
    let weight_bytes: usize = weight_slots.iter().map(|&k| resident[k]).sum();
    let aux_bytes: usize = aux_slots.iter().map(|&k| resident[k]).sum();

    // transient liveness
    let out_set: HashSet<&str> = outs.iter().copied().collect();
    let idx = c.index();
    let mut intervals: Vec<(usize, usize, usize)> = Vec::new();
    for (pos, i) in c.instructions.iter().enumerate() {
        let n = i.name.as_str();
        let excluded = carried.contains_key(n)
            || statics.contains(n)
            || region.contains(n)
            || gathered.contains_key(n)
            || out_set.contains(n)
            || n == c.root
            || matches!(i.op, Op::Parameter { .. } if w.is_some())
            || matches!(i.op, Op::Tuple | Op::GetTupleElement { .. });
        if excluded {
            continue;
        }
        let last = users[n].iter().filter_map(|u| idx.get(u)).copied().max().unwrap_or(pos);
        intervals.push((pos, last, bytes(&i.ty)));
    }
    let mut transient_peak = 0;
    for p in 0..c.instructions.len() {
        let live: usize = intervals.iter().filter(|(s, e, _)| *s <= p && p <= *e).map(|(_, _, b)| b).sum();
        transient_peak = transient_peak.max(live);
    }

    let inside_peak = weight_bytes + aux_bytes + transient_peak;
    let outside_peak = match w {
        Some(w) => {
            let e = m.entry_computation();
            e.get(&w.operands[0]).map_or(0, |init| match init.ty.as_tuple() {
                Some(ts) => ts.iter().map(bytes).sum(),
                None => bytes(&init.ty),
            })
        }
        None => 0,
    };
    MemoryReport {
        weight_bytes,
        aux_bytes,
        transient_peak,
        inside_peak,
        outside_peak,
        peak: inside_peak.max(outside_peak),
        weight_slots,
        aux_slots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn sgd_step_program_splits_weight_and_transients() {
        // w' = w - lr * allreduce(x . w-shaped gradient)
        let m = parse_module(
            "module N=2 topology=ring {
entry computation e (f32[8,128], f32[8,128]) -> (f32[8,128]) {
  %w = f32[8,128] parameter(0) {replica_equal}
  %x = f32[8,128] parameter(1)
  %g = f32[8,128] mul(%x, %w)
  %s = f32[8,128] all-reduce(%g), op=add
  %lr = f32[] constant(0.1)
  %lrb = f32[8,128] broadcast(%lr), dims={}
  %u = f32[8,128] mul(%lrb, %s)
  %nw = f32[8,128] sub(%w, %u)
  %t = (f32[8,128]) tuple(%nw)
  return (%t)
}
}",
        )
        .unwrap();
        let r = peak_memory(&m);
        assert_eq!(r.weight_slots, vec![0]);
        assert_eq!(r.weight_bytes, 4096);
        assert_eq!(r.aux_bytes, 0);
        // x and g overlap at the mul
        assert_eq!(r.transient_peak, 8192);
        assert_eq!(r.peak, 4096 + 8192);
    }
}
