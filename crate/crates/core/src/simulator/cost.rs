//! Serial cost model: memory-bound compute plus ring collectives.
//!
//! Compute and communication do not overlap; the step time is their sum.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::ir::{Computation, FusionKind, Instruction, Module, Op, ReplicaGroups, Shape, Tiling, Topology, Type};
use crate::loops;
use crate::sharding_spec::ShardingSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Bytes per second of local memory traffic.
    pub mem_bandwidth: f64,
    /// Bytes per second per link.
    pub link_bandwidth: f64,
    /// Seconds per message (alpha).
    pub per_message_latency: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { mem_bandwidth: 8e11, link_bandwidth: 5e10, per_message_latency: 1e-6 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.mem_bandwidth > 0.0 && self.link_bandwidth > 0.0 && self.per_message_latency >= 0.0 {
            Ok(())
        } else {
            Err("cost model rates must be positive".into())
        }
    }

    /// Time of `rounds` ring steps moving `piece` bytes each.
    pub fn ring_time(&self, rounds: usize, piece: f64) -> f64 {
        rounds as f64 * (self.per_message_latency + piece / self.link_bandwidth)
    }

    /// Messages smaller than this are dominated by latency.
    pub fn latency_bound_bytes(&self) -> f64 {
        self.per_message_latency * self.link_bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseCost {
    pub ring_size: usize,
    pub rounds: usize,
    pub piece_bytes: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectiveCost {
    pub instruction: String,
    pub kind: String,
    /// Bytes each replica sends per invocation.
    pub bytes_per_replica: f64,
    pub rounds: usize,
    pub max_piece_bytes: f64,
    /// Time of one invocation.
    pub modeled_time: f64,
    /// Invocations per program run (loop trips times branch frequency).
    pub frequency: f64,
    pub latency_bound: bool,
    pub phases: Vec<PhaseCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub collectives: Vec<CollectiveCost>,
    pub compute_time: f64,
    pub collective_time: f64,
    /// compute_time + collective_time over one program run.
    pub total_time: f64,
    /// Training steps one program run performs.
    pub steps: u64,
    pub total_step_time: f64,
    /// Compute time of the instructions passed as the update region.
    pub update_time: f64,
    pub rounds: usize,
}

impl CostReport {
    pub fn collective_rounds_per_run(&self) -> f64 {
        self.collectives.iter().map(|c| c.rounds as f64 * c.frequency).sum()
    }
}

/// Phases of a ring collective over `groups` moving `bytes` per replica in
/// total: (ring size, piece divisor) pairs in execution order.
fn phase_sizes(topo: &Topology, groups: &ReplicaGroups) -> Vec<usize> {
    let n = topo.replica_count();
    if topo.is_multi_phase(groups) {
        match *topo {
            Topology::Mesh { rows, cols } => vec![cols, rows],
            Topology::Ring(_) => unreachable!(),
        }
    } else {
        vec![groups.group_size(n)]
    }
}

/// Reduce-scatter phases of a tensor of `bytes`: piece shrinks per phase.
fn scatter_phases(cm: &CostModel, sizes: &[usize], piece_at: &dyn Fn(usize) -> f64) -> Vec<PhaseCost> {
    let mut divisor = 1;
    sizes
        .iter()
        .filter(|&&s| s > 1)
        .map(|&s| {
            divisor *= s;
            let piece = piece_at(divisor);
            PhaseCost { ring_size: s, rounds: s - 1, piece_bytes: piece, time: cm.ring_time(s - 1, piece) }
        })
        .collect()
}

fn spec_piece(specs: &[ShardingSpec], tiling: Tiling, divisor: usize) -> f64 {
    specs
        .iter()
        .map(|s| {
            let mut dims = s.formatted_dims();
            if !dims.is_empty() {
                dims[s.shard_dim] /= divisor;
            }
            tiling.physical_bytes(&s.source.with_dims(dims)) as f64
        })
        .sum()
}

fn type_bytes(t: &Type, tiling: Tiling) -> usize {
    t.physical_bytes(tiling)
}

/// Costs one collective invocation.
pub fn collective_cost(m: &Module, inst: &Instruction, operand_types: &[Type], cm: &CostModel) -> Option<CollectiveCost> {
    let tiling = m.tiling;
    let topo = &m.topology;
    let (kind, phases) = match &inst.op {
        Op::AllReduce { groups, .. } => {
            let bytes: f64 = operand_types.iter().map(|t| type_bytes(t, tiling) as f64).sum();
            let sizes = phase_sizes(topo, groups);
            let rs = scatter_phases(cm, &sizes, &|d| (bytes / d as f64).ceil());
            let mut ag = rs.clone();
            ag.reverse();
            ("all-reduce", rs.into_iter().chain(ag).collect::<Vec<_>>())
        }
        Op::Fusion(FusionKind::ReduceScatter { specs, .. }) => {
            let sizes = phase_sizes(topo, &specs[0].group);
            ("reduce-scatter", scatter_phases(cm, &sizes, &|d| spec_piece(specs, tiling, d)))
        }
        Op::Fusion(FusionKind::Unshard { specs }) => {
            let sizes = phase_sizes(topo, &specs[0].group);
            let mut p = scatter_phases(cm, &sizes, &|d| spec_piece(specs, tiling, d));
            p.reverse();
            ("all-gather", p)
        }
        _ => return None,
    };
    let rounds = phases.iter().map(|p| p.rounds).sum();
    let time = phases.iter().map(|p| p.time).sum();
    let max_piece = phases.iter().map(|p| p.piece_bytes).fold(0.0, f64::max);
    Some(CollectiveCost {
        instruction: inst.name.clone(),
        kind: kind.to_string(),
        bytes_per_replica: phases.iter().map(|p| p.rounds as f64 * p.piece_bytes).sum(),
        rounds,
        max_piece_bytes: max_piece,
        modeled_time: time,
        frequency: 1.0,
        latency_bound: rounds > 0 && cm.latency_bound_bytes() > max_piece,
        phases,
    })
}

/// Bytes an instruction reads plus writes, or zero for free ops.
pub fn compute_bytes(inst: &Instruction, operand_types: &[Type], tiling: Tiling) -> usize {
    match &inst.op {
        Op::Parameter { .. }
        | Op::Constant(_)
        | Op::Reshape
        | Op::Bitcast
        | Op::Tuple
        | Op::GetTupleElement { .. }
        | Op::While { .. }
        | Op::Conditional { .. }
        | Op::Fusion(FusionKind::Loop { .. }) => 0,
        _ if inst.op.is_collective() => 0,
        Op::DynamicSlice { .. } => 2 * type_bytes(&inst.ty, tiling),
        Op::Outfeed => operand_types.iter().map(|t| type_bytes(t, tiling)).sum(),
        Op::Fusion(FusionKind::Shard { spec }) => {
            // reads only the slice it keeps
            2 * tiling.physical_bytes(&spec.shard_shape())
        }
        _ => operand_types.iter().map(|t| type_bytes(t, tiling)).sum::<usize>() + type_bytes(&inst.ty, tiling),
    }
}

struct Walker<'a> {
    m: &'a Module,
    cm: &'a CostModel,
    update: &'a HashSet<String>,
    collectives: Vec<CollectiveCost>,
    compute: f64,
    update_time: f64,
}

impl<'a> Walker<'a> {
    fn walk(&mut self, c: &'a Computation, freq: f64, enclosing: Option<(&'a Computation, &'a Instruction)>) {
        let types: std::collections::HashMap<&str, &Type> =
            c.instructions.iter().map(|i| (i.name.as_str(), &i.ty)).collect();
        for inst in &c.instructions {
            let ops: Vec<Type> = inst.operands.iter().filter_map(|o| types.get(o.as_str()).map(|t| (*t).clone())).collect();
            if let Some(mut cc) = collective_cost(self.m, inst, &ops, self.cm) {
                cc.frequency = freq;
                self.collectives.push(cc);
                continue;
            }
            let bytes = compute_bytes(inst, &ops, self.m.tiling) as f64;
            let t = bytes / self.cm.mem_bandwidth * freq;
            self.compute += t;
            if self.update.contains(&inst.name) {
                self.update_time += t;
            }
            match &inst.op {
                Op::While { condition, body } => {
                    let trips = loops::trip_count(self.m, c, inst).or(self.m.steps).unwrap_or(1) as f64;
                    if let Some(b) = self.m.computation(body) {
                        self.walk(b, freq * trips, Some((c, inst)));
                    }
                    if let Some(cd) = self.m.computation(condition) {
                        self.walk(cd, freq * (trips + 1.0), Some((c, inst)));
                    }
                }
                Op::Conditional { branches } => {
                    let w = enclosing.map(|(_, w)| w);
                    let host = enclosing.map(|(h, _)| h).unwrap_or(c);
                    let fs = loops::branch_frequencies(self.m, host, inst, w);
                    for (b, f) in branches.iter().zip(fs) {
                        if let Some(bc) = self.m.computation(b) {
                            self.walk(bc, freq * f, enclosing);
                        }
                    }
                }
                Op::Fusion(FusionKind::Loop { calls }) => {
                    if let Some(fc) = self.m.computation(calls) {
                        self.walk(fc, freq, enclosing);
                    }
                }
                _ => {}
            }
        }
    }
}

/// Number of training steps one run of `m` performs: the trip count of the
/// outermost entry loop, or the header `steps` for an unbounded loop.
pub fn program_steps(m: &Module) -> u64 {
    let e = m.entry_computation();
    e.instructions
        .iter()
        .find(|i| matches!(i.op, Op::While { .. }))
        .map(|w| loops::trip_count(m, e, w).or(m.steps).unwrap_or(1))
        .unwrap_or(1)
        .max(1)
}

pub fn cost(m: &Module, cm: &CostModel) -> CostReport {
    cost_with_update(m, cm, &HashSet::new())
}

/// Like [`cost`], also summing the compute time of `update` instructions.
pub fn cost_with_update(m: &Module, cm: &CostModel, update: &HashSet<String>) -> CostReport {
    let mut w = Walker { m, cm, update, collectives: Vec::new(), compute: 0.0, update_time: 0.0 };
    w.walk(m.entry_computation(), 1.0, None);
    let collective_time: f64 = w.collectives.iter().map(|c| c.modeled_time * c.frequency).sum();
    let total = w.compute + collective_time;
    let steps = program_steps(m);
    let rounds = w.collectives.iter().map(|c| c.rounds).sum();
    CostReport {
        collectives: w.collectives,
        compute_time: w.compute,
        collective_time,
        total_time: total,
        steps,
        total_step_time: total / steps as f64,
        update_time: w.update_time,
        rounds,
    }
}

/// All-reduce cost of `bytes` over a ring of `n`: 2(n-1) rounds of piece bytes/n.
pub fn ring_all_reduce_time(cm: &CostModel, bytes: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    cm.ring_time(2 * (n - 1), (bytes / n as f64).ceil())
}

/// Physical bytes of a shape under the module tiling.
pub fn shape_bytes(m: &Module, s: &Shape) -> usize {
    m.tiling.physical_bytes(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn ar_module(n: usize, count: usize, dims: &str) -> Module {
        let mut body = String::new();
        let mut outs = Vec::new();
        for k in 0..count {
            body.push_str(&format!("  %p{k} = f32[{dims}] parameter({k})\n  %a{k} = f32[{dims}] all-reduce(%p{k}), op=add\n"));
            outs.push(format!("%a{k}"));
        }
        let tys = vec![format!("f32[{dims}]"); count].join(", ");
        parse_module(&format!(
            "module N={n} topology=ring {{\nentry computation e ({tys}) -> ({tys}) {{\n{body}  %t = ({tys}) tuple({})\n  return (%t)\n}}\n}}\n",
            outs.join(", ")
        ))
        .unwrap()
    }

    #[test]
    fn four_megabytes_over_2048_is_latency_bound() {
        let m = ar_module(2048, 1, "1024,1024");
        let r = cost(&m, &CostModel::default());
        let c = &r.collectives[0];
        assert_eq!(c.rounds, 2 * 2047);
        assert_eq!(c.max_piece_bytes, 2048.0);
        assert!(c.latency_bound);
        assert!(c.modeled_time > 4.0e-3 && c.modeled_time < 4.3e-3, "{}", c.modeled_time);
    }

    #[test]
    fn single_replica_has_no_collective_cost() {
        let m = ar_module(1, 1, "8,128");
        let r = cost(&m, &CostModel::default());
        assert_eq!(r.collective_time, 0.0);
        assert_eq!(r.total_time, r.compute_time + r.collective_time);
    }
}
