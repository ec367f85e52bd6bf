//! Weight-update clusters around gradient all-reduces, and whether sharding
//! each one pays for its extra communication.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;

use crate::ir::{
    Computation, FusionKind, Instruction, Module, Op, ReduceKind, ReplicaGroups, Shape, Topology, Type,
};
use crate::loops::{self, step_info, StepInfo};
use crate::redundancy::{self, RedundancyMap};
use crate::sharding_spec::{choose_spec_for_reduce, choose_spec_with, PadMaskInfo, ShardingSpec};
use crate::simulator::cost::collective_cost;

pub use crate::loops::{estimate_branch_frequency, Frequency};
pub use crate::simulator::CostModel;

/// Trip count assumed when a loop bound is not a compile-time constant.
pub const DEFAULT_HORIZON: u64 = 1000;

/// Where an all-gather of a sharded value runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    InLoopBeforeUse,
    LoopBoundary,
    InsideInfrequentBranch,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::InLoopBeforeUse => "in-loop-before-use",
            Placement::LoopBoundary => "loop-boundary",
            Placement::InsideInfrequentBranch => "inside-infrequent-branch",
        }
    }
}

/// A consumer that needs the full value of a cluster tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierUse {
    pub value: String,
    pub user: String,
    pub placement: Placement,
    /// Runs of the all-gather per training step.
    pub frequency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Cluster {
    pub computation: String,
    pub anchor: String,
    /// The anchor's operand: the local gradient.
    pub gradient: String,
    pub members: BTreeSet<String>,
    /// Carried state read by the cluster: instruction -> slot.
    pub state_inputs: BTreeMap<String, usize>,
    /// Other full-size operands produced outside the cluster.
    pub inputs: BTreeSet<String>,
    /// Members whose value leaves the cluster.
    pub outputs: BTreeSet<String>,
    pub loop_state_slots: Vec<usize>,
    pub frontier: Vec<FrontierUse>,
    /// Reduce-to-scalar members, sharded with masking.
    pub reduces: Vec<String>,
    /// Full shape of the sharded tensors (element type of the anchor).
    pub shape: Shape,
    pub unsupported: Option<String>,
}

impl Cluster {
    /// Whether the cluster holds update operators beyond the all-reduce.
    pub fn has_update(&self) -> bool {
        self.members.len() > 1
    }
}

fn spans_all(groups: &ReplicaGroups, n: usize) -> bool {
    groups.is_all() || groups.resolve(n).iter().any(|g| g.len() == n)
}

/// Values that are the same compile-time data on every replica.
fn static_values(c: &Computation) -> HashSet<&str> {
    let mut s: HashSet<&str> = HashSet::new();
    for i in &c.instructions {
        let leaf = matches!(i.op, Op::Constant(_) | Op::Iota { .. });
        let derived = !i.operands.is_empty()
            && i.op.is_pure()
            && !matches!(i.op, Op::Parameter { .. } | Op::AllReduce { .. } | Op::Fusion(_))
            && i.operands.iter().all(|o| s.contains(o.as_str()));
        if leaf || derived {
            s.insert(&i.name);
        }
    }
    s
}

struct Finder<'a> {
    m: &'a Module,
    c: &'a Computation,
    r: &'a RedundancyMap,
    step: Option<&'a StepInfo<'a>>,
    statics: HashSet<&'a str>,
    users: HashMap<&'a str, Vec<&'a str>>,
}

impl<'a> Finder<'a> {
    fn inst(&self, n: &str) -> &'a Instruction {
        self.c.get(n).expect("operand defined in computation")
    }

    fn dims_of(&self, n: &str) -> Option<&'a [usize]> {
        self.inst(n).ty.as_array().map(|s| s.dims.as_slice())
    }

    fn is_scalar(&self, n: &str) -> bool {
        self.dims_of(n).is_some_and(|d| d.is_empty())
    }

    /// Operators the sharded update knows how to rewrite.
    fn supported(&self, n: &str, dims: &[usize]) -> bool {
        let i = self.inst(n);
        if !self.r.is_redundant(n) || !i.op.is_pure() {
            return false;
        }
        let Some(out) = self.dims_of(n) else { return false };
        let full = out == dims;
        match &i.op {
            op if op.is_elementwise() => full || out.is_empty(),
            Op::Broadcast { .. } => full && self.is_scalar(&i.operands[0]),
            Op::Reduce { dims: rd, .. } => {
                let src = self.dims_of(&i.operands[0]);
                out.is_empty() && src == Some(dims) && rd.len() == dims.len()
            }
            _ => false,
        }
    }

    fn carried_slot(&self, n: &str) -> Option<usize> {
        self.step.and_then(|s| s.carried.get(n).copied())
    }

    /// Whether `n` can join as a feeder: supported and computed only from
    /// members, carried state and static values.
    fn feeder(&self, n: &str, dims: &[usize], members: &HashSet<String>, memo: &mut HashMap<String, bool>) -> bool {
        if let Some(&v) = memo.get(n) {
            return v;
        }
        memo.insert(n.to_string(), false);
        let ok = self.supported(n, dims)
            && self.inst(n).operands.iter().all(|o| {
                members.contains(o)
                    || self.statics.contains(o.as_str())
                    || self.carried_slot(o).is_some()
                    || self.feeder(o, dims, members, memo)
            });
        memo.insert(n.to_string(), ok);
        ok
    }

    fn placement(&self, user: &Instruction, operand_index: usize) -> (Placement, f64) {
        if let Op::Conditional { .. } = user.op {
            if operand_index > 0 && self.r.is_redundant(&user.operands[0]) {
                let freqs = loops::branch_frequencies(
                    self.m,
                    self.m.entry_computation(),
                    user,
                    self.step.and_then(|s| s.while_loop),
                );
                let f = freqs.get(operand_index - 1).copied().unwrap_or(1.0);
                if f < 1.0 {
                    return (Placement::InsideInfrequentBranch, f);
                }
            }
        }
        (Placement::InLoopBeforeUse, 1.0)
    }

    fn cluster(&self, anchor: &'a Instruction, claimed: &HashSet<String>) -> Cluster {
        let shape = anchor.ty.as_array().cloned().unwrap_or_else(|| Shape::scalar(crate::ir::ElementType::F32));
        let dims = shape.dims.clone();
        let root = self.c.root.as_str();
        let mut members: HashSet<String> = HashSet::from([anchor.name.clone()]);
        let mut unsupported = None;

        // descendants of the all-reduce
        let mut queue = vec![anchor.name.as_str()];
        while let Some(x) = queue.pop() {
            for &u in &self.users[x] {
                if u == root || members.contains(u) || claimed.contains(u) {
                    continue;
                }
                if self.supported(u, &dims) {
                    members.insert(u.to_string());
                    queue.push(u);
                }
            }
        }
        // feeders computed from state and static values
        let mut memo = HashMap::new();
        loop {
            let mut added = Vec::new();
            for x in &members {
                if x == &anchor.name {
                    continue;
                }
                for o in &self.inst(x).operands {
                    if members.contains(o) || claimed.contains(o) || self.statics.contains(o.as_str()) {
                        continue;
                    }
                    if self.carried_slot(o).is_none() && self.feeder(o, &dims, &members, &mut memo) {
                        added.push(o.clone());
                    }
                }
            }
            if added.is_empty() {
                break;
            }
            for a in added {
                // pull in the feeder's own feeder ancestors
                let mut stack = vec![a];
                while let Some(n) = stack.pop() {
                    if members.insert(n.clone()) {
                        for o in &self.inst(&n).operands {
                            if !members.contains(o) && memo.get(o) == Some(&true) {
                                stack.push(o.clone());
                            }
                        }
                    }
                }
            }
        }

        let is_full = |n: &str| self.dims_of(n) == Some(dims.as_slice());
        let mut state_inputs = BTreeMap::new();
        let mut inputs = BTreeSet::new();
        let mut reduces = Vec::new();
        for x in &members {
            let i = self.inst(x);
            if matches!(i.op, Op::Reduce { .. }) {
                reduces.push(x.clone());
            }
            for o in &i.operands {
                if members.contains(o) || self.statics.contains(o.as_str()) || !is_full(o) {
                    continue;
                }
                match self.carried_slot(o) {
                    Some(k) => {
                        if claimed.contains(o) {
                            unsupported = Some(format!("state `{o}` is shared with another cluster"));
                        }
                        state_inputs.insert(o.clone(), k);
                    }
                    None => {
                        inputs.insert(o.clone());
                    }
                }
            }
        }
        reduces.sort();

        let mut outputs = BTreeSet::new();
        let mut frontier = Vec::new();
        let mut slots = BTreeSet::new();
        let root_inst = self.c.root_instruction();
        let paired = |k: usize| self.step.is_some_and(|s| s.carried.values().any(|&v| v == k) || s.while_loop.is_some());
        let full_values: Vec<&str> = members
            .iter()
            .map(String::as_str)
            .filter(|n| is_full(n))
            .chain(state_inputs.keys().map(String::as_str))
            .collect();
        for &v in &full_values {
            for &u in &self.users[v] {
                if members.contains(u) {
                    continue;
                }
                let ui = self.inst(u);
                if u == root && self.step.is_some() && matches!(ui.op, Op::Tuple) {
                    for (k, o) in ui.operands.iter().enumerate() {
                        if o != v {
                            continue;
                        }
                        let own_slot = self.carried_slot(v).map_or(true, |s| s == k);
                        if paired(k) && own_slot {
                            slots.insert(k);
                            if members.contains(v) {
                                outputs.insert(v.to_string());
                            }
                        } else {
                            frontier.push(FrontierUse {
                                value: v.to_string(),
                                user: u.to_string(),
                                placement: Placement::LoopBoundary,
                                frequency: 0.0,
                            });
                        }
                    }
                    continue;
                }
                if members.contains(v) {
                    outputs.insert(v.to_string());
                }
                for (j, o) in ui.operands.iter().enumerate() {
                    if o == v {
                        let (placement, frequency) = self.placement(ui, j);
                        frontier.push(FrontierUse { value: v.to_string(), user: u.to_string(), placement, frequency });
                    }
                }
            }
            if let Some(k) = self.carried_slot(v) {
                slots.insert(k);
            }
        }
        if root_inst.is_some_and(|r| members.contains(&r.name)) {
            unsupported = Some("cluster produces the computation root directly".into());
        }
        frontier.dedup();

        Cluster {
            computation: self.c.name.clone(),
            anchor: anchor.name.clone(),
            gradient: anchor.operands[0].clone(),
            members: members.into_iter().collect(),
            state_inputs,
            inputs,
            outputs,
            loop_state_slots: slots.into_iter().collect(),
            frontier,
            reduces,
            shape,
            unsupported,
        }
    }
}

/// One cluster per full-group all-reduce of a single tensor in `c`. Growth
/// stops at the computation boundary.
pub fn find_clusters(m: &Module, c: &Computation, r: &RedundancyMap) -> Vec<Cluster> {
    let info = step_info(m);
    let step = (info.computation.name == c.name).then_some(&info);
    let f = Finder { m, c, r, step, statics: static_values(c), users: c.users() };
    let n = m.replica_count;
    let mut claimed: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for i in &c.instructions {
        let Op::AllReduce { op: ReduceKind::Add, groups } = &i.op else { continue };
        if i.operands.len() != 1 || i.ty.as_array().is_none() || !spans_all(groups, n) || claimed.contains(&i.name) {
            continue;
        }
        let cl = f.cluster(i, &claimed);
        claimed.extend(cl.members.iter().cloned());
        claimed.extend(cl.state_inputs.keys().cloned());
        out.push(cl);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ProfitOptions {
    /// Below this many shard bytes at full sharding a mesh uses row groups.
    pub partial_threshold_bytes: usize,
    /// Override the cost comparison.
    pub force: Option<bool>,
    /// Override the group-selection rule.
    pub groups: Option<ReplicaGroups>,
}

impl Default for ProfitOptions {
    fn default() -> Self {
        ProfitOptions { partial_threshold_bytes: 64 * 1024, force: None, groups: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShardingDecision {
    pub cluster: Cluster,
    pub shard: bool,
    pub groups: ReplicaGroups,
    pub shard_count: usize,
    /// Spec of the anchor's tensor; other tensors use it with their own
    /// element type.
    #[serde(serialize_with = "spec_string")]
    pub spec: Option<ShardingSpec>,
    pub placements: Vec<FrontierUse>,
    pub benefit_sec: f64,
    pub cost_sec: f64,
    pub reason: String,
}

fn spec_string<S: serde::Serializer>(spec: &Option<ShardingSpec>, s: S) -> Result<S::Ok, S::Error> {
    match spec {
        Some(sp) => s.serialize_str(&sp.to_string()),
        None => s.serialize_none(),
    }
}

impl ShardingDecision {
    /// Spec for a cluster tensor of the given element type.
    pub fn spec_for(&self, ty: &Type) -> Option<ShardingSpec> {
        let s = ty.as_array()?;
        self.spec.as_ref().map(|sp| sp.with_etype(s.etype))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "anchor": self.cluster.anchor,
            "members": self.cluster.members,
            "frontier": self.cluster.frontier,
            "loop_state_slots": self.cluster.loop_state_slots,
            "benefit_sec": self.benefit_sec,
            "cost_sec": self.cost_sec,
            "decision": if self.shard { "shard" } else { "replicate" },
            "groups": self.groups.to_string(),
            "shard_count": self.shard_count,
            "spec": self.spec.as_ref().map(|s| s.to_string()),
            "reason": self.reason,
        })
    }
}

/// Training steps that loop-boundary work is amortized over.
pub fn horizon(m: &Module) -> u64 {
    let e = m.entry_computation();
    e.instructions
        .iter()
        .find(|i| matches!(i.op, Op::While { .. }))
        .and_then(|w| loops::trip_count(m, e, w))
        .or(m.steps)
        .unwrap_or(DEFAULT_HORIZON)
        .max(1)
}

/// Groups and shard count chosen for a tensor of `shape`.
pub fn select_groups(m: &Module, shape: &Shape, opts: &ProfitOptions) -> ReplicaGroups {
    if let Some(g) = &opts.groups {
        return g.clone();
    }
    let n = m.replica_count;
    if let Topology::Mesh { rows, cols } = m.topology {
        if rows > 1 && cols > 1 {
            let bytes = Type::Array(shape.clone()).physical_bytes(m.tiling) / n;
            if bytes < opts.partial_threshold_bytes {
                return m.topology.rows();
            }
        }
    }
    ReplicaGroups::All
}

/// Time of one collective when its latency is shared by `peers` batched
/// collectives of the same kind.
fn modeled(m: &Module, cm: &CostModel, peers: usize, op: Op, ty: Type, operand: Type) -> f64 {
    let i = Instruction::new("modeled", ty, op, vec!["x".into()]);
    collective_cost(m, &i, &[operand], cm).map_or(0.0, |c| {
        c.modeled_time - c.rounds as f64 * cm.per_message_latency * (1.0 - 1.0 / peers.max(1) as f64)
    })
}

/// Decides whether to shard `cluster`: the saved update memory traffic must
/// strictly exceed the added communication.
/// `peers` is the number of clusters whose collectives get batched with this
/// one's.
pub fn evaluate(cluster: &Cluster, m: &Module, cm: &CostModel, opts: &ProfitOptions, peers: usize) -> ShardingDecision {
    let n = m.replica_count;
    let tiling = m.tiling;
    let groups = select_groups(m, &cluster.shape, opts);
    let s = groups.group_size(n);
    let mut d = ShardingDecision {
        cluster: cluster.clone(),
        shard: false,
        groups: groups.clone(),
        shard_count: s,
        spec: None,
        placements: cluster.frontier.clone(),
        benefit_sec: 0.0,
        cost_sec: 0.0,
        reason: String::new(),
    };
    if let Some(u) = &cluster.unsupported {
        d.reason = u.clone();
        return d;
    }
    if s <= 1 {
        d.reason = "one shard per group".into();
        return d;
    }
    let spec = if cluster.reduces.is_empty() {
        choose_spec_with(&cluster.shape, s, tiling, true)
    } else {
        choose_spec_for_reduce(&cluster.shape, s, tiling)
    }
    .with_group(groups.clone());
    if !cluster.reduces.is_empty() {
        if let Err(e) = PadMaskInfo::from_spec(&spec, ReduceKind::Add) {
            d.reason = format!("reduce cannot be masked: {e}");
            return d;
        }
    }

    let c = m.computation(&cluster.computation).expect("cluster computation exists");
    let bytes = |n: &str| c.get(n).map_or(0, |i| i.ty.physical_bytes(tiling));
    let non_fusible: usize = cluster.state_inputs.keys().chain(&cluster.inputs).chain(&cluster.outputs).map(|n| bytes(n)).sum();
    d.benefit_sec = if cluster.has_update() {
        non_fusible as f64 * (1.0 - 1.0 / s as f64) / cm.mem_bandwidth
    } else {
        0.0
    };

    let steps = horizon(m) as f64;
    let full_ty = Type::Array(cluster.shape.clone());
    let shard_ty = Type::Array(spec.shard_shape());
    let ag = |etype| {
        let sp = spec.with_etype(etype);
        modeled(
            m,
            cm,
            peers,
            Op::Fusion(FusionKind::Unshard { specs: vec![sp.clone()] }),
            Type::Array(sp.source.clone()),
            Type::Array(sp.shard_shape()),
        )
    };
    let etype_of = |v: &str| c.get(v).and_then(|i| i.ty.as_array()).map_or(cluster.shape.etype, |s| s.etype);

    // all-gathers: one per value and site
    let mut sites: BTreeSet<(String, Placement, String)> = BTreeSet::new();
    let mut comm = 0.0;
    for f in &cluster.frontier {
        let site = match f.placement {
            Placement::InsideInfrequentBranch => f.user.clone(),
            _ => String::new(),
        };
        if sites.insert((f.value.clone(), f.placement, site)) {
            let freq = if f.placement == Placement::LoopBoundary { 1.0 / steps } else { f.frequency };
            comm += freq * ag(etype_of(&f.value));
        }
    }
    for (v, _) in &cluster.state_inputs {
        comm += ag(etype_of(v)) / steps;
    }
    // reduce-scatter, cross-group all-reduce and masked-reduce all-reduces
    comm += modeled(
        m,
        cm,
        peers,
        Op::Fusion(FusionKind::ReduceScatter { op: ReduceKind::Add, specs: vec![spec.clone()] }),
        shard_ty.clone(),
        full_ty.clone(),
    );
    let cross = groups.complement(n);
    if !groups.is_all() && cross.group_size(n) > 1 {
        comm += modeled(m, cm, peers, Op::AllReduce { op: ReduceKind::Add, groups: cross }, shard_ty.clone(), shard_ty);
    }
    let scalar = Type::Array(Shape::scalar(cluster.shape.etype));
    comm += cluster.reduces.len() as f64
        * modeled(m, cm, peers, Op::AllReduce { op: ReduceKind::Add, groups: groups.clone() }, scalar.clone(), scalar);
    let baseline = modeled(m, cm, peers, Op::AllReduce { op: ReduceKind::Add, groups: ReplicaGroups::All }, full_ty.clone(), full_ty);
    d.cost_sec = comm - baseline;
    d.spec = Some(spec);

    if cluster.frontier.iter().any(|f| c.get(&f.user).is_some_and(|u| matches!(u.op, Op::Outfeed))) {
        d.reason = "full value is outfed every step".into();
    } else if let Some(force) = opts.force {
        d.shard = force;
        d.reason = "forced".into();
    } else if d.benefit_sec > d.cost_sec {
        d.shard = true;
        d.reason = "benefit exceeds cost".into();
    } else {
        d.reason = "cost not covered by benefit".into();
    }
    d
}

/// Clusters of the step computation with a decision for each.
pub fn decide(m: &Module, cm: &CostModel, opts: &ProfitOptions) -> Vec<ShardingDecision> {
    let r = redundancy::analyze(m);
    let step = step_info(m);
    let clusters = find_clusters(m, step.computation, &r);
    let peers = clusters.iter().filter(|c| c.unsupported.is_none()).count();
    clusters.iter().map(|c| evaluate(c, m, cm, opts, peers)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    const ADAM: &str = "module N={n} topology=ring {
entry computation e (f32[{d},128], f32[{d},128], f32[{d},128], f32[{d},128]) -> (f32[{d},128], f32[{d},128], f32[{d},128]) {
  %w = f32[{d},128] parameter(0) {replica_equal}
  %m = f32[{d},128] parameter(1) {replica_equal}
  %v = f32[{d},128] parameter(2) {replica_equal}
  %x = f32[{d},128] parameter(3)
  %gl = f32[{d},128] mul(%x, %w)
  %g = f32[{d},128] all-reduce(%gl), op=add
  %b1 = f32[] constant(0.9)
  %b1b = f32[{d},128] broadcast(%b1), dims={}
  %t1 = f32[{d},128] mul(%b1b, %m)
  %nm = f32[{d},128] add(%t1, %g)
  %gg = f32[{d},128] mul(%g, %g)
  %t3 = f32[{d},128] mul(%b1b, %v)
  %nv = f32[{d},128] add(%t3, %gg)
  %sq = f32[{d},128] sqrt(%nv)
  %r = f32[{d},128] div(%nm, %sq)
  %nw = f32[{d},128] sub(%w, %r)
  %t = (f32[{d},128], f32[{d},128], f32[{d},128]) tuple(%nw, %nm, %nv)
  return (%t)
}
}";

    fn adam(n: usize, d: usize) -> Module {
        parse_module(&ADAM.replace("{n}", &n.to_string()).replace("{d}", &d.to_string())).unwrap()
    }

    #[test]
    fn adam_cluster_has_update_and_matmul_frontier() {
        let m = adam(4, 8);
        let r = redundancy::analyze(&m);
        let cs = find_clusters(&m, m.entry_computation(), &r);
        assert_eq!(cs.len(), 1);
        let c = &cs[0];
        for x in ["g", "t1", "nm", "gg", "t3", "nv", "sq", "r", "nw"] {
            assert!(c.members.contains(x), "{x}");
        }
        assert!(!c.members.contains("gl"));
        assert_eq!(c.gradient, "gl");
        assert_eq!(c.loop_state_slots, vec![0, 1, 2]);
        assert_eq!(c.frontier.len(), 1);
        assert_eq!((c.frontier[0].value.as_str(), c.frontier[0].user.as_str()), ("w", "gl"));
        assert_eq!(c.outputs.len(), 3);
    }

    #[test]
    fn single_replica_never_shards() {
        let m = adam(1, 8);
        let d = decide(&m, &CostModel::default(), &ProfitOptions::default());
        assert!(!d[0].shard);
    }

    #[test]
    fn large_update_shards_and_ties_do_not() {
        let m = adam(16, 8192);
        let d = &decide(&m, &CostModel::default(), &ProfitOptions::default())[0];
        assert!(d.shard, "{d:?}");
        assert!(d.benefit_sec > 0.0);
        // without latency the in-loop gather costs exactly the all-reduce's
        // gather phase, leaving the three end-of-run gathers amortized
        let free = CostModel { per_message_latency: 0.0, ..CostModel::default() };
        let d = &decide(&m, &free, &ProfitOptions::default())[0];
        let shard_bytes = (8192 * 128 * 4 / 16) as f64;
        let ag = 15.0 * shard_bytes / free.link_bandwidth;
        let want = 3.0 * ag / DEFAULT_HORIZON as f64;
        assert!((d.cost_sec - want).abs() < 1e-9 * want.max(1e-12) + 1e-15, "{} vs {want}", d.cost_sec);
    }

    #[test]
    fn outfeed_only_cluster_is_rejected() {
        let m = parse_module(
            "module N=4 topology=ring {
entry computation e (f32[8,128]) -> () {
  %x = f32[8,128] parameter(0)
  %a = f32[8,128] all-reduce(%x), op=add
  %o = () outfeed(%a)
  return (%o)
}
}",
        )
        .unwrap();
        let r = redundancy::analyze(&m);
        let cs = find_clusters(&m, m.entry_computation(), &r);
        assert_eq!(cs[0].members.len(), 1);
        assert_eq!(cs[0].frontier[0].user, "o");
        let d = evaluate(&cs[0], &m, &CostModel::default(), &ProfitOptions::default(), 1);
        assert!(!d.shard);
        assert_eq!(d.benefit_sec, 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn growing_the_update_never_flips_to_no(
            n in proptest::sample::select(vec![2usize, 4, 8, 16]),
            d in 1usize..2048,
            extra in 1usize..2048,
        ) {
            let cm = CostModel::default();
            let small = decide(&adam(n, d), &cm, &ProfitOptions::default())[0].shard;
            let large = decide(&adam(n, d + extra), &cm, &ProfitOptions::default())[0].shard;
            proptest::prop_assert!(!small || large);
        }

        #[test]
        fn without_latency_a_large_update_shards(n in proptest::sample::select(vec![2usize, 4, 8, 16]), k in 1usize..32) {
            // tile-aligned shards: update bytes are several times the
            // frontier's weight bytes / S
            let free = CostModel { per_message_latency: 0.0, ..CostModel::default() };
            let dec = &decide(&adam(n, 8 * n * k), &free, &ProfitOptions::default())[0];
            proptest::prop_assert!(dec.shard, "{:?}", dec);
        }
    }
}
