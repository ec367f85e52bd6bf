//! Per-computation rewriting: sharded update, reduce-scatter anchors and
//! all-gathers in front of full-value consumers.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ir::{Builder, Computation, FusionKind, Instruction, Literal, Module, Op, ReduceKind, Type};
use crate::profitability::{Placement, ShardingDecision};
use crate::sharding_spec::{build_masked_reduce, build_shard_ops, build_unshard_ops, ShardingSpec};

pub(super) type SlotPlan = Vec<Option<ShardingSpec>>;

#[derive(Debug, Clone)]
pub(super) struct Val {
    pub name: String,
    pub spec: Option<ShardingSpec>,
    /// Per-element specs of a tuple value.
    pub elems: Option<SlotPlan>,
}

impl Val {
    fn plain(name: impl Into<String>) -> Val {
        Val { name: name.into(), spec: None, elems: None }
    }

    fn sharded(name: impl Into<String>, spec: ShardingSpec) -> Val {
        Val { name: name.into(), spec: Some(spec), elems: None }
    }
}

pub(super) fn shard_type(spec: &ShardingSpec) -> Type {
    Type::Array(spec.shard_shape())
}

pub(super) fn plan_type(ty: &Type, plan: &[Option<ShardingSpec>]) -> Type {
    match ty.as_tuple() {
        Some(ts) => Type::Tuple(
            ts.iter()
                .enumerate()
                .map(|(k, t)| plan.get(k).cloned().flatten().map_or_else(|| t.clone(), |s| shard_type(&s)))
                .collect(),
        ),
        None => ty.clone(),
    }
}

/// What to do with one computation.
#[derive(Default)]
pub(super) struct Ctx<'a> {
    pub decisions: Vec<&'a ShardingDecision>,
    /// Array-valued instructions whose rewritten form is a shard.
    pub pre_sharded: HashMap<String, ShardingSpec>,
    /// Tuple-valued instructions with sharded elements.
    pub tuple_plans: HashMap<String, SlotPlan>,
    /// Leave sharded operands of the root as they are.
    pub keep_root_sharded: bool,
}

pub(super) struct Rewriter<'a, 'b> {
    m: &'a Module,
    c: &'a Computation,
    ctx: Ctx<'a>,
    b: &'b mut Builder,
    env: HashMap<String, Val>,
    out: Vec<Instruction>,
    gathered: HashMap<String, String>,
    shards: HashMap<(String, String), String>,
    rid: Option<String>,
    anchors: HashMap<&'a str, &'a ShardingDecision>,
    members: HashMap<&'a str, &'a ShardingDecision>,
    branch_local: HashSet<(&'a str, &'a str)>,
    /// Branch computations rewritten or copied with sharded parameters.
    pub extra: Vec<Computation>,
}

impl<'a, 'b> Rewriter<'a, 'b> {
    pub fn new(m: &'a Module, c: &'a Computation, ctx: Ctx<'a>, b: &'b mut Builder) -> Self {
        let mut anchors = HashMap::new();
        let mut members = HashMap::new();
        let mut branch_local = HashSet::new();
        for d in &ctx.decisions {
            anchors.insert(d.cluster.anchor.as_str(), *d);
            for x in &d.cluster.members {
                members.insert(x.as_str(), *d);
            }
            for f in &d.cluster.frontier {
                if f.placement == Placement::InsideInfrequentBranch {
                    branch_local.insert((f.value.as_str(), f.user.as_str()));
                }
            }
        }
        Rewriter {
            m,
            c,
            ctx,
            b,
            env: HashMap::new(),
            out: Vec::new(),
            gathered: HashMap::new(),
            shards: HashMap::new(),
            rid: None,
            anchors,
            members,
            branch_local,
            extra: Vec::new(),
        }
    }

    /// Rewrites the computation; returns it with the value of its root.
    pub fn run(mut self) -> Result<(Computation, Val, Vec<Computation>)> {
        for i in &self.c.instructions {
            let v = if let Some(d) = self.anchors.get(i.name.as_str()).copied() {
                self.anchor(i, d)
            } else if let Some(d) = self.members.get(i.name.as_str()).copied() {
                self.member(i, d)?
            } else {
                self.generic(i)?
            };
            self.out.extend(self.b.take());
            self.env.insert(i.name.clone(), v);
        }
        let root = self.env[&self.c.root].clone();
        let c = Computation { name: self.c.name.clone(), instructions: self.out, root: root.name.clone() };
        Ok((c, root, self.extra))
    }

    fn orig(&self, n: &str) -> &'a Instruction {
        self.c.get(n).expect("operand defined in computation")
    }

    fn push(&mut self, i: Instruction) {
        self.b.instructions.push(i);
    }

    fn rid(&mut self) -> String {
        if let Some(r) = &self.rid {
            return r.clone();
        }
        let r = self.b.replica_id("rid");
        self.rid = Some(r.clone());
        r
    }

    /// Full value of `o`, gathering it once if it is sharded.
    fn full(&mut self, o: &str) -> String {
        let v = &self.env[o];
        let Some(spec) = v.spec.clone() else { return v.name.clone() };
        if let Some(g) = self.gathered.get(o) {
            return g.clone();
        }
        let name = v.name.clone();
        let g = build_unshard_ops(self.b, &spec, &name);
        self.gathered.insert(o.to_string(), g.clone());
        g
    }

    /// `o` as a shard with `spec`.
    fn sharded(&mut self, o: &str, spec: &ShardingSpec) -> String {
        let v = self.env[o].clone();
        if v.spec.as_ref() == Some(spec) {
            return v.name;
        }
        let key = (o.to_string(), spec.to_string());
        if let Some(s) = self.shards.get(&key) {
            return s.clone();
        }
        let i = self.orig(o);
        let base = format!("{}.shard", i.name);
        let s = match &i.op {
            // re-emit cheap static values at shard shape
            Op::Broadcast { dims } if dims.is_empty() => {
                let src = self.env[&i.operands[0]].name.clone();
                self.b.broadcast(&base, &spec.shard_shape(), &src, vec![])
            }
            Op::Constant(Literal::Splat(x)) => self.b.constant(&base, spec.shard_shape(), *x),
            _ => {
                let full = self.full(o);
                let rid = self.rid();
                build_shard_ops(self.b, spec, &full, &rid)
            }
        };
        self.shards.insert(key, s.clone());
        s
    }

    fn anchor(&mut self, i: &Instruction, d: &ShardingDecision) -> Val {
        let spec = d.spec_for(&i.ty).expect("anchor is an array");
        let n = self.m.replica_count;
        let g = self.full(&i.operands[0]);
        let ty = shard_type(&spec);
        let rs = self.b.fusion(
            &format!("{}.rs", i.name),
            ty.clone(),
            FusionKind::ReduceScatter { op: ReduceKind::Add, specs: vec![spec.clone()] },
            &[&g],
        );
        let mut out = rs;
        if !d.groups.is_all() {
            let cross = d.groups.complement(n);
            if cross.group_size(n) > 1 {
                out = self.b.all_reduce(&format!("{}.cross", i.name), ty, ReduceKind::Add, cross, &[&out]);
            }
        }
        Val::sharded(out, spec)
    }

    fn member(&mut self, i: &Instruction, d: &ShardingDecision) -> Result<Val> {
        let full_dims = &d.cluster.shape.dims;
        let is_full = |t: &Type| t.as_array().is_some_and(|s| &s.dims == full_dims);
        match &i.op {
            Op::Reduce { op, .. } => {
                let v = self.env[&i.operands[0]].clone();
                let spec = v
                    .spec
                    .ok_or_else(|| Error::Transform(format!("reduce `{}` of an unsharded value", i.name)))?;
                let rid = self.rid();
                let r = build_masked_reduce(self.b, &spec, *op, &v.name, &rid, &self.m.topology)?;
                Ok(Val::plain(r))
            }
            _ if is_full(&i.ty) => {
                let spec = d.spec_for(&i.ty).expect("array type");
                let mut operands = Vec::with_capacity(i.operands.len());
                for o in &i.operands {
                    let ot = &self.orig(o).ty;
                    let name = match (&i.op, is_full(ot)) {
                        (Op::Broadcast { .. }, _) | (_, false) => self.full(o),
                        (_, true) => {
                            let s = d.spec_for(ot).expect("array type");
                            self.sharded(o, &s)
                        }
                    };
                    operands.push(name);
                }
                self.push(Instruction::new(i.name.clone(), shard_type(&spec), i.op.clone(), operands));
                Ok(Val::sharded(i.name.clone(), spec))
            }
            _ => self.copy(i),
        }
    }

    fn copy(&mut self, i: &Instruction) -> Result<Val> {
        let operands = i.operands.iter().map(|o| self.full(o)).collect();
        self.push(Instruction::new(i.name.clone(), i.ty.clone(), i.op.clone(), operands));
        Ok(Val::plain(i.name.clone()))
    }

    fn generic(&mut self, i: &'a Instruction) -> Result<Val> {
        let name = i.name.clone();
        match &i.op {
            Op::Parameter { index, .. } => {
                if let Some(spec) = self.ctx.pre_sharded.get(&name).cloned() {
                    let op = Op::Parameter { index: *index, replica_equal: false };
                    self.push(Instruction::new(name.clone(), shard_type(&spec), op, vec![]));
                    return Ok(Val::sharded(name, spec));
                }
                if let Some(plan) = self.ctx.tuple_plans.get(&name).cloned() {
                    let op = Op::Parameter { index: *index, replica_equal: false };
                    self.push(Instruction::new(name.clone(), plan_type(&i.ty, &plan), op, vec![]));
                    return Ok(Val { name, spec: None, elems: Some(plan) });
                }
                self.copy(i)
            }
            Op::GetTupleElement { index } => {
                let src = self.env[&i.operands[0]].clone();
                match src.elems.as_ref().and_then(|e| e.get(*index).cloned().flatten()) {
                    Some(spec) => {
                        self.push(Instruction::new(name.clone(), shard_type(&spec), i.op.clone(), vec![src.name]));
                        Ok(Val::sharded(name, spec))
                    }
                    None => {
                        self.push(Instruction::new(name.clone(), i.ty.clone(), i.op.clone(), vec![src.name]));
                        Ok(Val::plain(name))
                    }
                }
            }
            Op::Tuple => {
                let plan = self.ctx.tuple_plans.get(&name).cloned();
                let keep = self.ctx.keep_root_sharded && name == self.c.root;
                if plan.is_none() && !keep {
                    return self.copy(i);
                }
                let mut operands = Vec::new();
                let mut elems = Vec::new();
                for (k, o) in i.operands.iter().enumerate() {
                    match plan.as_ref().and_then(|p| p.get(k).cloned().flatten()) {
                        Some(spec) => {
                            operands.push(self.sharded(o, &spec));
                            elems.push(Some(spec));
                        }
                        None if keep => {
                            let v = self.env[o].clone();
                            operands.push(v.name);
                            elems.push(v.spec);
                        }
                        None => {
                            operands.push(self.full(o));
                            elems.push(None);
                        }
                    }
                }
                let ty = plan_type(&i.ty, &elems);
                self.push(Instruction::new(name.clone(), ty, Op::Tuple, operands));
                Ok(Val { name, spec: None, elems: Some(elems) })
            }
            Op::While { .. } => {
                let Some(plan) = self.ctx.tuple_plans.get(&name).cloned() else { return self.copy(i) };
                let init = self.env[&i.operands[0]].clone();
                if init.elems.as_ref() != Some(&plan) {
                    return Err(Error::Transform(format!("loop `{name}` must be initialized by a tuple")));
                }
                self.push(Instruction::new(name.clone(), plan_type(&i.ty, &plan), i.op.clone(), vec![init.name]));
                Ok(Val { name, spec: None, elems: Some(plan) })
            }
            Op::Conditional { branches } => {
                let mut operands = vec![self.full(&i.operands[0])];
                let mut new_branches = branches.clone();
                for (j, o) in i.operands.iter().enumerate().skip(1) {
                    let v = self.env[o].clone();
                    match v.spec {
                        Some(spec) if self.branch_local.contains(&(o.as_str(), i.name.as_str())) => {
                            new_branches[j - 1] = self.clone_branch(&branches[j - 1], &spec)?;
                            operands.push(v.name);
                        }
                        _ => operands.push(self.full(o)),
                    }
                }
                let op = Op::Conditional { branches: new_branches };
                self.push(Instruction::new(name.clone(), i.ty.clone(), op, operands));
                Ok(Val::plain(name))
            }
            _ => self.copy(i),
        }
    }

    /// Branch `name` taking a shard and gathering it on entry. Shared branches
    /// are copied.
    fn clone_branch(&mut self, name: &str, spec: &ShardingSpec) -> Result<String> {
        let bc = self
            .m
            .computation(name)
            .ok_or_else(|| Error::Transform(format!("unknown branch computation `{name}`")))?;
        let pending = self.b.take();
        let callers: usize = self
            .m
            .computations
            .iter()
            .flat_map(|c| &c.instructions)
            .flat_map(|i| i.op.called_computations())
            .filter(|&c| c == name)
            .count();
        // a branch with one caller keeps its names
        let in_place = callers == 1;
        let new_name = if in_place { name.to_string() } else { self.b.fresh(&format!("{name}.sharded")) };
        let mut rename: HashMap<&str, String> = HashMap::new();
        let mut insts = Vec::new();
        for x in &bc.instructions {
            let nn = if in_place { x.name.clone() } else { self.b.fresh(&x.name) };
            if let Op::Parameter { index, .. } = x.op {
                let op = Op::Parameter { index, replica_equal: false };
                insts.push(Instruction::new(nn.clone(), shard_type(spec), op, vec![]));
                let g = build_unshard_ops(self.b, spec, &nn);
                insts.extend(self.b.take());
                rename.insert(&x.name, g);
            } else {
                let operands = x.operands.iter().map(|o| rename[o.as_str()].clone()).collect();
                insts.push(Instruction::new(nn.clone(), x.ty.clone(), x.op.clone(), operands));
                rename.insert(&x.name, nn);
            }
        }
        let root = rename[bc.root.as_str()].clone();
        self.extra.push(Computation { name: new_name.clone(), instructions: insts, root });
        self.b.instructions = pending;
        Ok(new_name)
    }
}
