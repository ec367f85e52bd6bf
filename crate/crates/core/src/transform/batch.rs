//! Merging independent collectives into variadic ones.

use std::collections::{HashMap, HashSet};

use crate::ir::{Computation, FusionKind, Instruction, Module, Op, ReduceKind, ReplicaGroups, Type};

/// Collectives that may share one invocation.
#[derive(Debug, Clone, PartialEq)]
enum Key {
    AllReduce(ReduceKind, ReplicaGroups),
    ReduceScatter(ReduceKind, ReplicaGroups, usize),
    AllGather(ReplicaGroups, usize),
}

fn key(i: &Instruction) -> Option<Key> {
    match &i.op {
        Op::AllReduce { op, groups } if i.operands.len() == 1 && i.ty.as_array().is_some() => {
            Some(Key::AllReduce(*op, groups.clone()))
        }
        Op::Fusion(FusionKind::ReduceScatter { op, specs }) if specs.len() == 1 => {
            Some(Key::ReduceScatter(*op, specs[0].group.clone(), specs[0].shard_count))
        }
        Op::Fusion(FusionKind::Unshard { specs }) if specs.len() == 1 => {
            Some(Key::AllGather(specs[0].group.clone(), specs[0].shard_count))
        }
        _ => None,
    }
}

fn merged_op(insts: &[&Instruction]) -> (Op, &'static str) {
    match &insts[0].op {
        Op::Fusion(FusionKind::ReduceScatter { op, .. }) => {
            let specs = insts.iter().flat_map(|i| match &i.op {
                Op::Fusion(FusionKind::ReduceScatter { specs, .. }) => specs.clone(),
                _ => unreachable!("batch members share a key"),
            });
            (Op::Fusion(FusionKind::ReduceScatter { op: *op, specs: specs.collect() }), "batched-reduce-scatter")
        }
        Op::Fusion(FusionKind::Unshard { .. }) => {
            let specs = insts.iter().flat_map(|i| match &i.op {
                Op::Fusion(FusionKind::Unshard { specs }) => specs.clone(),
                _ => unreachable!("batch members share a key"),
            });
            (Op::Fusion(FusionKind::Unshard { specs: specs.collect() }), "batched-all-gather")
        }
        op => (op.clone(), "batched-all-reduce"),
    }
}

struct Batch {
    key: Key,
    members: Vec<usize>,
}

fn ancestors<'a>(c: &'a Computation, idx: &HashMap<&str, usize>, start: usize, memo: &mut HashMap<usize, HashSet<usize>>) -> HashSet<usize> {
    if let Some(s) = memo.get(&start) {
        return s.clone();
    }
    let mut seen = HashSet::new();
    let mut stack: Vec<usize> = c.instructions[start].operands.iter().filter_map(|o| idx.get(o.as_str()).copied()).collect();
    while let Some(j) = stack.pop() {
        if seen.insert(j) {
            stack.extend(c.instructions[j].operands.iter().filter_map(|o| idx.get(o.as_str()).copied()));
        }
    }
    memo.insert(start, seen.clone());
    seen
}

fn batch_computation(c: &mut Computation, fresh: &mut impl FnMut(&str) -> String) {
    let idx: HashMap<&str, usize> = c.index();
    let mut memo = HashMap::new();
    let mut done: Vec<Batch> = Vec::new();
    let mut open: Vec<Batch> = Vec::new();
    for (k, i) in c.instructions.iter().enumerate() {
        match &i.op {
            Op::Outfeed | Op::Conditional { .. } | Op::While { .. } => done.append(&mut open),
            _ => {
                let Some(key) = key(i) else { continue };
                let anc = ancestors(c, &idx, k, &mut memo);
                let fits = open.iter_mut().find(|b| b.key == key && b.members.iter().all(|m| !anc.contains(m)));
                match fits {
                    Some(b) => b.members.push(k),
                    None => open.push(Batch { key, members: vec![k] }),
                }
            }
        }
    }
    done.append(&mut open);

    let batches: Vec<Batch> = done.into_iter().filter(|b| b.members.len() > 1).collect();
    if batches.is_empty() {
        return;
    }
    let mut replace: HashMap<usize, Vec<Instruction>> = HashMap::new();
    let mut drop: HashSet<usize> = HashSet::new();
    for b in &batches {
        let insts: Vec<&Instruction> = b.members.iter().map(|&m| &c.instructions[m]).collect();
        let (op, base) = merged_op(&insts);
        let name = fresh(base);
        let ty = Type::Tuple(insts.iter().map(|i| i.ty.clone()).collect());
        let operands = insts.iter().map(|i| i.operands[0].clone()).collect();
        let mut out = vec![Instruction::new(name.clone(), ty, op, operands)];
        for (k, i) in insts.iter().enumerate() {
            out.push(Instruction::new(i.name.clone(), i.ty.clone(), Op::GetTupleElement { index: k }, vec![name.clone()]));
        }
        let last = *b.members.last().unwrap();
        drop.extend(b.members.iter().copied());
        replace.insert(last, out);
    }
    let old = std::mem::take(&mut c.instructions);
    for (k, i) in old.into_iter().enumerate() {
        if let Some(out) = replace.remove(&k) {
            c.instructions.extend(out);
        } else if !drop.contains(&k) {
            c.instructions.push(i);
        }
    }
    c.sort().expect("batched members are independent");
}

/// Merges independent collectives of one kind into a variadic one per batch:
/// all-reduces with the same reduction and groups, and reduce-scatters or
/// all-gathers with the same groups and shard count. Batches never span an
/// outfeed, conditional or loop.
pub fn batch_collectives(m: &Module) -> Module {
    let mut out = m.clone();
    let mut b = crate::ir::Builder::for_module(m);
    for c in &mut out.computations {
        batch_computation(c, &mut |base| b.fresh(base));
    }
    out
}
