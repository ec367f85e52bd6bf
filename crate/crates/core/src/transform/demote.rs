//! All-gathers whose every consumer converts to bf16 gather in bf16 instead.

use std::collections::HashMap;

use crate::ir::{Builder, ElementType, FusionKind, Instruction, Module, Op, Type};

/// Moves a bf16 convert in front of each all-gather whose users are all
/// converts to bf16. Gathered bytes halve and every consumer sees the same
/// values, since rounding commutes with the gather.
pub fn demote_allgather_precision(m: &Module) -> Module {
    let mut out = m.clone();
    let mut b = Builder::for_module(m);
    for c in &mut out.computations {
        let users = c.users();
        let mut demote: HashMap<String, Vec<String>> = HashMap::new();
        for i in &c.instructions {
            let Op::Fusion(FusionKind::Unshard { specs }) = &i.op else { continue };
            if specs.len() != 1 || specs[0].source.etype == ElementType::F16R || i.name == c.root {
                continue;
            }
            let us = &users[i.name.as_str()];
            let all_demote = !us.is_empty()
                && us.iter().all(|u| {
                    c.get(u).is_some_and(|x| {
                        matches!(x.op, Op::Convert)
                            && x.ty.as_array().is_some_and(|s| s.etype == ElementType::F16R)
                            && x.operands.len() == 1
                    })
                });
            if all_demote {
                demote.insert(i.name.clone(), us.iter().map(|u| u.to_string()).collect());
            }
        }
        if demote.is_empty() {
            continue;
        }
        let mut rename: HashMap<String, String> = HashMap::new();
        let skip: std::collections::HashSet<String> = demote.values().flatten().cloned().collect();
        let mut insts: Vec<Instruction> = Vec::with_capacity(c.instructions.len());
        for i in &c.instructions {
            if skip.contains(&i.name) {
                continue;
            }
            let mut i = i.clone();
            for o in &mut i.operands {
                if let Some(r) = rename.get(o.as_str()) {
                    *o = r.clone();
                }
            }
            if let (Some(converts), Op::Fusion(FusionKind::Unshard { specs })) = (demote.get(&i.name), &i.op) {
                let spec = specs[0].with_etype(ElementType::F16R);
                let narrow = b.convert(&format!("{}.bf16", i.operands[0]), &spec.shard_shape(), &i.operands[0]);
                let g = b.fusion(
                    &format!("{}.bf16", i.name),
                    Type::Array(spec.source.clone()),
                    FusionKind::Unshard { specs: vec![spec] },
                    &[&narrow],
                );
                insts.extend(b.take());
                for cv in converts {
                    rename.insert(cv.clone(), g.clone());
                }
                continue;
            }
            insts.push(i);
        }
        if let Some(r) = rename.get(&c.root) {
            c.root = r.clone();
        }
        c.instructions = insts;
    }
    out
}
