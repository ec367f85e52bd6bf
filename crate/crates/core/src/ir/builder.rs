//! Small helper for emitting instruction sequences with fresh names.

use std::collections::HashSet;

use super::instr::{BinaryOp, CompareDir, FusionKind, Instruction, Literal, Op, ReduceKind};
use super::module::Module;
use super::shape::{ElementType, Shape, Type};
use super::topology::ReplicaGroups;

/// Accumulates instructions, handing out names unused in the module.
#[derive(Debug, Default)]
pub struct Builder {
    taken: HashSet<String>,
    pub instructions: Vec<Instruction>,
}

impl Builder {
    pub fn new() -> Self {
        Builder::default()
    }

    /// A builder that avoids every name already present in `m`.
    pub fn for_module(m: &Module) -> Self {
        let mut taken = HashSet::new();
        for c in &m.computations {
            taken.insert(c.name.clone());
            for i in &c.instructions {
                taken.insert(i.name.clone());
            }
        }
        Builder { taken, instructions: Vec::new() }
    }

    pub fn reserve(&mut self, name: &str) {
        self.taken.insert(name.to_string());
    }

    pub fn fresh(&mut self, base: &str) -> String {
        let name = if self.taken.contains(base) {
            (1..).map(|i| format!("{base}.{i}")).find(|n| !self.taken.contains(n)).unwrap()
        } else {
            base.to_string()
        };
        self.taken.insert(name.clone());
        name
    }

    /// Moves out the instructions emitted so far, keeping the name set.
    pub fn take(&mut self) -> Vec<Instruction> {
        std::mem::take(&mut self.instructions)
    }

    pub fn add(&mut self, base: &str, ty: Type, op: Op, operands: &[&str]) -> String {
        let name = self.fresh(base);
        self.instructions.push(Instruction::new(
            name.clone(),
            ty,
            op,
            operands.iter().map(|s| s.to_string()).collect(),
        ));
        name
    }

    pub fn parameter(&mut self, base: &str, ty: Type, index: usize, replica_equal: bool) -> String {
        self.add(base, ty, Op::Parameter { index, replica_equal }, &[])
    }

    pub fn constant(&mut self, base: &str, shape: Shape, value: f64) -> String {
        self.add(base, Type::Array(shape), Op::Constant(Literal::Splat(value)), &[])
    }

    pub fn dense(&mut self, base: &str, shape: Shape, values: Vec<f64>) -> String {
        self.add(base, Type::Array(shape), Op::Constant(Literal::Dense(values)), &[])
    }

    /// Scalar constant broadcast to `shape`.
    pub fn splat(&mut self, base: &str, shape: &Shape, value: f64) -> String {
        let c = self.constant(&format!("{base}.c"), Shape::scalar(shape.etype), value);
        if shape.is_scalar() {
            return c;
        }
        self.add(base, Type::Array(shape.clone()), Op::Broadcast { dims: vec![] }, &[&c])
    }

    pub fn broadcast(&mut self, base: &str, shape: &Shape, operand: &str, dims: Vec<usize>) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Broadcast { dims }, &[operand])
    }

    pub fn binary(&mut self, base: &str, op: BinaryOp, shape: &Shape, a: &str, b: &str) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Binary(op), &[a, b])
    }

    pub fn sqrt(&mut self, base: &str, shape: &Shape, a: &str) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Sqrt, &[a])
    }

    pub fn compare(&mut self, base: &str, dir: CompareDir, dims: &[usize], a: &str, b: &str) -> String {
        let ty = Type::array(ElementType::Pred, dims.to_vec());
        self.add(base, ty, Op::Compare(dir), &[a, b])
    }

    pub fn select(&mut self, base: &str, shape: &Shape, p: &str, a: &str, b: &str) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Select, &[p, a, b])
    }

    pub fn convert(&mut self, base: &str, shape: &Shape, a: &str) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Convert, &[a])
    }

    pub fn reshape(&mut self, base: &str, shape: &Shape, a: &str) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Reshape, &[a])
    }

    pub fn iota(&mut self, base: &str, shape: &Shape, dim: usize) -> String {
        self.add(base, Type::Array(shape.clone()), Op::Iota { dim }, &[])
    }

    pub fn dot(&mut self, base: &str, shape: &Shape, a: &str, b: &str, lc: usize, rc: usize) -> String {
        self.add(
            base,
            Type::Array(shape.clone()),
            Op::Dot { lhs_contract: lc, rhs_contract: rc },
            &[a, b],
        )
    }

    pub fn reduce_all(&mut self, base: &str, op: ReduceKind, operand: &Shape, a: &str) -> String {
        let dims = (0..operand.rank()).collect();
        self.add(base, Type::Array(Shape::scalar(operand.etype)), Op::Reduce { dims, op }, &[a])
    }

    pub fn all_reduce(&mut self, base: &str, ty: Type, op: ReduceKind, groups: ReplicaGroups, xs: &[&str]) -> String {
        self.add(base, ty, Op::AllReduce { op, groups }, xs)
    }

    pub fn gte(&mut self, base: &str, ty: Type, tuple: &str, index: usize) -> String {
        self.add(base, ty, Op::GetTupleElement { index }, &[tuple])
    }

    pub fn tuple(&mut self, base: &str, elems: &[(&str, Type)]) -> String {
        let ty = Type::Tuple(elems.iter().map(|(_, t)| t.clone()).collect());
        let names: Vec<&str> = elems.iter().map(|(n, _)| *n).collect();
        self.add(base, ty, Op::Tuple, &names)
    }

    pub fn fusion(&mut self, base: &str, ty: Type, kind: FusionKind, operands: &[&str]) -> String {
        self.add(base, ty, Op::Fusion(kind), operands)
    }

    pub fn replica_id(&mut self, base: &str) -> String {
        self.add(base, Type::array(ElementType::S32, vec![]), Op::ReplicaId, &[])
    }
}
