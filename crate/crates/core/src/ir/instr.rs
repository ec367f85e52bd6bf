//! Opcodes and instructions.

use serde::{Deserialize, Serialize};

use super::shape::Type;
use super::topology::ReplicaGroups;
use crate::sharding_spec::ShardingSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Power,
    Rem,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 8] = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Max,
        BinaryOp::Min,
        BinaryOp::Power,
        BinaryOp::Rem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Max => "max",
            BinaryOp::Min => "min",
            BinaryOp::Power => "power",
            BinaryOp::Rem => "rem",
        }
    }
}

/// Reduction function of `reduce` and `all-reduce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceKind {
    Add,
    Mul,
    Max,
    Min,
}

impl ReduceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReduceKind::Add => "add",
            ReduceKind::Mul => "mul",
            ReduceKind::Max => "max",
            ReduceKind::Min => "min",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "add" => ReduceKind::Add,
            "mul" => ReduceKind::Mul,
            "max" => ReduceKind::Max,
            "min" => ReduceKind::Min,
            _ => return None,
        })
    }

    /// Identity element used to mask padding.
    pub fn identity(self) -> f64 {
        match self {
            ReduceKind::Add => 0.0,
            ReduceKind::Mul => 1.0,
            ReduceKind::Max => f64::NEG_INFINITY,
            ReduceKind::Min => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareDir {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CompareDir {
    pub fn name(self) -> &'static str {
        match self {
            CompareDir::Lt => "lt",
            CompareDir::Le => "le",
            CompareDir::Gt => "gt",
            CompareDir::Ge => "ge",
            CompareDir::Eq => "eq",
            CompareDir::Ne => "ne",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "lt" => CompareDir::Lt,
            "le" => CompareDir::Le,
            "gt" => CompareDir::Gt,
            "ge" => CompareDir::Ge,
            "eq" => CompareDir::Eq,
            "ne" => CompareDir::Ne,
            _ => return None,
        })
    }
}

/// Constant payload: one value splatted over the shape, or every element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Splat(f64),
    Dense(Vec<f64>),
}

/// What a fusion instruction computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FusionKind {
    /// Plain operator group over a fused computation.
    Loop { calls: String },
    /// Formatting steps followed by the dynamic-slice of this replica's
    /// shard. Operands: (full tensor, replica-id).
    Shard { spec: ShardingSpec },
    /// Formatting plus all-reduce, keeping only this replica's shard. One
    /// spec per operand; variadic results form a tuple.
    ReduceScatter { op: ReduceKind, specs: Vec<ShardingSpec> },
    /// All-gather of shards followed by the reverse formatting steps.
    Unshard { specs: Vec<ShardingSpec> },
}

impl FusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Loop { .. } => "loop",
            FusionKind::Shard { .. } => "shard",
            FusionKind::ReduceScatter { .. } => "reduce-scatter",
            FusionKind::Unshard { .. } => "unshard",
        }
    }

    pub fn is_collective(&self) -> bool {
        matches!(self, FusionKind::ReduceScatter { .. } | FusionKind::Unshard { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Parameter { index: usize, replica_equal: bool },
    Constant(Literal),
    Iota { dim: usize },
    ReplicaId,
    Rng,
    Binary(BinaryOp),
    Sqrt,
    Compare(CompareDir),
    Select,
    Convert,
    /// `dims[i]` is the output dimension operand dimension `i` maps to.
    Broadcast { dims: Vec<usize> },
    /// Rank-2 contraction of one lhs dim with one rhs dim.
    Dot { lhs_contract: usize, rhs_contract: usize },
    Reduce { dims: Vec<usize>, op: ReduceKind },
    Reshape,
    Bitcast,
    /// Appends `high[d]` elements of `value` at the end of each dim.
    Pad { high: Vec<usize>, value: f64 },
    DynamicSlice { sizes: Vec<usize> },
    Tuple,
    GetTupleElement { index: usize },
    AllReduce { op: ReduceKind, groups: ReplicaGroups },
    While { condition: String, body: String },
    /// Operands: predicate, then one argument per branch.
    Conditional { branches: Vec<String> },
    Fusion(FusionKind),
    Outfeed,
}

impl Op {
    pub fn opcode(&self) -> &'static str {
        match self {
            Op::Parameter { .. } => "parameter",
            Op::Constant(_) => "constant",
            Op::Iota { .. } => "iota",
            Op::ReplicaId => "replica-id",
            Op::Rng => "rng",
            Op::Binary(b) => b.name(),
            Op::Sqrt => "sqrt",
            Op::Compare(_) => "compare",
            Op::Select => "select",
            Op::Convert => "convert",
            Op::Broadcast { .. } => "broadcast",
            Op::Dot { .. } => "dot",
            Op::Reduce { .. } => "reduce",
            Op::Reshape => "reshape",
            Op::Bitcast => "bitcast",
            Op::Pad { .. } => "pad",
            Op::DynamicSlice { .. } => "dynamic-slice",
            Op::Tuple => "tuple",
            Op::GetTupleElement { .. } => "get-tuple-element",
            Op::AllReduce { .. } => "all-reduce",
            Op::While { .. } => "while",
            Op::Conditional { .. } => "conditional",
            Op::Fusion(_) => "fusion",
            Op::Outfeed => "outfeed",
        }
    }

    /// Side-effecting or nondeterministic across replicas.
    pub fn is_pure(&self) -> bool {
        !matches!(self, Op::Outfeed | Op::Rng | Op::ReplicaId)
    }

    /// Produces values that differ per replica by construction.
    pub fn is_replica_varying(&self) -> bool {
        matches!(self, Op::Rng | Op::ReplicaId)
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            Op::Binary(_) | Op::Sqrt | Op::Compare(_) | Op::Select | Op::Convert
        )
    }

    pub fn is_collective(&self) -> bool {
        match self {
            Op::AllReduce { .. } => true,
            Op::Fusion(k) => k.is_collective(),
            _ => false,
        }
    }

    /// Names of nested computations this op calls.
    pub fn called_computations(&self) -> Vec<&str> {
        match self {
            Op::While { condition, body } => vec![condition.as_str(), body.as_str()],
            Op::Conditional { branches } => branches.iter().map(String::as_str).collect(),
            Op::Fusion(FusionKind::Loop { calls }) => vec![calls.as_str()],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    /// Module-unique name, printed with a leading `%`.
    pub name: String,
    pub ty: Type,
    pub op: Op,
    pub operands: Vec<String>,
}

impl Instruction {
    pub fn new(name: impl Into<String>, ty: Type, op: Op, operands: Vec<String>) -> Self {
        Instruction { name: name.into(), ty, op, operands }
    }

    pub fn shape(&self) -> Option<&super::shape::Shape> {
        self.ty.as_array()
    }
}
