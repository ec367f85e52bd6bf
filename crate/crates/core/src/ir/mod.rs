//! The dataflow IR: shapes, instructions, computations, text form and verifier.

pub mod builder;
pub mod instr;
pub mod module;
pub mod shape;
pub mod text;
pub mod topology;
pub mod verify;

pub use builder::Builder;
pub use instr::{BinaryOp, CompareDir, FusionKind, Instruction, Literal, Op, ReduceKind};
pub use module::{Computation, Module};
pub use shape::{physical_bytes, ElementType, Shape, Tiling, Type};
pub use text::{parse_module, print_module};
pub use topology::{ReplicaGroups, ShardPosition, Topology};
pub use verify::{diagnostics, verify, Diagnostic};
