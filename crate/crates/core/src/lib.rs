//! Automatic cross-replica sharding of the weight update in data-parallel
//! training graphs.

pub mod compare;
pub mod error;
pub mod gen;
pub mod ir;
pub mod loops;
pub mod profitability;
pub mod redundancy;
pub mod sharding_spec;
pub mod simulator;
pub mod transform;

pub use error::{Error, Result};
