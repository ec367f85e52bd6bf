//! Sharding within groups of replicas plus an all-reduce across groups.

use crate::error::{Error, Result};
use crate::ir::{Module, ReplicaGroups};
use crate::profitability::{decide, CostModel, ProfitOptions};

use super::{apply, TransformResult};

/// Shards every supported cluster within `groups`: a group-local
/// reduce-scatter, an all-reduce of the shard across groups and group-local
/// all-gathers. `groups` must be ALL or the rows of the module's mesh.
pub fn apply_partial_sharding(m: &Module, groups: &ReplicaGroups) -> Result<TransformResult> {
    let n = m.replica_count;
    groups.validate(n).map_err(Error::Transform)?;
    let rows = m.topology.rows();
    if !groups.is_all() && groups.resolve(n) != rows.resolve(n) {
        return Err(Error::Transform(format!("groups {groups} are not the rows of topology {}", m.topology)));
    }
    let opts = ProfitOptions { groups: Some(groups.clone()), force: Some(true), ..ProfitOptions::default() };
    apply(m, &decide(m, &CostModel::default(), &opts))
}
