//! Replica groups and device topologies.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Participants of a collective: every replica, or a partition into
/// disjoint equal-size groups.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplicaGroups {
    All,
    Groups(Vec<Vec<usize>>),
}

impl ReplicaGroups {
    pub fn is_all(&self) -> bool {
        matches!(self, ReplicaGroups::All)
    }

    /// Materialized groups for `n` replicas.
    pub fn resolve(&self, n: usize) -> Vec<Vec<usize>> {
        match self {
            ReplicaGroups::All => vec![(0..n).collect()],
            ReplicaGroups::Groups(g) => g.clone(),
        }
    }

    /// Size of each group (assumes a valid partition).
    pub fn group_size(&self, n: usize) -> usize {
        match self {
            ReplicaGroups::All => n,
            ReplicaGroups::Groups(g) => g.first().map_or(0, Vec::len),
        }
    }

    /// Checks that the groups are disjoint, cover `0..n` and have equal size.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        let groups = match self {
            ReplicaGroups::All => return Ok(()),
            ReplicaGroups::Groups(g) => g,
        };
        if groups.is_empty() {
            return Err("groups not disjoint / not covering: no groups".into());
        }
        let size = groups[0].len();
        if size == 0 || groups.iter().any(|g| g.len() != size) {
            return Err("groups have unequal cardinality".into());
        }
        let mut seen = vec![false; n];
        for &r in groups.iter().flatten() {
            if r >= n || seen[r] {
                return Err("groups not disjoint / not covering".into());
            }
            seen[r] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err("groups not disjoint / not covering".into());
        }
        Ok(())
    }

    /// Groups formed by the i-th member of every group: the "other axis" used
    /// for the cross-group all-reduce after a group-local reduce-scatter.
    pub fn complement(&self, n: usize) -> ReplicaGroups {
        let groups = self.resolve(n);
        let size = groups.first().map_or(0, Vec::len);
        let cross: Vec<Vec<usize>> =
            (0..size).map(|p| groups.iter().map(|g| g[p]).collect()).collect();
        ReplicaGroups::Groups(cross)
    }
}

impl fmt::Display for ReplicaGroups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplicaGroups::All => f.write_str("all"),
            ReplicaGroups::Groups(gs) => {
                f.write_str("{")?;
                for (i, g) in gs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    f.write_str("{")?;
                    super::shape::write_dims(f, g)?;
                    f.write_str("}")?;
                }
                f.write_str("}")
            }
        }
    }
}

/// Physical arrangement of the replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    /// 1-D ring of `n` replicas in id order.
    Ring(usize),
    /// 2-D mesh, replica `r` sits at row `r / cols`, column `r % cols`.
    Mesh { rows: usize, cols: usize },
}

impl Topology {
    /// Parses `ring`, `RxC` or `mesh RxC`. A ring takes its size from
    /// `replicas`; a mesh must match it when given.
    pub fn parse(s: &str, replicas: Option<usize>) -> Result<Topology, String> {
        let s = s.trim();
        if s == "ring" {
            return replicas.map(Topology::Ring).ok_or_else(|| "a ring needs a replica count".to_string());
        }
        let dims = s.strip_prefix("mesh").unwrap_or(s).trim_start_matches([' ', ':', '=']);
        let (r, c) = dims.split_once('x').ok_or_else(|| format!("unknown topology `{s}` (ring or RxC)"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&v| v > 0);
        let (Some(rows), Some(cols)) = (parse(r), parse(c)) else {
            return Err(format!("bad mesh size `{dims}`"));
        };
        match replicas {
            Some(n) if n != rows * cols => Err(format!("mesh {rows}x{cols} does not hold {n} replicas")),
            _ => Ok(Topology::Mesh { rows, cols }),
        }
    }

    pub fn replica_count(&self) -> usize {
        match *self {
            Topology::Ring(n) => n,
            Topology::Mesh { rows, cols } => rows * cols,
        }
    }

    pub fn rows(&self) -> ReplicaGroups {
        match *self {
            Topology::Ring(_) => ReplicaGroups::All,
            Topology::Mesh { rows, cols } => ReplicaGroups::Groups(
                (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect(),
            ),
        }
    }

    pub fn columns(&self) -> ReplicaGroups {
        match *self {
            Topology::Ring(n) => ReplicaGroups::Groups((0..n).map(|r| vec![r]).collect()),
            Topology::Mesh { rows, cols } => ReplicaGroups::Groups(
                (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect(),
            ),
        }
    }

    /// Ring successor inside `group` (group order is ring order).
    pub fn neighbor(&self, group: &[usize], replica: usize) -> Option<usize> {
        let pos = group.iter().position(|&r| r == replica)?;
        Some(group[(pos + 1) % group.len()])
    }

    /// Whether a collective over `groups` runs as two phases (row then
    /// column) on this topology.
    pub fn is_multi_phase(&self, groups: &ReplicaGroups) -> bool {
        matches!(self, Topology::Mesh { rows, cols } if groups.is_all() && *rows > 1 && *cols > 1)
    }

    /// Shard position of `replica` within its group. For full-group
    /// collectives on a mesh the id follows the two-phase schedule: the row
    /// phase picks the column block, the column phase the row inside it.
    pub fn shard_position(&self, groups: &ReplicaGroups, replica: usize) -> ShardPosition {
        match groups {
            ReplicaGroups::All => {
                let n = self.replica_count();
                let position = match *self {
                    Topology::Ring(_) => replica,
                    Topology::Mesh { rows, cols } => (replica % cols) * rows + replica / cols,
                };
                ShardPosition { group: 0, position, size: n }
            }
            ReplicaGroups::Groups(gs) => {
                for (gi, g) in gs.iter().enumerate() {
                    if let Some(p) = g.iter().position(|&r| r == replica) {
                        return ShardPosition { group: gi, position: p, size: g.len() };
                    }
                }
                ShardPosition { group: 0, position: 0, size: 1 }
            }
        }
    }

    /// Phases of a collective over one resolved group: each phase is a list
    /// of rings. Single-phase unless the group is the whole mesh.
    pub fn phases(&self, groups: &ReplicaGroups) -> Vec<Vec<Vec<usize>>> {
        if self.is_multi_phase(groups) {
            let rows = self.rows().resolve(self.replica_count());
            let cols = self.columns().resolve(self.replica_count());
            vec![rows, cols]
        } else {
            vec![groups.resolve(self.replica_count())]
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Ring(_) => f.write_str("ring"),
            Topology::Mesh { rows, cols } => write!(f, "mesh {rows}x{cols}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPosition {
    pub group: usize,
    pub position: usize,
    pub size: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cli_forms() {
        assert_eq!(Topology::parse("ring", Some(8)), Ok(Topology::Ring(8)));
        assert_eq!(Topology::parse("mesh 4x2", None), Ok(Topology::Mesh { rows: 4, cols: 2 }));
        assert_eq!(Topology::parse("32x64", Some(2048)), Ok(Topology::Mesh { rows: 32, cols: 64 }));
        assert!(Topology::parse("4x4", Some(8)).is_err());
        assert!(Topology::parse("ring", None).is_err());
        assert!(Topology::parse("torus", Some(4)).is_err());
    }

    #[test]
    fn validate_rejects_overlap() {
        let g = ReplicaGroups::Groups(vec![vec![0, 1], vec![1, 2]]);
        assert!(g.validate(4).unwrap_err().contains("not disjoint"));
        assert!(ReplicaGroups::Groups(vec![vec![0, 1], vec![2, 3]]).validate(4).is_ok());
        assert!(ReplicaGroups::Groups(vec![vec![0, 1, 2], vec![3]]).validate(4).is_err());
    }

    #[test]
    fn mesh_shard_positions_are_a_permutation() {
        let t = Topology::Mesh { rows: 2, cols: 4 };
        let mut ids: Vec<usize> =
            (0..8).map(|r| t.shard_position(&ReplicaGroups::All, r).position).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        // replica 5 = row 1, col 1 -> column block 1, row 1
        assert_eq!(t.shard_position(&ReplicaGroups::All, 5).position, 3);
    }

    #[test]
    fn complement_of_rows_is_columns() {
        let t = Topology::Mesh { rows: 2, cols: 3 };
        assert_eq!(t.rows().complement(6), t.columns());
    }
}
