//! Ring collectives.
//!
//! Messages follow the ring schedule round by round, but every element is
//! folded in ring-position order once all contributions have arrived, so a
//! reduce-scatter followed by an all-gather is bitwise equal to an all-reduce
//! over the same rings.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use super::kernels::combine;
use super::value::round;
use crate::error::{Error, Result};
use crate::ir::{ElementType, ReduceKind, ReplicaGroups, Shape, Tiling, Topology};
use crate::sharding_spec::ShardingSpec;

/// Message accounting of one collective.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RingStats {
    pub rounds: usize,
    /// Bytes sent over each directed link, keyed by (from, to).
    pub link_bytes: BTreeMap<(usize, usize), usize>,
    /// Piece size of each phase in physical bytes.
    pub phase_piece_bytes: Vec<usize>,
    pub phase_rounds: Vec<usize>,
}

impl RingStats {
    fn merge(&mut self, other: RingStats) {
        for (k, v) in other.link_bytes {
            *self.link_bytes.entry(k).or_default() += v;
        }
    }
}

/// Folds `values` in order.
pub(crate) fn fold(op: ReduceKind, et: ElementType, values: &[&[f64]]) -> Vec<f64> {
    let mut acc: Vec<f64> = values[0].to_vec();
    for v in &values[1..] {
        for (a, b) in acc.iter_mut().zip(v.iter()) {
            *a = combine(op, et, *a, *b);
        }
    }
    acc.into_iter().map(|x| round(et, x)).collect()
}

/// All-reduce of one group's values in canonical order: ring order for a
/// single ring; rows first, then columns, for a full-mesh group.
pub(crate) fn fold_group(
    topo: &Topology,
    groups: &ReplicaGroups,
    members: &[usize],
    value: &dyn Fn(usize) -> Arc<[f64]>,
    op: ReduceKind,
    et: ElementType,
) -> Vec<f64> {
    if topo.is_multi_phase(groups) {
        let n = topo.replica_count();
        let partials: Vec<Vec<f64>> = topo
            .rows()
            .resolve(n)
            .iter()
            .map(|row| {
                let vals: Vec<Arc<[f64]>> = row.iter().map(|&r| value(r)).collect();
                let refs: Vec<&[f64]> = vals.iter().map(|v| &v[..]).collect();
                fold(op, et, &refs)
            })
            .collect();
        let refs: Vec<&[f64]> = partials.iter().map(|v| &v[..]).collect();
        fold(op, et, &refs)
    } else {
        let vals: Vec<Arc<[f64]>> = members.iter().map(|&r| value(r)).collect();
        let refs: Vec<&[f64]> = vals.iter().map(|v| &v[..]).collect();
        fold(op, et, &refs)
    }
}

/// Splits row-major `data` of `dims` into `n` equal parts along `dim`.
pub(crate) fn split(data: &[f64], dims: &[usize], dim: usize, n: usize) -> Vec<Vec<f64>> {
    let outer: usize = dims[..dim].iter().product();
    let inner: usize = dims[dim..].iter().product::<usize>() / n;
    (0..n)
        .map(|k| {
            let mut part = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = o * inner * n + k * inner;
                part.extend_from_slice(&data[base..base + inner]);
            }
            part
        })
        .collect()
}

/// Inverse of [`split`].
pub(crate) fn concat(parts: &[Vec<f64>], outer: usize) -> Vec<f64> {
    let inner = parts[0].len() / outer.max(1);
    let mut out = Vec::with_capacity(parts.len() * parts[0].len());
    for o in 0..outer {
        for p in parts {
            out.extend_from_slice(&p[o * inner..(o + 1) * inner]);
        }
    }
    out
}

fn piece_bytes(shape: &Shape, dim: usize, divisor: usize, tiling: Tiling) -> usize {
    let mut dims = shape.dims.clone();
    if !dims.is_empty() {
        dims[dim] /= divisor;
    }
    tiling.physical_bytes(&shape.with_dims(dims))
}

/// One reduce-scatter phase over `ring`. `bufs[i]` is member i's buffer;
/// member i ends with the fully reduced part i.
fn rs_phase(
    ring: &[usize],
    bufs: &[Vec<f64>],
    dims: &[usize],
    dim: usize,
    op: ReduceKind,
    et: ElementType,
    bytes: usize,
    stats: &mut RingStats,
) -> Vec<Vec<f64>> {
    let n = ring.len();
    if n == 1 {
        return bufs.to_vec();
    }
    let parts: Vec<Vec<Arc<[f64]>>> =
        bufs.iter().map(|b| split(b, dims, dim, n).into_iter().map(Arc::from).collect()).collect();
    // contributions[p][c]: (origin position, piece) pairs member p holds for part c
    let mut contributions: Vec<Vec<Vec<(usize, Arc<[f64]>)>>> = (0..n)
        .map(|p| (0..n).map(|c| vec![(p, parts[p][c].clone())]).collect())
        .collect();
    for s in 0..n - 1 {
        let sends: Vec<(usize, usize, Vec<(usize, Arc<[f64]>)>)> = (0..n)
            .map(|p| {
                let c = (p + 2 * n - s - 1) % n;
                ((p + 1) % n, c, contributions[p][c].clone())
            })
            .collect();
        for (p, (to, c, msg)) in sends.into_iter().enumerate() {
            *stats.link_bytes.entry((ring[p], ring[to])).or_default() += bytes;
            contributions[to][c].extend(msg);
        }
    }
    (0..n)
        .map(|p| {
            let mut held = std::mem::take(&mut contributions[p][p]);
            held.sort_by_key(|(origin, _)| *origin);
            debug_assert_eq!(held.len(), n);
            let refs: Vec<&[f64]> = held.iter().map(|(_, v)| &v[..]).collect();
            fold(op, et, &refs)
        })
        .collect()
}

/// One all-gather phase: member i contributes part i, all end with the
/// concatenation along `dim`.
fn ag_phase(ring: &[usize], parts: &[Vec<f64>], outer: usize, bytes: usize, stats: &mut RingStats) -> Vec<f64> {
    let n = ring.len();
    if n == 1 {
        return parts[0].clone();
    }
    let mut held: Vec<Vec<Option<usize>>> = (0..n).map(|p| (0..n).map(|c| (c == p).then_some(c)).collect()).collect();
    for s in 0..n - 1 {
        let sends: Vec<(usize, usize)> = (0..n).map(|p| ((p + 1) % n, (p + n - s) % n)).collect();
        for (p, (to, c)) in sends.into_iter().enumerate() {
            debug_assert!(held[p][c].is_some());
            *stats.link_bytes.entry((ring[p], ring[to])).or_default() += bytes;
            held[to][c] = held[p][c];
        }
    }
    debug_assert!(held.iter().all(|h| h.iter().all(Option::is_some)));
    concat(parts, outer)
}

fn check_group(spec: &ShardingSpec, topo: &Topology) -> Result<()> {
    let n = topo.replica_count();
    spec.group.validate(n).map_err(Error::Simulation)?;
    if spec.group.group_size(n) != spec.shard_count {
        return Err(Error::Simulation(format!(
            "spec shards {} ways but its group has {} members",
            spec.shard_count,
            spec.group.group_size(n)
        )));
    }
    Ok(())
}

/// The rings of each phase, with the member order that makes member i of
/// the last phase hold shard i of the part the earlier phases left it.
fn phase_rings(topo: &Topology, group: &ReplicaGroups) -> Vec<Vec<Vec<usize>>> {
    topo.phases(group)
}

/// Reduce-scatter of per-replica tensors (indexed by replica id, shaped as
/// `spec.source`). Replica r receives shard `shard_position(r)` of the
/// formatted sum; padding is applied while preparing pieces.
pub fn ring_reduce_scatter(
    values: &[Vec<f64>],
    spec: &ShardingSpec,
    topo: &Topology,
    op: ReduceKind,
    tiling: Tiling,
) -> Result<(Vec<Vec<f64>>, RingStats)> {
    check_group(spec, topo)?;
    let et = spec.source.etype;
    let formatted_shape = spec.formatted_shape();
    let dims = formatted_shape.dims.clone();
    let dim = spec.shard_dim;
    let mut stats = RingStats::default();
    let mut bufs: Vec<Vec<f64>> = values.iter().map(|v| spec.format(v, tiling, 0.0, |f| round(et, f))).collect();
    if spec.shard_count == 1 {
        return Ok((bufs, stats));
    }
    let mut cur_dims = dims.clone();
    let mut divisor = 1;
    for rings in phase_rings(topo, &spec.group) {
        let size = rings[0].len();
        divisor *= size;
        let bytes = piece_bytes(&formatted_shape, dim, divisor, tiling);
        stats.phase_piece_bytes.push(bytes);
        stats.phase_rounds.push(size - 1);
        stats.rounds += size - 1;
        let mut next = bufs.clone();
        for ring in &rings {
            let member_bufs: Vec<Vec<f64>> = ring.iter().map(|&r| bufs[r].clone()).collect();
            let mut local = RingStats::default();
            let out = rs_phase(ring, &member_bufs, &cur_dims, dim, op, et, bytes, &mut local);
            stats.merge(local);
            for (i, &r) in ring.iter().enumerate() {
                next[r] = out[i].clone();
            }
        }
        bufs = next;
        cur_dims[dim] /= size;
    }
    Ok((bufs, stats))
}

/// All-gather of shards (indexed by replica id) followed by the reverse
/// formatting steps; every member of a group ends with the same tensor.
pub fn ring_all_gather(
    shards: &[Vec<f64>],
    spec: &ShardingSpec,
    topo: &Topology,
    tiling: Tiling,
) -> Result<(Vec<Vec<f64>>, RingStats)> {
    check_group(spec, topo)?;
    let mut stats = RingStats::default();
    if spec.shard_count == 1 {
        let out = shards.iter().map(|s| spec.unformat(s, tiling, 0.0)).collect();
        return Ok((out, stats));
    }
    let formatted_shape = spec.formatted_shape();
    let dim = spec.shard_dim;
    let outer: usize = formatted_shape.dims[..dim].iter().product();
    let mut phases = phase_rings(topo, &spec.group);
    phases.reverse();
    let total: usize = spec.shard_count;
    let mut divisor = total;
    let mut bufs: Vec<Vec<f64>> = shards.to_vec();
    for rings in phases {
        let size = rings[0].len();
        let bytes = piece_bytes(&formatted_shape, dim, divisor, tiling);
        stats.phase_piece_bytes.push(bytes);
        stats.phase_rounds.push(size - 1);
        stats.rounds += size - 1;
        let mut next = bufs.clone();
        for ring in &rings {
            let parts: Vec<Vec<f64>> = ring.iter().map(|&r| bufs[r].clone()).collect();
            let mut local = RingStats::default();
            let full = ag_phase(ring, &parts, outer, bytes, &mut local);
            stats.merge(local);
            for &r in ring {
                next[r] = full.clone();
            }
        }
        bufs = next;
        divisor /= size;
    }
    let out = bufs.iter().map(|b| spec.unformat(b, tiling, 0.0)).collect();
    Ok((out, stats))
}

/// Plain all-reduce of per-replica tensors over `groups`.
pub fn all_reduce(
    values: &[Vec<f64>],
    groups: &ReplicaGroups,
    topo: &Topology,
    op: ReduceKind,
    et: ElementType,
) -> Result<Vec<Vec<f64>>> {
    let n = topo.replica_count();
    groups.validate(n).map_err(Error::Simulation)?;
    let mut out = vec![Vec::new(); values.len()];
    let get = |r: usize| -> Arc<[f64]> { Arc::from(values[r].as_slice()) };
    for g in groups.resolve(n) {
        let folded = fold_group(topo, groups, &g, &get, op, et);
        for &r in &g {
            out[r] = folded.clone();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharding_spec::choose_spec;

    fn spec(dims: &[usize], s: usize) -> ShardingSpec {
        choose_spec(&Shape::new(ElementType::F32, dims.to_vec()), s)
    }

    #[test]
    fn four_ones_reduce_to_four() {
        let topo = Topology::Ring(4);
        let values = vec![vec![1.0; 4]; 4];
        let (shards, stats) = ring_reduce_scatter(&values, &spec(&[4], 4), &topo, ReduceKind::Add, Tiling::default()).unwrap();
        assert_eq!(shards, vec![vec![4.0]; 4]);
        assert_eq!(stats.rounds, 3);
    }

    #[test]
    fn gather_concatenates_by_shard_id() {
        let topo = Topology::Ring(4);
        let shards = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let (full, _) = ring_all_gather(&shards, &spec(&[4], 4), &topo, Tiling::default()).unwrap();
        assert!(full.iter().all(|f| f == &vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn mesh_two_phase_matches_global_sum() {
        let topo = Topology::Mesh { rows: 2, cols: 2 };
        let values: Vec<Vec<f64>> = (0..4).map(|r| (0..8).map(|i| (r * 10 + i) as f64).collect()).collect();
        let sp = spec(&[8], 4);
        let (shards, stats) = ring_reduce_scatter(&values, &sp, &topo, ReduceKind::Add, Tiling::default()).unwrap();
        assert_eq!(stats.phase_rounds, vec![1, 1]);
        let total: Vec<f64> = (0..8).map(|i| (0..4).map(|r| values[r][i]).sum()).collect();
        for r in 0..4 {
            let pos = topo.shard_position(&ReplicaGroups::All, r).position;
            assert_eq!(shards[r], total[pos * 2..pos * 2 + 2].to_vec());
        }
        let (full, _) = ring_all_gather(&shards, &sp, &topo, Tiling::default()).unwrap();
        assert!(full.iter().all(|f| f == &total));
    }

    #[test]
    fn link_bytes_equal_rounds_times_piece() {
        let topo = Topology::Ring(8);
        let sp = spec(&[64, 128], 8);
        let values = vec![vec![1.0; 64 * 128]; 8];
        let (_, stats) = ring_reduce_scatter(&values, &sp, &topo, ReduceKind::Add, Tiling::default()).unwrap();
        let piece = 8 * 128 * 4;
        assert_eq!(stats.phase_piece_bytes, vec![piece]);
        assert_eq!(stats.link_bytes.len(), 8);
        assert!(stats.link_bytes.values().all(|&b| b == 7 * piece));
    }

    fn topologies() -> Vec<Topology> {
        vec![
            Topology::Ring(2),
            Topology::Ring(5),
            Topology::Ring(8),
            Topology::Mesh { rows: 2, cols: 2 },
            Topology::Mesh { rows: 2, cols: 4 },
            Topology::Mesh { rows: 3, cols: 2 },
        ]
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(96))]
        #[test]
        fn reduce_scatter_then_gather_is_all_reduce(
            topo in proptest::sample::select(topologies()),
            dims in proptest::collection::vec(1usize..12, 1..=3),
            int in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let n = topo.replica_count();
            let et = if int { ElementType::S32 } else { ElementType::F32 };
            let shape = Shape::new(et, dims.clone());
            let count = shape.element_count();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..count).map(|_| round(et, if int { rng.gen_range(-1000..1000) as f64 } else { rng.gen_range(-1.0..1.0) })).collect())
                .collect();
            let t = Tiling::default();
            let spec = choose_spec(&shape, n);
            let ar = all_reduce(&values, &ReplicaGroups::All, &topo, ReduceKind::Add, et).unwrap();
            let (shards, stats) = ring_reduce_scatter(&values, &spec, &topo, ReduceKind::Add, t).unwrap();
            let (full, _) = ring_all_gather(&shards, &spec, &topo, t).unwrap();
            for r in 0..n {
                proptest::prop_assert_eq!(&full[r], &ar[r]);
            }
            // every replica sends rounds x piece in each phase
            let expected: usize = stats.phase_rounds.iter().zip(&stats.phase_piece_bytes).map(|(r, p)| r * p).sum();
            for r in 0..n {
                let sent: usize = stats.link_bytes.iter().filter(|((from, _), _)| *from == r).map(|(_, b)| b).sum();
                proptest::prop_assert_eq!(sent, expected);
            }
        }
    }
}
