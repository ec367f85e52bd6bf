//! Per-tensor sharding formats: cheap reformatting steps followed by a slice
//! along one dimension, plus the masking needed to reduce over padded shards.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::builder::Builder;
use crate::ir::{
    BinaryOp, CompareDir, ElementType, FusionKind, Op, ReduceKind, ReplicaGroups, Shape, Tiling,
    Topology, Type,
};

/// One reformatting step applied before slicing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FormatStep {
    /// Merge or split of dims outside the tiled minor dims; no data movement.
    TrivialReshape(Vec<usize>),
    /// Reinterpretation of the tiled physical buffer as a new shape.
    Bitcast(Vec<usize>),
    /// Grow `dim` by `amount` elements at its end, filled with `fill`.
    Pad { dim: usize, amount: usize, fill: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardingSpec {
    pub source: Shape,
    pub steps: Vec<FormatStep>,
    pub shard_dim: usize,
    pub shard_count: usize,
    pub group: ReplicaGroups,
}

impl ShardingSpec {
    /// Spec that leaves the tensor whole.
    pub fn identity(source: Shape) -> Self {
        ShardingSpec {
            source,
            steps: Vec::new(),
            shard_dim: 0,
            shard_count: 1,
            group: ReplicaGroups::All,
        }
    }

    /// Dims after every formatting step.
    pub fn formatted_dims(&self) -> Vec<usize> {
        let mut dims = self.source.dims.clone();
        for step in &self.steps {
            match step {
                FormatStep::TrivialReshape(d) | FormatStep::Bitcast(d) => dims = d.clone(),
                FormatStep::Pad { dim, amount, .. } => dims[*dim] += amount,
            }
        }
        dims
    }

    pub fn formatted_shape(&self) -> Shape {
        self.source.with_dims(self.formatted_dims())
    }

    pub fn shard_dims(&self) -> Vec<usize> {
        let mut dims = self.formatted_dims();
        if self.shard_count > 1 {
            dims[self.shard_dim] /= self.shard_count;
        }
        dims
    }

    pub fn shard_shape(&self) -> Shape {
        self.source.with_dims(self.shard_dims())
    }

    /// Extent of one shard along the sharded dim.
    pub fn shard_extent(&self) -> usize {
        self.shard_dims().get(self.shard_dim).copied().unwrap_or(1)
    }

    pub fn is_identity(&self) -> bool {
        self.shard_count == 1 && self.steps.is_empty()
    }

    pub fn has_padding(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, FormatStep::Pad { .. }))
    }

    /// Bytes added by formatting on top of the source's physical size.
    pub fn padded_bytes(&self, tiling: Tiling) -> usize {
        tiling
            .physical_bytes(&self.formatted_shape())
            .saturating_sub(tiling.physical_bytes(&self.source))
    }

    /// Same spec over a different element type (precision demotion).
    pub fn with_etype(&self, etype: ElementType) -> Self {
        ShardingSpec { source: self.source.with_etype(etype), ..self.clone() }
    }

    pub fn with_group(&self, group: ReplicaGroups) -> Self {
        ShardingSpec { group, ..self.clone() }
    }

    /// Checks the structural invariants.
    pub fn validate(&self, tiling: Tiling) -> Result<(), String> {
        let mut dims = self.source.dims.clone();
        for step in &self.steps {
            match step {
                FormatStep::TrivialReshape(d) => {
                    if d.iter().product::<usize>() != dims.iter().product::<usize>() {
                        return Err(format!("reshape{d:?} changes element count"));
                    }
                    if !is_trivial_reshape(&dims, d) {
                        return Err(format!("reshape{d:?} touches tiled minor dims"));
                    }
                    dims = d.clone();
                }
                FormatStep::Bitcast(d) => {
                    let from = tiling.physical_bytes(&self.source.with_dims(dims.clone()));
                    let to = tiling.physical_bytes(&self.source.with_dims(d.clone()));
                    if from != to {
                        return Err(format!("bitcast{d:?} changes physical size"));
                    }
                    dims = d.clone();
                }
                FormatStep::Pad { dim, amount, .. } => {
                    if *dim >= dims.len() || *amount == 0 {
                        return Err(format!("pad{dim}+{amount} is not a growing pad"));
                    }
                    dims[*dim] += amount;
                }
            }
        }
        if self.shard_count == 0 {
            return Err("shard count is zero".into());
        }
        if self.shard_count > 1 {
            if self.shard_dim >= dims.len() {
                return Err("shard dim out of range".into());
            }
            if dims[self.shard_dim] % self.shard_count != 0 {
                return Err(format!(
                    "dim {} of size {} not divisible by {}",
                    self.shard_dim, dims[self.shard_dim], self.shard_count
                ));
            }
        }
        Ok(())
    }

    /// Parses the printed form; the element type is not part of the text.
    pub fn parse(text: &str, etype: ElementType) -> Result<Self, String> {
        let mut tokens = text.split_whitespace();
        let src = tokens.next().ok_or("empty spec")?;
        let source = Shape::new(etype, parse_bracket_dims(src)?);
        let mut steps = Vec::new();
        let mut slice = None;
        let mut group = ReplicaGroups::All;
        for tok in tokens {
            if let Some(rest) = tok.strip_prefix("reshape") {
                steps.push(FormatStep::TrivialReshape(parse_bracket_dims(rest)?));
            } else if let Some(rest) = tok.strip_prefix("bitcast") {
                steps.push(FormatStep::Bitcast(parse_bracket_dims(rest)?));
            } else if let Some(rest) = tok.strip_prefix("pad") {
                let (body, fill) = match rest.split_once('=') {
                    Some((b, f)) => (b, f.parse::<f64>().map_err(|e| e.to_string())?),
                    None => (rest, 0.0),
                };
                let (d, a) = body.split_once('+').ok_or_else(|| format!("bad pad `{tok}`"))?;
                steps.push(FormatStep::Pad {
                    dim: d.parse().map_err(|_| format!("bad pad `{tok}`"))?,
                    amount: a.parse().map_err(|_| format!("bad pad `{tok}`"))?,
                    fill,
                });
            } else if let Some(rest) = tok.strip_prefix("slice") {
                let (d, s) = rest.split_once('/').ok_or_else(|| format!("bad slice `{tok}`"))?;
                slice = Some((
                    d.parse().map_err(|_| format!("bad slice `{tok}`"))?,
                    s.parse().map_err(|_| format!("bad slice `{tok}`"))?,
                ));
            } else if let Some(rest) = tok.strip_prefix("groups=") {
                group = crate::ir::text::parse_groups(rest)?;
            } else {
                return Err(format!("unknown spec token `{tok}`"));
            }
        }
        let (shard_dim, shard_count) = slice.unwrap_or((0, 1));
        Ok(ShardingSpec { source, steps, shard_dim, shard_count, group })
    }

    /// Applies the formatting steps to row-major data of the source shape.
    pub fn format<T: Copy>(&self, data: &[T], tiling: Tiling, zero: T, fill: impl Fn(f64) -> T) -> Vec<T> {
        let mut dims = self.source.dims.clone();
        let mut cur = data.to_vec();
        for step in &self.steps {
            match step {
                FormatStep::TrivialReshape(d) => dims = d.clone(),
                FormatStep::Bitcast(d) => {
                    cur = bitcast_data(&cur, &dims, d, tiling, zero);
                    dims = d.clone();
                }
                FormatStep::Pad { dim, amount, fill: v } => {
                    let mut high = vec![0; dims.len()];
                    high[*dim] = *amount;
                    cur = pad_data(&cur, &dims, &high, fill(*v));
                    dims[*dim] += amount;
                }
            }
        }
        cur
    }

    /// Inverse of [`ShardingSpec::format`].
    pub fn unformat<T: Copy>(&self, data: &[T], tiling: Tiling, zero: T) -> Vec<T> {
        let mut shapes = vec![self.source.dims.clone()];
        for step in &self.steps {
            let mut d = shapes.last().unwrap().clone();
            match step {
                FormatStep::TrivialReshape(n) | FormatStep::Bitcast(n) => d = n.clone(),
                FormatStep::Pad { dim, amount, .. } => d[*dim] += amount,
            }
            shapes.push(d);
        }
        let mut cur = data.to_vec();
        for (i, step) in self.steps.iter().enumerate().rev() {
            let (before, after) = (&shapes[i], &shapes[i + 1]);
            match step {
                FormatStep::TrivialReshape(_) => {}
                FormatStep::Bitcast(_) => cur = bitcast_data(&cur, after, before, tiling, zero),
                FormatStep::Pad { .. } => cur = slice_data(&cur, after, &vec![0; after.len()], before),
            }
        }
        cur
    }

    /// Slice of formatted data belonging to shard `k`.
    pub fn take_shard<T: Copy>(&self, formatted: &[T], k: usize) -> Vec<T> {
        let dims = self.formatted_dims();
        if self.shard_count == 1 {
            return formatted.to_vec();
        }
        let mut start = vec![0; dims.len()];
        start[self.shard_dim] = k * self.shard_extent();
        slice_data(formatted, &dims, &start, &self.shard_dims())
    }

    /// Concatenates shards in shard-id order along the sharded dim.
    pub fn concat_shards<T: Copy>(&self, shards: &[Vec<T>]) -> Vec<T> {
        if self.shard_count == 1 {
            return shards[0].clone();
        }
        let dims = self.formatted_dims();
        let outer: usize = dims[..self.shard_dim].iter().product();
        let inner: usize = self.shard_dims()[self.shard_dim..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * shards.len());
        for o in 0..outer {
            for s in shards {
                out.extend_from_slice(&s[o * inner..(o + 1) * inner]);
            }
        }
        out
    }
}

impl fmt::Display for ShardingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", join(&self.source.dims))?;
        for step in &self.steps {
            match step {
                FormatStep::TrivialReshape(d) => write!(f, " reshape[{}]", join(d))?,
                FormatStep::Bitcast(d) => write!(f, " bitcast[{}]", join(d))?,
                FormatStep::Pad { dim, amount, fill } => {
                    write!(f, " pad{dim}+{amount}")?;
                    if *fill != 0.0 {
                        write!(f, "={fill:?}")?;
                    }
                }
            }
        }
        write!(f, " slice{}/{}", self.shard_dim, self.shard_count)?;
        if !self.group.is_all() {
            write!(f, " groups={}", self.group)?;
        }
        Ok(())
    }
}

fn join(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bracket_dims(s: &str) -> Result<Vec<usize>, String> {
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("expected [dims], got `{s}`"))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| format!("bad dim `{x}`")))
        .collect()
}

/// Reshape is trivial under the tiled layout when the two minor-most dims are
/// unchanged and only major dims merge or split.
pub fn is_trivial_reshape(from: &[usize], to: &[usize]) -> bool {
    if from.iter().product::<usize>() != to.iter().product::<usize>() {
        return false;
    }
    if from.len() < 2 || to.len() < 2 {
        return from == to;
    }
    from[from.len() - 2..] == to[to.len() - 2..]
}

/// Groups of source dims covered by each destination dim of a reshape, found
/// by matching running products. `None` when the reshape interleaves dims.
fn reshape_groups(from: &[usize], to: &[usize]) -> Option<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); to.len()];
    let (mut i, mut j) = (0, 0);
    while i < from.len() || j < to.len() {
        let (si, sj) = (i, j);
        let (mut pf, mut pt) = (1usize, 1usize);
        if i < from.len() {
            pf *= from[i];
            i += 1;
        }
        if j < to.len() {
            pt *= to[j];
            j += 1;
        }
        while pf != pt {
            if pf < pt && i < from.len() {
                pf *= from[i];
                i += 1;
            } else if pt < pf && j < to.len() {
                pt *= to[j];
                j += 1;
            } else {
                return None;
            }
        }
        for g in &mut groups[sj..j] {
            g.extend(si..i);
        }
    }
    Some(groups)
}

/// Candidate specs in the fixed search space: merge majors and slice, bitcast
/// to whole tiles and slice, or merge majors and pad the leading dim.
pub fn candidate_specs(shape: &Shape, shards: usize, tiling: Tiling, allow_bitcast: bool) -> Vec<ShardingSpec> {
    let mut out = Vec::new();
    let base = ShardingSpec::identity(shape.clone());
    if shards <= 1 {
        out.push(base);
        return out;
    }
    let merged: Vec<usize> = match shape.rank() {
        0 => vec![1],
        1..=3 => shape.dims.clone(),
        r => {
            let lead: usize = shape.dims[..r - 2].iter().product();
            vec![lead, shape.dims[r - 2], shape.dims[r - 1]]
        }
    };
    let merge_steps = if merged != shape.dims {
        vec![FormatStep::TrivialReshape(merged.clone())]
    } else {
        Vec::new()
    };
    if merged[0] % shards == 0 {
        out.push(ShardingSpec {
            steps: merge_steps.clone(),
            shard_count: shards,
            ..base.clone()
        });
    }
    let tile = tiling.tile_elements();
    let phys = tiling.physical_elements(shape);
    if allow_bitcast && shape.rank() >= 1 && phys % tile == 0 && (phys / tile) % shards == 0 {
        out.push(ShardingSpec {
            steps: vec![FormatStep::Bitcast(vec![phys / tile, tiling.rows, tiling.cols])],
            shard_count: shards,
            ..base.clone()
        });
    }
    let rem = merged[0] % shards;
    if rem != 0 {
        let mut steps = merge_steps;
        steps.push(FormatStep::Pad { dim: 0, amount: shards - rem, fill: 0.0 });
        out.push(ShardingSpec { steps, shard_count: shards, ..base });
    }
    out
}

/// Picks the candidate with the fewest padded bytes, then fewest steps, then
/// lowest shard dim.
pub fn choose_spec(shape: &Shape, shards: usize) -> ShardingSpec {
    choose_spec_with(shape, shards, Tiling::default(), true)
}

pub fn choose_spec_with(shape: &Shape, shards: usize, tiling: Tiling, allow_bitcast: bool) -> ShardingSpec {
    candidate_specs(shape, shards, tiling, allow_bitcast)
        .into_iter()
        .min_by_key(|s| (s.padded_bytes(tiling), s.steps.len(), s.shard_dim))
        .expect("padding candidate always exists")
}

/// Spec usable under a reduce: bitcasts that hide tile padding are avoided
/// because their padding locations cannot be masked.
pub fn choose_spec_for_reduce(shape: &Shape, shards: usize, tiling: Tiling) -> ShardingSpec {
    let implicit_padding = tiling.physical_elements(shape) != shape.element_count();
    choose_spec_with(shape, shards, tiling, !implicit_padding)
}

/// Padded ranges on the formatted shape and the value that neutralizes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadMaskInfo {
    /// (dim, start, end) on the formatted shape.
    pub ranges: Vec<(usize, usize, usize)>,
    pub identity: f64,
}

impl PadMaskInfo {
    pub fn from_spec(spec: &ShardingSpec, op: ReduceKind) -> Result<Self, String> {
        let mut dims = spec.source.dims.clone();
        let mut ranges: Vec<(usize, usize, usize)> = Vec::new();
        for step in &spec.steps {
            match step {
                FormatStep::Pad { dim, amount, .. } => {
                    ranges.push((*dim, dims[*dim], dims[*dim] + amount));
                    dims[*dim] += amount;
                }
                FormatStep::TrivialReshape(d) => {
                    let groups = reshape_groups(&dims, d).ok_or("reshape interleaves dims")?;
                    for r in &mut ranges {
                        let hit: Vec<usize> = (0..d.len()).filter(|&j| groups[j] == vec![r.0]).collect();
                        if hit.len() != 1 || d[hit[0]] != dims[r.0] {
                            return Err(format!("reshape[{}] hides padding", join(d)));
                        }
                        r.0 = hit[0];
                    }
                    dims = d.clone();
                }
                FormatStep::Bitcast(d) => {
                    if !ranges.is_empty() {
                        return Err(format!("bitcast[{}] after pad hides padding", join(d)));
                    }
                    dims = d.clone();
                }
            }
        }
        Ok(PadMaskInfo { ranges, identity: op.identity() })
    }
}

/// Checks that a reduce over the source dims `collapsed` can run on shards.
pub fn validate_for_reduce(spec: &ShardingSpec, collapsed: &[usize]) -> Result<(), String> {
    let rank = spec.source.rank();
    let to_scalar = (0..rank).all(|d| collapsed.contains(&d));
    if to_scalar {
        return Ok(());
    }
    let is_collapsed = |d: &usize| collapsed.contains(d);
    let mut cover: Vec<Vec<usize>> = (0..rank).map(|d| vec![d]).collect();
    let mut dims = spec.source.dims.clone();
    let mut padded = false;
    for step in &spec.steps {
        match step {
            FormatStep::TrivialReshape(d) => {
                let groups = reshape_groups(&dims, d)
                    .ok_or_else(|| format!("reshape[{}] interleaves dims", join(d)))?;
                cover = groups
                    .iter()
                    .map(|g| {
                        let mut s: Vec<usize> = g.iter().flat_map(|&i| cover[i].clone()).collect();
                        s.sort_unstable();
                        s.dedup();
                        s
                    })
                    .collect();
                for c in &cover {
                    if c.iter().any(is_collapsed) && !c.iter().all(is_collapsed) {
                        return Err(format!(
                            "reshape[{}] combines a collapsed dim with a pass-through dim",
                            join(d)
                        ));
                    }
                }
                dims = d.clone();
            }
            FormatStep::Bitcast(d) => {
                if padded {
                    return Err(format!("bitcast[{}] after pad makes padding unidentifiable", join(d)));
                }
                return Err(format!(
                    "bitcast[{}] combines a collapsed dim with a pass-through dim",
                    join(d)
                ));
            }
            FormatStep::Pad { dim, amount, .. } => {
                padded = true;
                dims[*dim] += amount;
            }
        }
    }
    Ok(())
}

/// Emits the shard fusion for `input`: formatting plus dynamic-slice at this
/// replica's offset.
pub fn build_shard_ops(b: &mut Builder, spec: &ShardingSpec, input: &str, replica_id: &str) -> String {
    if spec.is_identity() {
        return input.to_string();
    }
    b.fusion(
        &format!("{input}.shard"),
        Type::Array(spec.shard_shape()),
        FusionKind::Shard { spec: spec.clone() },
        &[input, replica_id],
    )
}

/// Emits the all-gather fusion reconstructing the source shape.
pub fn build_unshard_ops(b: &mut Builder, spec: &ShardingSpec, sharded: &str) -> String {
    if spec.is_identity() {
        return sharded.to_string();
    }
    b.fusion(
        &format!("{sharded}.gather"),
        Type::Array(spec.source.clone()),
        FusionKind::Unshard { specs: vec![spec.clone()] },
        &[sharded],
    )
}

/// Emits a reduce-to-scalar over a shard: padding masked with the identity,
/// local reduce, then all-reduce of the partial results across the group.
pub fn build_masked_reduce(
    b: &mut Builder,
    spec: &ShardingSpec,
    op: ReduceKind,
    shard: &str,
    replica_id: &str,
    topology: &Topology,
) -> Result<String> {
    let mask = PadMaskInfo::from_spec(spec, op).map_err(Error::Transform)?;
    let shard_shape = spec.shard_shape();
    let scalar = Type::Array(Shape::scalar(shard_shape.etype));
    let mut input = shard.to_string();
    if !mask.ranges.is_empty() {
        let dims = shard_shape.dims.clone();
        let s32 = |d: Vec<usize>| Shape::new(ElementType::S32, d);
        let n = topology.replica_count();
        let mut valid: Option<String> = None;
        for &(dim, start, _) in &mask.ranges {
            let iota = b.iota(&format!("{shard}.iota"), &s32(dims.clone()), dim);
            let global = if dim == spec.shard_dim && spec.shard_count > 1 {
                let offsets: Vec<f64> = (0..n)
                    .map(|r| (topology.shard_position(&spec.group, r).position * spec.shard_extent()) as f64)
                    .collect();
                let table = b.dense(&format!("{shard}.offsets"), s32(vec![n]), offsets);
                let picked = b.add(
                    &format!("{shard}.offset1"),
                    Type::Array(s32(vec![1])),
                    Op::DynamicSlice { sizes: vec![1] },
                    &[&table, replica_id],
                );
                let off = b.reshape(&format!("{shard}.offset"), &s32(vec![]), &picked);
                let offb = b.broadcast(&format!("{shard}.offset.b"), &s32(dims.clone()), &off, vec![]);
                b.binary(&format!("{shard}.index"), BinaryOp::Add, &s32(dims.clone()), &iota, &offb)
            } else {
                iota
            };
            let limit = b.splat(&format!("{shard}.limit"), &s32(dims.clone()), start as f64);
            let inside = b.compare(&format!("{shard}.valid"), CompareDir::Lt, &dims, &global, &limit);
            valid = Some(match valid {
                None => inside,
                Some(prev) => {
                    // both predicates must hold
                    let zero = b.splat(&format!("{shard}.f"), &Shape::new(ElementType::Pred, dims.clone()), 0.0);
                    b.select(
                        &format!("{shard}.valid.and"),
                        &Shape::new(ElementType::Pred, dims.clone()),
                        &prev,
                        &inside,
                        &zero,
                    )
                }
            });
        }
        let ident = b.splat(&format!("{shard}.identity"), &shard_shape, mask.identity);
        input = b.select(&format!("{shard}.masked"), &shard_shape, valid.as_ref().unwrap(), shard, &ident);
    }
    let local = b.reduce_all(&format!("{shard}.partial"), op, &shard_shape, &input);
    if spec.shard_count == 1 {
        return Ok(local);
    }
    Ok(b.all_reduce(&format!("{shard}.combined"), scalar, op, spec.group.clone(), &[&local]))
}

// ---- flat data helpers shared with the simulator ----

pub(crate) fn pad_data<T: Copy>(data: &[T], dims: &[usize], high: &[usize], fill: T) -> Vec<T> {
    let out_dims: Vec<usize> = dims.iter().zip(high).map(|(d, h)| d + h).collect();
    let n: usize = out_dims.iter().product();
    let mut out = vec![fill; n];
    let in_strides = strides(dims);
    let out_strides = strides(&out_dims);
    for (i, v) in data.iter().enumerate() {
        let mut o = 0;
        for k in 0..dims.len() {
            o += (i / in_strides[k]) % dims[k] * out_strides[k];
        }
        out[o] = *v;
    }
    out
}

pub(crate) fn slice_data<T: Copy>(data: &[T], dims: &[usize], start: &[usize], sizes: &[usize]) -> Vec<T> {
    let n: usize = sizes.iter().product();
    let in_strides = strides(dims);
    let out_strides = strides(sizes);
    (0..n)
        .map(|i| {
            let mut o = 0;
            for k in 0..sizes.len() {
                o += ((i / out_strides[k]) % sizes[k] + start[k]) * in_strides[k];
            }
            data[o]
        })
        .collect()
}

pub(crate) fn bitcast_data<T: Copy>(data: &[T], from: &[usize], to: &[usize], tiling: Tiling, zero: T) -> Vec<T> {
    let from_phys: usize = tiling.padded_dims(from).iter().product::<usize>().max(1);
    let mut buf = vec![zero; from_phys];
    for (i, v) in data.iter().enumerate() {
        buf[tiling.physical_offset(from, i)] = *v;
    }
    let n: usize = to.iter().product();
    (0..n)
        .map(|i| {
            let off = tiling.physical_offset(to, i);
            if off < buf.len() {
                buf[off]
            } else {
                zero
            }
        })
        .collect()
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}
