//! Per-replica evaluation of non-collective, non-control-flow instructions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::value::{round, Tensor, Value};
use crate::error::{Error, Result};
use crate::ir::{BinaryOp, CompareDir, ElementType, FusionKind, Instruction, Literal, Op, ReduceKind, Shape, Tiling, Topology};
use crate::sharding_spec::{bitcast_data, pad_data, slice_data};

pub(crate) struct LocalCtx<'a> {
    pub replica: usize,
    pub seed: u64,
    /// How many times this instruction already ran on this replica.
    pub invocation: u64,
    pub tiling: Tiling,
    pub topology: &'a Topology,
}

fn sim(msg: impl Into<String>) -> Error {
    Error::Simulation(msg.into())
}

fn out_shape(inst: &Instruction) -> Result<&Shape> {
    inst.shape().ok_or_else(|| sim(format!("%{} must produce an array", inst.name)))
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// FNV-1a, used to derive stable per-instruction rng streams.
fn fnv(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn binary(op: BinaryOp, et: ElementType, a: f64, b: f64) -> f64 {
    if et == ElementType::S32 {
        let (x, y) = (a as i64 as i32, b as i64 as i32);
        let r = match op {
            BinaryOp::Add => x.wrapping_add(y),
            BinaryOp::Sub => x.wrapping_sub(y),
            BinaryOp::Mul => x.wrapping_mul(y),
            BinaryOp::Div => {
                if y == 0 {
                    0
                } else {
                    x.wrapping_div(y)
                }
            }
            BinaryOp::Rem => {
                if y == 0 {
                    x
                } else {
                    x.wrapping_rem(y)
                }
            }
            BinaryOp::Max => x.max(y),
            BinaryOp::Min => x.min(y),
            BinaryOp::Power => {
                if y < 0 {
                    0
                } else {
                    x.wrapping_pow(y as u32)
                }
            }
        };
        return r as f64;
    }
    let r = match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Rem => a % b,
        BinaryOp::Max => {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                a.max(b)
            }
        }
        BinaryOp::Min => {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                a.min(b)
            }
        }
        BinaryOp::Power => a.powf(b),
    };
    round(et, r)
}

/// Applies a reduction step, rounding to `et`.
pub(crate) fn combine(op: ReduceKind, et: ElementType, a: f64, b: f64) -> f64 {
    let bop = match op {
        ReduceKind::Add => BinaryOp::Add,
        ReduceKind::Mul => BinaryOp::Mul,
        ReduceKind::Max => BinaryOp::Max,
        ReduceKind::Min => BinaryOp::Min,
    };
    binary(bop, et, a, b)
}

/// Accumulation type of reductions: reduced-precision floats sum in f32.
pub(crate) fn accumulator(et: ElementType) -> ElementType {
    match et {
        ElementType::F16R => ElementType::F32,
        other => other,
    }
}

fn compare(dir: CompareDir, a: f64, b: f64) -> bool {
    match dir {
        CompareDir::Lt => a < b,
        CompareDir::Le => a <= b,
        CompareDir::Gt => a > b,
        CompareDir::Ge => a >= b,
        CompareDir::Eq => a == b,
        CompareDir::Ne => a != b,
    }
}

fn convert(to: ElementType, x: f64) -> f64 {
    match to {
        ElementType::S32 => {
            if x.is_nan() {
                0.0
            } else {
                x.trunc().clamp(i32::MIN as f64, i32::MAX as f64)
            }
        }
        other => round(other, x),
    }
}

fn arr<'v>(v: &'v Value, inst: &Instruction) -> Result<&'v Tensor> {
    v.as_tensor().map_err(|_| sim(format!("%{}: operand must be an array", inst.name)))
}

pub(crate) fn eval(inst: &Instruction, ops: &[&Value], ctx: &LocalCtx) -> Result<Value> {
    let t = |i: usize| arr(ops[i], inst);
    let v = match &inst.op {
        Op::Parameter { .. } | Op::While { .. } | Op::Conditional { .. } | Op::Outfeed | Op::AllReduce { .. } => {
            return Err(sim(format!("%{} is not a local kernel", inst.name)))
        }
        Op::Constant(lit) => {
            let s = out_shape(inst)?.clone();
            match lit {
                Literal::Splat(x) => Tensor::splat(s, *x),
                Literal::Dense(xs) => Tensor::rounded(s, xs.clone()),
            }
        }
        Op::Iota { dim } => {
            let s = out_shape(inst)?.clone();
            let st = strides(&s.dims);
            let data = (0..s.element_count()).map(|i| ((i / st[*dim]) % s.dims[*dim]) as f64).collect();
            Tensor::rounded(s, data)
        }
        Op::ReplicaId => Tensor::scalar(ElementType::S32, ctx.replica as f64),
        Op::Rng => {
            let s = out_shape(inst)?.clone();
            let key = fnv(&[
                &ctx.seed.to_le_bytes(),
                &(ctx.replica as u64).to_le_bytes(),
                inst.name.as_bytes(),
                &ctx.invocation.to_le_bytes(),
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let data = (0..s.element_count()).map(|_| rng.gen::<f64>()).collect();
            Tensor::rounded(s, data)
        }
        Op::Binary(b) => {
            let (x, y) = (t(0)?, t(1)?);
            let et = x.shape.etype;
            let data = x.data.iter().zip(y.data.iter()).map(|(a, c)| binary(*b, et, *a, *c)).collect();
            Tensor::new(x.shape.clone(), data)
        }
        Op::Sqrt => {
            let x = t(0)?;
            Tensor::rounded(x.shape.clone(), x.data.iter().map(|a| a.sqrt()).collect())
        }
        Op::Compare(d) => {
            let (x, y) = (t(0)?, t(1)?);
            let data = x.data.iter().zip(y.data.iter()).map(|(a, b)| compare(*d, *a, *b) as u8 as f64).collect();
            Tensor::new(x.shape.with_etype(ElementType::Pred), data)
        }
        Op::Select => {
            let (p, a, b) = (t(0)?, t(1)?, t(2)?);
            let data = (0..p.data.len()).map(|i| if p.data[i] != 0.0 { a.data[i] } else { b.data[i] }).collect();
            Tensor::new(a.shape.clone(), data)
        }
        Op::Convert => {
            let s = out_shape(inst)?.clone();
            let x = t(0)?;
            let data = x.data.iter().map(|a| convert(s.etype, *a)).collect();
            Tensor::new(s, data)
        }
        Op::Broadcast { dims } => {
            let s = out_shape(inst)?.clone();
            let x = t(0)?;
            let ost = strides(&s.dims);
            let ist = strides(&x.shape.dims);
            let data = (0..s.element_count())
                .map(|i| {
                    let mut src = 0;
                    for (k, &d) in dims.iter().enumerate() {
                        src += (i / ost[d]) % s.dims[d] * ist[k];
                    }
                    x.data[src]
                })
                .collect();
            Tensor::new(s, data)
        }
        Op::Dot { lhs_contract, rhs_contract } => {
            let s = out_shape(inst)?.clone();
            let (l, r) = (t(0)?, t(1)?);
            let (lc, rc) = (*lhs_contract, *rhs_contract);
            let k = l.shape.dims[lc];
            let (m, n) = (l.shape.dims[1 - lc], r.shape.dims[1 - rc]);
            let l_at = |i: usize, kk: usize| if lc == 1 { l.data[i * k + kk] } else { l.data[kk * m + i] };
            let r_at = |kk: usize, j: usize| if rc == 0 { r.data[kk * n + j] } else { r.data[j * k + kk] };
            let acc = accumulator(s.etype);
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    let mut sum = 0.0;
                    for kk in 0..k {
                        sum = round(acc, sum + round(acc, l_at(i, kk) * r_at(kk, j)));
                    }
                    data.push(round(s.etype, sum));
                }
            }
            Tensor::new(s, data)
        }
        Op::Reduce { dims, op } => {
            let x = t(0)?;
            let s = out_shape(inst)?.clone();
            reduce(x, dims, *op, s)
        }
        Op::Reshape => Tensor { shape: out_shape(inst)?.clone(), data: t(0)?.data.clone() },
        Op::Bitcast => {
            let s = out_shape(inst)?.clone();
            let x = t(0)?;
            Tensor::new(s.clone(), bitcast_data(&x.data, &x.shape.dims, &s.dims, ctx.tiling, 0.0))
        }
        Op::Pad { high, value } => {
            let x = t(0)?;
            let fill = round(x.shape.etype, *value);
            let s = out_shape(inst)?.clone();
            Tensor::new(s, pad_data(&x.data, &x.shape.dims, high, fill))
        }
        Op::DynamicSlice { sizes } => {
            let x = t(0)?;
            let mut start = Vec::with_capacity(sizes.len());
            for (k, &size) in sizes.iter().enumerate() {
                let raw = t(k + 1)?.data[0];
                let hi = (x.shape.dims[k] - size) as f64;
                start.push(raw.clamp(0.0, hi) as usize);
            }
            let s = out_shape(inst)?.clone();
            Tensor::new(s, slice_data(&x.data, &x.shape.dims, &start, sizes))
        }
        Op::Tuple => return Ok(Value::Tuple(ops.iter().map(|v| (*v).clone()).collect())),
        Op::GetTupleElement { index } => {
            let items = ops[0].as_tuple()?;
            return items.get(*index).cloned().ok_or_else(|| sim(format!("%{}: tuple index out of range", inst.name)));
        }
        Op::Fusion(FusionKind::Shard { spec }) => {
            let x = t(0)?;
            let rid = t(1)?.data[0] as usize;
            let et = x.shape.etype;
            let formatted = spec.format(&x.data, ctx.tiling, 0.0, |f| round(et, f));
            let pos = ctx.topology.shard_position(&spec.group, rid).position;
            Tensor::new(spec.shard_shape(), spec.take_shard(&formatted, pos))
        }
        Op::Fusion(_) => return Err(sim(format!("%{} is not a local kernel", inst.name))),
    };
    Ok(Value::Array(v))
}

/// Reduces `x` over `dims`, visiting collapsed elements in row-major order.
/// Folds each output's inputs as a balanced pairwise tree in operand order.
pub(crate) fn reduce(x: &Tensor, dims: &[usize], op: ReduceKind, out: Shape) -> Tensor {
    let rank = x.shape.rank();
    let kept: Vec<usize> = (0..rank).filter(|d| !dims.contains(d)).collect();
    let ist = strides(&x.shape.dims);
    let ost = strides(&out.dims);
    let acc = accumulator(out.etype);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); out.element_count().max(1)];
    for (i, &v) in x.data.iter().enumerate() {
        let mut o = 0;
        for (k, &d) in kept.iter().enumerate() {
            o += (i / ist[d]) % x.shape.dims[d] * ost[k];
        }
        groups[o].push(v);
    }
    fn tree(op: ReduceKind, acc: ElementType, xs: &[f64]) -> f64 {
        match xs.len() {
            0 => op.identity(),
            1 => xs[0],
            n => combine(op, acc, tree(op, acc, &xs[..n / 2]), tree(op, acc, &xs[n / 2..])),
        }
    }
    let et = out.etype;
    let sums: Vec<f64> = groups.iter().map(|g| round(et, tree(op, acc, g))).collect();
    Tensor::new(out, sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Type;

    fn ctx(t: &Topology) -> LocalCtx<'_> {
        LocalCtx { replica: 1, seed: 7, invocation: 0, tiling: Tiling::default(), topology: t }
    }

    fn f32t(dims: &[usize], data: Vec<f64>) -> Value {
        Value::Array(Tensor::new(Shape::new(ElementType::F32, dims.to_vec()), data))
    }

    fn run(op: Op, ty: Type, ops: &[&Value]) -> Tensor {
        let topo = Topology::Ring(2);
        let inst = Instruction::new("x", ty, op, vec![]);
        match eval(&inst, ops, &ctx(&topo)).unwrap() {
            Value::Array(t) => t,
            _ => panic!(),
        }
    }

    #[test]
    fn dot_and_reduce() {
        let a = f32t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = f32t(&[3, 1], vec![1., 1., 1.]);
        let d = run(Op::Dot { lhs_contract: 1, rhs_contract: 0 }, Type::array(ElementType::F32, vec![2, 1]), &[&a, &b]);
        assert_eq!(&*d.data, &[6., 15.]);
        // transposed lhs: contract dim 0 of [2,3] with dim 0 of [2,1]
        let c = f32t(&[2, 1], vec![1., 10.]);
        let d = run(Op::Dot { lhs_contract: 0, rhs_contract: 0 }, Type::array(ElementType::F32, vec![3, 1]), &[&a, &c]);
        assert_eq!(&*d.data, &[41., 52., 63.]);
        let r = run(
            Op::Reduce { dims: vec![0], op: ReduceKind::Max },
            Type::array(ElementType::F32, vec![3]),
            &[&a],
        );
        assert_eq!(&*r.data, &[4., 5., 6.]);
    }

    #[test]
    fn reduce_folds_pairwise() {
        // (1e8 + 1) + (-1e8 + 1) in f32; a left fold would give 1
        let a = f32t(&[4], vec![1e8, 1., -1e8, 1.]);
        let r = run(Op::Reduce { dims: vec![0], op: ReduceKind::Add }, Type::array(ElementType::F32, vec![]), &[&a]);
        assert_eq!(&*r.data, &[0.]);
    }

    #[test]
    fn broadcast_maps_dims() {
        let v = f32t(&[2], vec![1., 2.]);
        let b = run(Op::Broadcast { dims: vec![0] }, Type::array(ElementType::F32, vec![2, 3]), &[&v]);
        assert_eq!(&*b.data, &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn rng_is_stable_per_replica_and_invocation() {
        let topo = Topology::Ring(2);
        let inst = Instruction::new("r", Type::array(ElementType::F32, vec![4]), Op::Rng, vec![]);
        let a = eval(&inst, &[], &ctx(&topo)).unwrap();
        let b = eval(&inst, &[], &ctx(&topo)).unwrap();
        assert!(a.bitwise_eq(&b));
        let mut other = ctx(&topo);
        other.replica = 0;
        assert!(!a.bitwise_eq(&eval(&inst, &[], &other).unwrap()));
    }

    #[test]
    fn s32_arithmetic_wraps() {
        assert_eq!(binary(BinaryOp::Add, ElementType::S32, i32::MAX as f64, 1.0), i32::MIN as f64);
        assert_eq!(binary(BinaryOp::Rem, ElementType::S32, 7.0, 3.0), 1.0);
    }
}
