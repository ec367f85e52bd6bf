//! Random entry inputs and the JSON form of per-replica values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

use crate::error::{Error, Result};
use crate::ir::{ElementType, Module, Op, Type};

use super::value::{Tensor, Value};

fn random_value(ty: &Type, range: (f64, f64), rng: &mut ChaCha8Rng) -> Value {
    match ty {
        Type::Tuple(ts) => Value::Tuple(ts.iter().map(|t| random_value(t, range, rng)).collect()),
        Type::Array(s) => {
            let n = s.element_count();
            let data = (0..n)
                .map(|_| match s.etype {
                    ElementType::F32 | ElementType::F16R => rng.gen_range(range.0..range.1),
                    ElementType::S32 => rng.gen_range(0..8) as f64,
                    ElementType::Pred => rng.gen_bool(0.5) as u8 as f64,
                })
                .collect();
            Value::Array(Tensor::rounded(s.clone(), data))
        }
    }
}

/// Random inputs for every replica, floats uniform in `[-1, 1)`.
pub fn random_inputs(m: &Module, seed: u64) -> Vec<Vec<Value>> {
    random_inputs_with(m, seed, |_| (-1.0, 1.0))
}

/// Random inputs with a per-parameter float range. Parameters annotated
/// replica_equal receive the same value on every replica.
pub fn random_inputs_with(m: &Module, seed: u64, range: impl Fn(usize) -> (f64, f64)) -> Vec<Vec<Value>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = m.entry_computation().parameters();
    params.sort_by_key(|p| match p.op {
        Op::Parameter { index, .. } => index,
        _ => usize::MAX,
    });
    let mut per_param: Vec<Vec<Value>> = Vec::with_capacity(params.len());
    for p in &params {
        let (idx, equal) = match p.op {
            Op::Parameter { index, replica_equal } => (index, replica_equal),
            _ => unreachable!(),
        };
        let r = range(idx);
        if equal {
            let v = random_value(&p.ty, r, &mut rng);
            per_param.push(vec![v; m.replica_count]);
        } else {
            per_param.push((0..m.replica_count).map(|_| random_value(&p.ty, r, &mut rng)).collect());
        }
    }
    (0..m.replica_count).map(|r| per_param.iter().map(|vs| vs[r].clone()).collect()).collect()
}

/// `{"replicas": [[v, ...], ...]}`
pub fn to_json(replicas: &[Vec<Value>]) -> Json {
    json!({
        "replicas": replicas
            .iter()
            .map(|vs| Json::Array(vs.iter().map(Value::to_json).collect()))
            .collect::<Vec<_>>()
    })
}

pub fn from_json(j: &Json) -> Result<Vec<Vec<Value>>> {
    let reps = j
        .get("replicas")
        .and_then(Json::as_array)
        .ok_or_else(|| Error::Invalid("expected an object with a `replicas` array".into()))?;
    reps.iter()
        .map(|r| {
            r.as_array()
                .ok_or_else(|| Error::Invalid("each replica entry must be an array of values".into()))?
                .iter()
                .map(Value::from_json)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn replica_equal_inputs_match_and_round_trip() {
        let m = parse_module(
            "module N=3 topology=ring {
entry computation e (f32[4], f16r[2], s32[]) -> f32[4] {
  %a = f32[4] parameter(0) {replica_equal}
  %b = f16r[2] parameter(1)
  %c = s32[] parameter(2)
  return (%a)
}
}",
        )
        .unwrap();
        let ins = random_inputs(&m, 7);
        assert_eq!(ins.len(), 3);
        assert!(ins[0][0].bitwise_eq(&ins[2][0]));
        assert!(!ins[0][1].bitwise_eq(&ins[1][1]));
        let back = from_json(&to_json(&ins)).unwrap();
        for (x, y) in ins.iter().flatten().zip(back.iter().flatten()) {
            assert!(x.bitwise_eq(y));
        }
        assert!(random_inputs(&m, 7)[1][1].bitwise_eq(&ins[1][1]));
    }
}
