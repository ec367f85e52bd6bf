//! Runtime values and element rounding.

use std::sync::Arc;

use serde_json::{json, Value as Json};

use crate::error::{Error, Result};
use crate::ir::{ElementType, Shape, Type};

/// Dense row-major tensor. Elements are stored as f64 but always hold a
/// value representable in the element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Arc<[f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Array(Tensor),
    Tuple(Vec<Value>),
}

/// Rounds a bf16-style value: keep the top 16 bits of the f32, ties to even.
pub fn round_f16r(x: f32) -> f32 {
    if x.is_nan() {
        return f32::NAN;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
    f32::from_bits(rounded)
}

/// Rounds `x` to the nearest value of `etype`.
pub fn round(etype: ElementType, x: f64) -> f64 {
    match etype {
        ElementType::F32 => x as f32 as f64,
        ElementType::F16R => round_f16r(x as f32) as f64,
        ElementType::S32 => {
            if x.is_nan() {
                0.0
            } else {
                (x.trunc() as i64 as i32) as f64
            }
        }
        ElementType::Pred => {
            if x != 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.element_count());
        Tensor { shape, data: data.into() }
    }

    /// Builds a tensor, rounding each element to the element type.
    pub fn rounded(shape: Shape, data: Vec<f64>) -> Self {
        let et = shape.etype;
        Tensor::new(shape, data.into_iter().map(|x| round(et, x)).collect())
    }

    pub fn splat(shape: Shape, v: f64) -> Self {
        let n = shape.element_count();
        let v = round(shape.etype, v);
        Tensor::new(shape, vec![v; n])
    }

    pub fn scalar(etype: ElementType, v: f64) -> Self {
        Tensor::splat(Shape::scalar(etype), v)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Value {
    pub fn unit() -> Value {
        Value::Tuple(Vec::new())
    }

    pub fn ty(&self) -> Type {
        match self {
            Value::Array(t) => Type::Array(t.shape.clone()),
            Value::Tuple(vs) => Type::Tuple(vs.iter().map(Value::ty).collect()),
        }
    }

    pub fn as_tensor(&self) -> Result<&Tensor> {
        match self {
            Value::Array(t) => Ok(t),
            Value::Tuple(_) => Err(Error::Simulation("expected an array value, found a tuple".into())),
        }
    }

    pub fn as_tuple(&self) -> Result<&[Value]> {
        match self {
            Value::Tuple(vs) => Ok(vs),
            Value::Array(_) => Err(Error::Simulation("expected a tuple value, found an array".into())),
        }
    }

    pub fn bitwise_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Array(a), Value::Array(b)) => a.bitwise_eq(b),
            (Value::Tuple(a), Value::Tuple(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
            }
            _ => false,
        }
    }

    /// Leaf tensors in depth-first order.
    pub fn leaves(&self) -> Vec<&Tensor> {
        match self {
            Value::Array(t) => vec![t],
            Value::Tuple(vs) => vs.iter().flat_map(Value::leaves).collect(),
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::Array(t) => {
                let data: Vec<Json> = if t.shape.etype.is_float() {
                    t.data.iter().map(|&x| number_to_json(x)).collect()
                } else {
                    t.data.iter().map(|&x| json!(x as i64)).collect()
                };
                json!({ "type": t.shape.to_string(), "data": data })
            }
            Value::Tuple(vs) => json!({ "tuple": vs.iter().map(Value::to_json).collect::<Vec<_>>() }),
        }
    }

    pub fn from_json(j: &Json) -> Result<Value> {
        if let Some(items) = j.get("tuple") {
            let items = items.as_array().ok_or_else(|| bad("`tuple` must be a list"))?;
            return Ok(Value::Tuple(items.iter().map(Value::from_json).collect::<Result<_>>()?));
        }
        let ty = j.get("type").and_then(Json::as_str).ok_or_else(|| bad("value needs `type`"))?;
        let shape = parse_shape(ty)?;
        let data = j.get("data").and_then(Json::as_array).ok_or_else(|| bad("value needs `data`"))?;
        let data: Vec<f64> = data.iter().map(number_from_json).collect::<Result<_>>()?;
        if data.len() != shape.element_count() {
            return Err(bad(&format!("{ty} needs {} elements, got {}", shape.element_count(), data.len())));
        }
        Ok(Value::Array(Tensor::rounded(shape, data)))
    }
}

fn bad(msg: &str) -> Error {
    Error::Invalid(msg.to_string())
}

fn number_to_json(x: f64) -> Json {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn number_from_json(j: &Json) -> Result<f64> {
    match j {
        Json::Number(n) => n.as_f64().ok_or_else(|| bad("number out of range")),
        Json::Bool(b) => Ok(*b as u8 as f64),
        Json::String(s) => match s.as_str() {
            "nan" => Ok(f64::NAN),
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => Err(bad(&format!("unrecognized number `{s}`"))),
        },
        _ => Err(bad("expected a number")),
    }
}

/// Parses `f32[2,3]`.
pub fn parse_shape(s: &str) -> Result<Shape> {
    let (et, rest) = s.split_once('[').ok_or_else(|| bad(&format!("bad shape `{s}`")))?;
    let etype = ElementType::from_name(et).ok_or_else(|| bad(&format!("unknown element type `{et}`")))?;
    let inner = rest.strip_suffix(']').ok_or_else(|| bad(&format!("bad shape `{s}`")))?;
    let dims = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|_| bad(&format!("bad dim in `{s}`"))))
            .collect::<Result<_>>()?
    };
    Ok(Shape::new(etype, dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f16r_rounds_to_nearest_even() {
        assert_eq!(round_f16r(1.0), 1.0);
        // 1 + 2^-8 is exactly halfway between 1 and 1 + 2^-7: ties to even (1.0)
        assert_eq!(round_f16r(1.0 + 1.0 / 256.0), 1.0);
        // 1 + 3*2^-8 is halfway between 1+2^-7 and 1+2^-6: ties to even (1+2^-6)
        assert_eq!(round_f16r(1.0 + 3.0 / 256.0), 1.0 + 1.0 / 64.0);
        assert!(round_f16r(f32::NAN).is_nan());
        assert_eq!(round(ElementType::S32, -2.7), -2.0);
        assert_eq!(round(ElementType::Pred, 0.5), 1.0);
    }

    #[test]
    fn json_round_trip() {
        let v = Value::Tuple(vec![
            Value::Array(Tensor::new(Shape::new(ElementType::F32, vec![3]), vec![1.5, f64::NEG_INFINITY, 0.0])),
            Value::Array(Tensor::scalar(ElementType::S32, 7.0)),
        ]);
        let back = Value::from_json(&v.to_json()).unwrap();
        assert!(back.bitwise_eq(&v));
    }
}
