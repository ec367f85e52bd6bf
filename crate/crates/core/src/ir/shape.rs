//! Element types, array shapes and the tiled physical layout.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementType {
    F32,
    /// Reduced-precision float (bfloat16 semantics, 2 bytes per element).
    F16R,
    S32,
    Pred,
}

impl ElementType {
    pub fn byte_size(self) -> usize {
        match self {
            ElementType::F32 | ElementType::S32 => 4,
            ElementType::F16R => 2,
            ElementType::Pred => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ElementType::F32 | ElementType::F16R)
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::F16R => "f16r",
            ElementType::S32 => "s32",
            ElementType::Pred => "pred",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "f32" => ElementType::F32,
            "f16r" => ElementType::F16R,
            "s32" => ElementType::S32,
            "pred" => ElementType::Pred,
            _ => return None,
        })
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A statically shaped dense array type, row-major logical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub etype: ElementType,
    pub dims: Vec<usize>,
}

impl Shape {
    pub fn new(etype: ElementType, dims: impl Into<Vec<usize>>) -> Self {
        Shape { etype, dims: dims.into() }
    }

    pub fn scalar(etype: ElementType) -> Self {
        Shape { etype, dims: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn with_etype(&self, etype: ElementType) -> Shape {
        Shape { etype, dims: self.dims.clone() }
    }

    pub fn with_dims(&self, dims: impl Into<Vec<usize>>) -> Shape {
        Shape { etype: self.etype, dims: dims.into() }
    }

    /// Logical byte size ignoring tiling.
    pub fn logical_bytes(&self) -> usize {
        self.element_count() * self.etype.byte_size()
    }

    /// Row-major strides of the logical shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.etype)?;
        write_dims(f, &self.dims)?;
        f.write_str("]")
    }
}

pub(crate) fn write_dims(f: &mut impl fmt::Write, dims: &[usize]) -> fmt::Result {
    for (i, d) in dims.iter().enumerate() {
        if i > 0 {
            f.write_char(',')?;
        }
        write!(f, "{d}")?;
    }
    Ok(())
}

/// Instruction result type: an array or a (possibly nested) tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Type {
    Array(Shape),
    Tuple(Vec<Type>),
}

impl Type {
    pub fn array(etype: ElementType, dims: impl Into<Vec<usize>>) -> Type {
        Type::Array(Shape::new(etype, dims))
    }

    pub fn unit() -> Type {
        Type::Tuple(Vec::new())
    }

    pub fn as_array(&self) -> Option<&Shape> {
        match self {
            Type::Array(s) => Some(s),
            Type::Tuple(_) => None,
        }
    }

    pub fn as_tuple(&self) -> Option<&[Type]> {
        match self {
            Type::Tuple(t) => Some(t),
            Type::Array(_) => None,
        }
    }

    /// Sum of physical bytes over all array leaves.
    pub fn physical_bytes(&self, tiling: Tiling) -> usize {
        match self {
            Type::Array(s) => tiling.physical_bytes(s),
            Type::Tuple(ts) => ts.iter().map(|t| t.physical_bytes(tiling)).sum(),
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Array(s) => write!(f, "{s}"),
            Type::Tuple(ts) => {
                f.write_str("(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Fixed 2-D tiling applied to the two minor-most dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tiling {
    pub rows: usize,
    pub cols: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling { rows: 8, cols: 128 }
    }
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

impl Tiling {
    pub fn tile_elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Dimensions after rounding the tiled dims up to tile boundaries.
    pub fn padded_dims(&self, dims: &[usize]) -> Vec<usize> {
        let mut out = dims.to_vec();
        let r = out.len();
        if r >= 1 {
            out[r - 1] = round_up(out[r - 1], self.cols);
        }
        if r >= 2 {
            out[r - 2] = round_up(out[r - 2], self.rows);
        }
        out
    }

    pub fn physical_elements(&self, shape: &Shape) -> usize {
        self.padded_dims(&shape.dims).iter().product()
    }

    pub fn physical_bytes(&self, shape: &Shape) -> usize {
        self.physical_elements(shape) * shape.etype.byte_size()
    }

    /// Offset of a logical element (given as a row-major linear index) inside
    /// the tiled physical buffer. Tiles are laid out row-major over the tile
    /// grid, elements row-major inside a tile.
    pub fn physical_offset(&self, dims: &[usize], linear: usize) -> usize {
        let r = dims.len();
        match r {
            0 => 0,
            1 => linear,
            _ => {
                let a = dims[r - 2];
                let b = dims[r - 1];
                let pa = round_up(a, self.rows);
                let pb = round_up(b, self.cols);
                let major = linear / (a * b).max(1);
                let rem = linear % (a * b).max(1);
                let (ia, ib) = (rem / b, rem % b);
                let tiles_b = pb / self.cols;
                let tile = (ia / self.rows) * tiles_b + ib / self.cols;
                major * pa * pb
                    + tile * self.tile_elements()
                    + (ia % self.rows) * self.cols
                    + ib % self.cols
            }
        }
    }
}

/// Physical byte size of `shape` under the default (8,128) tiling.
pub fn physical_bytes(shape: &Shape) -> usize {
    Tiling::default().physical_bytes(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes() {
        assert_eq!(ElementType::F32.byte_size(), 4);
        assert_eq!(ElementType::F16R.byte_size(), 2);
        assert_eq!(ElementType::S32.byte_size(), 4);
        assert_eq!(ElementType::Pred.byte_size(), 1);
    }

    #[test]
    fn physical_bytes_examples() {
        let s = Shape::new(ElementType::F32, vec![3, 3, 256, 256]);
        assert_eq!(physical_bytes(&s), 2_359_296);
        let s = Shape::new(ElementType::F32, vec![5, 3]);
        assert_eq!(physical_bytes(&s), 4096);
        assert_eq!(physical_bytes(&Shape::scalar(ElementType::F32)), 4);
        assert_eq!(physical_bytes(&Shape::new(ElementType::F32, vec![3])), 512);
    }

    #[test]
    fn physical_offsets_are_injective() {
        let t = Tiling::default();
        for dims in [vec![5usize, 3], vec![2, 9, 130], vec![17], vec![3, 3, 16, 16]] {
            let n: usize = dims.iter().product();
            let cap = t.physical_elements(&Shape::new(ElementType::F32, dims.clone()));
            let mut seen = vec![false; cap];
            for i in 0..n {
                let off = t.physical_offset(&dims, i);
                assert!(off < cap);
                assert!(!seen[off]);
                seen[off] = true;
            }
        }
    }

    #[test]
    fn aligned_shape_offsets_match_tile_reinterpretation() {
        // [16,256] is two tile rows by two tile columns; the second tile in
        // physical order starts at logical (0,128).
        let t = Tiling::default();
        assert_eq!(t.physical_offset(&[16, 256], 128), 1024);
        assert_eq!(t.physical_offset(&[16, 256], 256), 128);
    }

    proptest::proptest! {
        #[test]
        fn physical_bytes_is_monotone(
            dims in proptest::collection::vec(1usize..300, 1..=4),
            at in 0usize..4,
            grow in 1usize..200,
        ) {
            let s = Shape::new(ElementType::F32, dims.clone());
            let mut bigger = dims.clone();
            let at = at % dims.len();
            bigger[at] += grow;
            proptest::prop_assert!(physical_bytes(&Shape::new(ElementType::F32, bigger)) >= physical_bytes(&s));
        }
    }
}
