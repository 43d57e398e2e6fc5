//! Dense rank-4 tensors in `N, C, H, W` row-major order.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape([usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// A `(1, c, 1, 1)` shape, the layout used for per-channel vectors.
    pub const fn vector(c: usize) -> Self {
        Shape([1, c, 1, 1])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub const fn dims(&self) -> [usize; 4] {
        self.0
    }
    pub const fn n(&self) -> usize {
        self.0[0]
    }
    pub const fn c(&self) -> usize {
        self.0[1]
    }
    pub const fn h(&self) -> usize {
        self.0[2]
    }
    pub const fn w(&self) -> usize {
        self.0[3]
    }

    /// Elements in one `H x W` plane.
    pub const fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub const fn numel(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2] * self.0[3]
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape([n, self.0[1], self.0[2], self.0[3]])
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }

    pub fn has_zero_extent(&self) -> bool {
        self.0.contains(&0)
    }

    /// Channel concatenation needs equal batch and spatial extents.
    pub fn concat_compatible(&self, other: &Shape) -> bool {
        self.n() == other.n() && self.h() == other.h() && self.w() == other.w()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d)
    }
}

/// Contents for [`Tensor::new`].
#[derive(Debug, Clone)]
pub enum Fill<T> {
    Scalar(T),
    Buffer(Vec<T>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, fill: Fill<T>) -> Result<Self> {
        match fill {
            Fill::Scalar(v) => Ok(Self::full(shape, v)),
            Fill::Buffer(buf) => Self::from_vec(shape, buf),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Construction {
                shape,
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.shape.dims();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Reinterprets the buffer under a shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Joins `a` and `b` along the channel axis; `a`'s channels come first.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if !sa.concat_compatible(&sb) {
            return Err(Error::Shape(format!(
                "cannot concat {sa} and {sb} on channels: N/H/W differ"
            )));
        }
        let out_shape = sa.with_c(sa.c() + sb.c());
        let (la, lb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n() {
            data.extend_from_slice(&a.data[n * la..(n + 1) * la]);
            data.extend_from_slice(&b.data[n * lb..(n + 1) * lb]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.shape.c() {
            return Err(Error::Shape(format!(
                "channel range {range:?} out of bounds for {}",
                self.shape
            )));
        }
        let p = self.shape.plane();
        let per_n = self.shape.c() * p;
        let mut data = Vec::with_capacity(self.shape.n() * range.len() * p);
        for n in 0..self.shape.n() {
            data.extend_from_slice(
                &self.data[n * per_n + range.start * p..n * per_n + range.end * p],
            );
        }
        Ok(Tensor {
            shape: self.shape.with_c(range.len()),
            data,
        })
    }

    /// Selects samples along the batch axis.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.shape.n() {
            return Err(Error::Shape(format!(
                "batch range {range:?} out of bounds for {}",
                self.shape
            )));
        }
        let per_n = self.shape.c() * self.shape.plane();
        Ok(Tensor {
            shape: self.shape.with_n(range.len()),
            data: self.data[range.start * per_n..range.end * per_n].to_vec(),
        })
    }

    /// Stacks tensors along the batch axis; all must agree on C, H, W.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let base = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(base.n()) != base {
                return Err(Error::Shape(format!(
                    "cannot stack {} with {}",
                    p.shape, base
                )));
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: base.with_n(n),
            data,
        })
    }

    pub fn add(a: &Self, b: &Self) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "elementwise add of {} and {}",
                a.shape, b.shape
            )));
        }
        Ok(Tensor {
            shape: a.shape,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
        })
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "accumulate {} into {}",
                other.shape, self.shape
            )));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
        Ok(())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_fill() {
        let t = Tensor::<f32>::new(Shape::new(1, 1, 2, 2), Fill::Scalar(0.0)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn buffer_round_trip() {
        let buf: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 1.0).collect();
        let t = Tensor::new(Shape::new(1, 3, 2, 2), Fill::Buffer(buf.clone())).unwrap();
        assert_eq!(t.data(), buf.as_slice());
    }

    #[test]
    fn buffer_length_mismatch_names_both_lengths() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let c = Tensor::concat_channels(&a, &a).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 6, 4, 4));

        let e = Tensor::<f32>::zeros(Shape::new(1, 12, 56, 56));
        let c = Tensor::concat_channels(&e, &e).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 24, 56, 56));

        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 5, 4));
        let err = Tensor::concat_channels(&a, &b).unwrap_err().to_string();
        assert!(
            err.contains("(1,3,4,4)") && err.contains("(1,3,5,4)"),
            "{err}"
        );
    }

    #[test]
    fn add_cases() {
        let a = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0f32, 4.0]).unwrap();
        assert_eq!(Tensor::add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        let z = Tensor::zeros(a.shape());
        assert_eq!(Tensor::add(&a, &z).unwrap(), a);
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let y = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 3));
        assert!(matches!(Tensor::add(&x, &y), Err(Error::Shape(_))));
    }

    fn tensor_strategy(max_c: usize) -> impl Strategy<Value = Tensor<f32>> {
        (1usize..3, 1usize..=max_c, 1usize..4, 1usize..4).prop_flat_map(|(n, c, h, w)| {
            let shape = Shape::new(n, c, h, w);
            proptest::collection::vec(-1e3f32..1e3, shape.numel())
                .prop_map(move |d| Tensor::from_vec(shape, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn concat_then_slice_recovers_operands(a in tensor_strategy(4), extra_c in 1usize..4, seed in any::<u64>()) {
            let s = a.shape().with_c(extra_c);
            let data: Vec<f32> = (0..s.numel()).map(|i| ((i as u64 ^ seed) % 997) as f32 - 498.0).collect();
            let b = Tensor::from_vec(s, data).unwrap();
            let c = Tensor::concat_channels(&a, &b).unwrap();
            let ca = a.shape().c();
            prop_assert_eq!(c.slice_channels(0..ca).unwrap(), a.clone());
            prop_assert_eq!(c.slice_channels(ca..ca + extra_c).unwrap(), b);
        }

        #[test]
        fn add_commutes_with_zero_identity(a in tensor_strategy(3)) {
            let b = a.map(|v| v * 0.5 - 1.0);
            let ab = Tensor::add(&a, &b).unwrap();
            let ba = Tensor::add(&b, &a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let z = Tensor::zeros(a.shape());
            prop_assert_eq!(Tensor::add(&a, &z).unwrap(), a);
        }
    }
}
