//! Elementwise activations and their derivatives.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHUNK: usize = 1 << 14;

fn map_par<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T + Send + Sync) -> Tensor<T> {
    let mut out = x.clone();
    par::for_each_chunk(out.data_mut(), CHUNK, |_, c| {
        for v in c {
            *v = f(*v);
        }
    });
    out
}

/// `out[i] = f(a[i], b[i])`, shapes must match.
fn zip_par<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T + Send + Sync,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "elementwise operands {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    let bd = b.data();
    par::for_each_chunk(out.data_mut(), CHUNK, |i, c| {
        let bs = &bd[i * CHUNK..i * CHUNK + c.len()];
        for (v, &w) in c.iter_mut().zip(bs) {
            *v = f(*v, w);
        }
    });
    Ok(out)
}

#[inline]
pub fn hard_swish_scalar<T: Scalar>(x: T) -> T {
    let three = T::from_f64_lossy(3.0);
    let six = T::from_f64_lossy(6.0);
    if x >= three {
        x
    } else if x <= -three {
        T::zero()
    } else {
        x * (x + three) / six
    }
}

#[inline]
pub fn hard_swish_grad_scalar<T: Scalar>(x: T) -> T {
    let three = T::from_f64_lossy(3.0);
    if x >= three {
        T::one()
    } else if x <= -three {
        T::zero()
    } else {
        (x + x + three) / T::from_f64_lossy(6.0)
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * clamp(x + 3, 0, 6) / 6`.
pub fn hard_swish<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_par(x, hard_swish_scalar)
}

pub fn hard_swish_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    zip_par(x, dy, |v, g| hard_swish_grad_scalar(v) * g)
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_par(x, sigmoid_scalar)
}

/// Uses the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    zip_par(y, dy, |s, g| s * (T::one() - s) * g)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_par(x, |v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    zip_par(x, dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Elementwise product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_par(a, b, |x, y| x * y)
}
