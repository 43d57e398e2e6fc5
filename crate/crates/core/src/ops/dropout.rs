//! Inverted dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::norm::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Per-element multipliers: `0` with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    shape: crate::tensor::Shape,
    p: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_rate(p)?;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let data = (0..shape.numel())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Identity in infer mode or when `p == 0`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<Tensor<T>> {
    check_rate(p)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), p, rng)?;
    crate::ops::activation::mul(x, &mask)
}
