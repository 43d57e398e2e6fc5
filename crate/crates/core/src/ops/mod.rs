//! Forward operators and their hand-derived backward passes.
//!
//! Every kernel is generic over [`Scalar`](crate::Scalar) so the same code
//! runs in `f32` for training and `f64` for gradient references.

pub mod activation;
pub mod conv;
pub mod dropout;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{hard_swish, relu, sigmoid};
pub use conv::{conv2d, ConvGeom, ConvParams};
pub use dropout::dropout;
pub use linear::linear;
pub use loss::{argmax_rows, softmax_cross_entropy, CrossEntropy};
pub use norm::{batch_norm, layer_norm_channels, Mode, NormParams};
pub use pool::{global_avg_pool, pool2d, PoolCfg, PoolMode, Pooled};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// `(dx, dweight, dbias)` of a weighted layer.
pub type WeightGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

/// Multiplies each `(n, c)` plane of `x` by `gate[n, c]`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if gate.shape() != Shape::new(s.n(), s.c(), 1, 1) {
        return Err(Error::Config(format!(
            "gate {} does not match channels of {s}",
            gate.shape()
        )));
    }
    let mut out = x.clone();
    crate::par::for_each_chunk(out.data_mut(), s.plane(), |p, plane| {
        let g = gate.data()[p];
        for v in plane {
            *v *= g;
        }
    });
    Ok(out)
}

/// `(dx, dgate)` for [`scale_channels`].
pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let dx = scale_channels(dy, gate)?;
    let dgate = crate::par::map_range(s.n() * s.c(), |p| {
        let (n, c) = (p / s.c(), p % s.c());
        dy.plane(n, c)
            .iter()
            .zip(x.plane(n, c))
            .map(|(&g, &v)| g * v)
            .sum::<T>()
    });
    Ok((dx, Tensor::from_vec(gate.shape(), dgate)?))
}
