//! Reverse-mode differentiation.
//!
//! Model code is written once against [`Graph`]. Running it on a [`Tape`]
//! records every operator application for [`Tape::backward`]; running it on
//! [`Eager`] evaluates the same operators without keeping anything.

mod eager;
pub mod gradcheck;
mod tape;

pub use eager::{EVar, Eager};
pub use gradcheck::{finite_diff_check, GradCheckCfg};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::Result;
use crate::ops::{ConvGeom, Mode, PoolCfg};
use crate::params::{ParamId, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running-statistics buffers and constants of one batch norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnBuffers {
    pub mean: ParamId,
    pub var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

pub trait Graph<T: Scalar> {
    type Var: Clone;

    fn mode(&self) -> Mode;

    fn input(&mut self, t: Tensor<T>) -> Self::Var;

    fn param(&mut self, id: ParamId) -> Self::Var;

    fn value<'v>(&'v self, v: &'v Self::Var) -> &'v Tensor<T>;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, geom: ConvGeom) -> Result<Self::Var>;

    fn pool2d(&mut self, x: &Self::Var, cfg: PoolCfg) -> Result<Self::Var>;

    fn global_avg_pool(&mut self, x: &Self::Var) -> Result<Self::Var>;

    fn batch_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        buffers: BnBuffers,
    ) -> Result<Self::Var>;

    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        eps: f64,
    ) -> Result<Self::Var>;

    fn hard_swish(&mut self, x: &Self::Var) -> Self::Var;

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;

    fn relu(&mut self, x: &Self::Var) -> Self::Var;

    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var>;

    fn dropout(&mut self, x: &Self::Var, p: f64) -> Result<Self::Var>;

    fn scale_channels(&mut self, x: &Self::Var, gate: &Self::Var) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn concat_channels(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// Sum of all elements, as a `(1,1,1,1)` tensor.
    fn sum(&mut self, x: &Self::Var) -> Self::Var;

    /// `sum(x * weights)` for a constant `weights` of `x`'s shape.
    fn weighted_sum(&mut self, x: &Self::Var, weights: &Tensor<T>) -> Result<Self::Var>;

    /// Mean softmax cross-entropy, as a `(1,1,1,1)` tensor.
    fn softmax_cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var>;

    /// Running-statistics updates produced by train-mode batch norms so far.
    fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>>;
}
