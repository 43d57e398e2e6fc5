//! A small CPU engine for the ExquisiteNetV2 image classifier.
//!
//! Tensors are dense `N, C, H, W` arrays of `f32`. Operators live in [`ops`],
//! reverse-mode differentiation in [`autodiff`], the network's building
//! blocks in [`blocks`], and the assembled network in [`model`]. Training
//! follows a plain SGD protocol with a loss-plateau learning-rate schedule
//! ([`train`]) over CIFAR-10 or generated data ([`data`]).
//!
//! Inner loops fan out over rayon when the `parallel` feature is on (the
//! default). Every kernel produces bitwise identical results with the
//! feature off.

pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod par;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{GradStore, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Fill, Shape, Tensor};
