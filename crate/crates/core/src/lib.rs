//! A small neural-network framework for comparing classification heads that
//! sit between a convolutional feature map and the final classifier: global
//! average pooling, flatten + dense, shared-kernel weighted pooling, and
//! full-extent depthwise spatial aggregation with a non-negative constraint
//! and optional pre-averaging.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod heads;
pub mod model;
pub mod nn;
pub mod optim;
pub mod reference;
pub mod seed;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Shape, Tensor};
