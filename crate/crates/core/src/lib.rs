//! Region-to-object self-supervised pretraining.
//!
//! Region priors (SLIC superpixels) are pooled over mid-level features of an EMA target
//! network, merged by K-means into object-like masks whose count shrinks over training,
//! and the masks drive a BYOL-style objective that matches mask-pooled features across
//! two augmented views.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the training precision.

pub mod augment;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod scalar;
pub mod slic;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;
pub type Image = imaging::ImageTensor<Real>;
pub type Network = encoder::NetworkPair<Real>;
pub type Clusters = refine::ClusterModel<Real>;
pub type TrainCheckpoint = pipeline::Checkpoint<Real>;
pub type TrainDataset = pipeline::Dataset<Real>;
