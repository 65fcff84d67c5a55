//! Robust contrastive learning on a small self-contained tensor core.
//!
//! The crate provides label-free instance-wise adversarial attacks,
//! adversarial contrastive pre-training, supervised adversarial baselines and
//! the evaluation protocols used to measure robustness of the learned
//! representations (linear and robust-linear probes, white-box and transfer
//! attacks, transformation-smoothed inference).

pub mod attacks;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Bindings, GradientMap, Mode};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{Element, Tensor};

/// Element type used by models, attacks and training.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
