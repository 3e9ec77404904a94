//! Staggered spatial-temporal decomposition of physics-constrained neural PDE solvers.
//!
//! A fine-grid learning task `u_t -> u_{t+dt}` is split into `s_H * s_W * s_T`
//! coarse subtasks that share one small convolutional solver. The subtask
//! outputs are reassembled on the fine grid, where a finite-difference
//! residual trains the shared parameters without solution labels.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod fft;
pub mod field;
pub mod model;
pub mod parallel;
pub mod physics;
pub mod random_field;
pub mod rng;
pub mod snapshot;
pub mod solvers;
pub mod train;

pub use error::{Error, Result};

/// Library version recorded in run digests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
