//! Composite adversarial attacks with learned attack ordering, and
//! generalized adversarial training, at desk scale.
//!
//! The crate is layered bottom-up:
//! - [`tensor`], [`kernels`], [`autodiff`]: a small define-by-run reverse-mode
//!   engine over f32 tensors (convolution, bilinear rotation, HSV conversion,
//!   loss heads).
//! - [`transforms`]: the six differentiable attack components.
//! - [`attack`]: component-wise PGD, Ensemble-PGD, and the grid-search
//!   baseline.
//! - [`scheduler`]: Sinkhorn-normalized scheduling matrix, surrogate
//!   composition, Hungarian assignment.
//! - [`caa`]: the composite attack driver with fixed / random / scheduled
//!   ordering.
//! - [`model`], [`data`], [`checkpoint`], [`train`]: the desk-scale CNN,
//!   datasets (synthetic shapes + CIFAR-10 binary), persistence, and the
//!   training regimes.
//! - [`eval`]: suites, RA/ASR metrics, sweeps, paired tests, reports.

pub mod attack;
pub mod autodiff;
pub mod caa;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod scheduler;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
