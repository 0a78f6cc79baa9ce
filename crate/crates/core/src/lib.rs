//! U-net compression by knowledge distillation.
//!
//! A small, dependency-light training stack: dense 4-D tensors with
//! define-by-run reverse-mode differentiation ([`tape`]), the layers and
//! losses of a binary segmentation U-net ([`layers`]), the U-net family
//! itself with parameter counting and checkpoints ([`unet`]), a
//! distillation-aware training engine ([`distill`]), a synthetic blob-image
//! dataset generator ([`data`]) and the metrics and experiment runner used by
//! the `unsq` command-line tool ([`metrics`], [`experiment`]).

pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Real, Shape, Tensor};
