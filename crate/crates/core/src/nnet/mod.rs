//! Tensors, a reverse-mode tape, and the U-Net dehazer built on them.
//!
//! All feature maps are `(channels, height, width)`; vectors are
//! `(features, 1, 1)` and scalars `(1, 1, 1)`. The tape is generic over the
//! element type so the same network runs in `f32` for training and in `f64`
//! for finite-difference checks.

mod checkpoint;
mod gradcheck;
mod layers;
mod ops;
mod tape;
mod unet;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use layers::{Conv2d, DehazeBlock, Fusion, Norm, Param, ParamSet};
pub use ops::{blur_image, gaussian_kernel, gelu, gelu_grad, reflect_index, symmetric_index};
pub use tape::{Bound, Fault, Gradients, Shape, Tape, Var};
pub use unet::{DehazeUNet, NetConfig};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar node, got shape {0:?}")]
    NotScalar(Shape),
    #[error("variables belong to different tapes")]
    CrossTape,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Element type of tensors on the tape.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
