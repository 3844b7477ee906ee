//! Temporally-aware mobile video object detection at desk scale.
//!
//! The crate contains:
//!
//! - a small NHWC tensor engine with tape-based reverse-mode differentiation
//!   ([`tensor`], [`ops`], [`autodiff`]);
//! - convolutional recurrent layers: LSTM, GRU, Bottleneck-LSTM and a
//!   weighted-averaging baseline ([`recurrent`]);
//! - an analytical parameter / multiply-add cost model ([`cost`]);
//! - an LSTM-SSD architecture builder and the frame-by-frame runner
//!   ([`arch`], [`model`]);
//! - SSD anchors, matching, loss, NMS and mAP evaluation ([`detection`]);
//! - a synthetic moving-shapes video generator with occlusion, RMSprop and
//!   the two-stage training / evaluation pipeline ([`data`], [`optim`],
//!   [`train`]).

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod detection;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod recurrent;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{finite_diff_check, Tape, Var};
pub use checkpoint::ParamStore;
pub use error::{Error, Result};
pub use tensor::{ConvKernel, KernelKind, Padding, Real, Shape, Tensor};

/// The guide in `book/` is compiled as doctests so its examples stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/recurrent.md")]
    mod recurrent {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    mod architecture {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/conventions.md")]
    mod conventions {}
}
