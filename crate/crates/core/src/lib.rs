//! GocNet: exposing image forgeries with fixed gradient-operator convolutions.
//!
//! The crate is organized around a small dense-tensor autodiff core and the
//! modules built on top of it:
//!
//! - [`tensor`]: rank-4 tensors with reverse-mode autodiff and the CNN
//!   primitives (convolution, pooling, batch norm, activations, linear,
//!   cross-entropy loss).
//! - [`gradop`]: the nine classical 3x3 gradient operators as immutable
//!   kernels, and the tensor pre-processing (TP) stage that refines an input
//!   with them.
//! - [`mta`]: the manipulation-trace attention block (double-pooling channel
//!   gate + fixed-kernel trace gate, fused through sigmoids with a learnable
//!   scale).
//! - [`network`]: ResNet-style basic blocks, the mini/full backbones, and the
//!   single/dual-stream model variants used for ablations.
//! - [`data`]: manifest ingestion, image decoding, augmentation, and the
//!   synthetic forgery generator used as a desk-scale corpus.
//! - [`train`]: Adam, the exponential LR schedule, checkpointing, and the
//!   training loop.
//! - [`metrics`]: ACC / ROC-AUC / EER.
//! - [`reference`]: naive loop implementations kept as independent oracles
//!   for the optimized paths; used heavily by the test suites.

pub mod data;
pub mod error;
pub mod gradop;
pub mod init;
pub mod metrics;
pub mod mta;
pub mod network;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims, Element, Mode, PaddingMode, ParamStore, Tensor, Tensor4};
