//! Multi-scale hierarchical vision transformer segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode gradient tape.
//! * [`blocks`]: MBConv, block/grid window attention, MaxViT blocks and the
//!   four-stage hierarchical backbone.
//! * [`decoder`]: attention-gated cascaded decoder and prediction-map
//!   aggregation.
//! * [`model`]: two backbones and two decoders wired in parallel or
//!   cascaded mode, plus checkpoints.
//! * [`losses`]: soft Dice, cross-entropy and combinatorial subset-sum loss
//!   aggregation over multi-stage predictions.
//! * [`metrics`]: Dice similarity and 95th-percentile Hausdorff distance.
//! * [`harness`]: synthetic data, augmentation, training, evaluation and
//!   ablation sweeps.

pub mod blocks;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Element, Interpolation, Tape, Tensor, Var};
