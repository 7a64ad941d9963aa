//! Deep joint source-channel coding of images over an M×M MIMO block-fading
//! channel: a transformer-based encoder/decoder conditioned on a channel
//! noise heatmap, SVD precoding and equalization, a water-filling/capacity
//! separation baseline, and the training/evaluation machinery around them.
//!
//! Layout follows the signal path: [`numerics`] is the differentiable tensor
//! engine, [`mimolin`] the complex linear algebra, [`channel`] the
//! transmission chain, [`vitcodec`] the learned transceiver, [`baseline`]
//! the separation benchmark, [`trainer`]/[`harness`] the optimization and
//! evaluation loops, [`datasets`] image ingestion.

pub mod baseline;
pub mod channel;
pub mod datasets;
pub mod harness;
pub mod mimolin;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod selfcheck;
pub mod trainer;
pub mod vitcodec;
