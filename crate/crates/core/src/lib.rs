//! Liveness-score regression for face anti-spoofing.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense tensors, the handful of layers the model needs with
//!   hand-written backward passes, and a central-difference gradient checker.
//! - [`pdle`]: pseudo-discretized label encoding. A rectangular patch is
//!   exchanged between a real and a spoof image and the result is labelled
//!   with the exact fraction of real pixels.
//! - [`model`]: a small convolutional encoder, a `(K+1)`-bin liveness head
//!   whose softmax expectation is the liveness score, and a domain
//!   discriminator behind a gradient reversal layer.
//! - [`losses`]: score MSE, domain cross-entropy and their weighted sum.
//! - [`metrics`]: AUC, EER, APCER/BPCER/ACER and HTER.
//! - [`datagen`]: a procedural multi-domain real/spoof generator, the
//!   on-disk manifest format and the train/test augmentations.
//! - [`harness`]: Adam, the learning-rate schedule, the training loop,
//!   evaluation and the experiment protocols.

pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pdle;
pub mod rng;

pub use error::{Error, Result};

/// Binary class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Spoof,
    Real,
}

impl Label {
    pub fn from_value(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Spoof),
            1 => Some(Label::Real),
            _ => None,
        }
    }

    pub fn value(self) -> u8 {
        match self {
            Label::Spoof => 0,
            Label::Real => 1,
        }
    }

    /// Regression target of the pure class: 0.0 for spoof, 1.0 for real.
    pub fn target(self) -> f64 {
        f64::from(self.value())
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Spoof => Label::Real,
            Label::Real => Label::Spoof,
        }
    }
}

/// An `H×W×3` image in `[0, 1]` with its class and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: diffcore::Tensor,
    pub label: Label,
    pub domain: usize,
}
