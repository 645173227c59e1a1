//! Desk-scale laboratory for neural-network backdoor attacks and for
//! stress-testing three model-inspection defenses: trigger
//! reverse-engineering with MAD anomaly scoring, neuron stimulation
//! analysis, and meta-classifier detection.
//!
//! The numeric core is a small f32 tensor library with reverse-mode
//! automatic differentiation ([`tape`]), enough to train tiny MLPs and
//! CNNs ([`nets`]) on synthetic or MNIST data ([`datasets`]), implant
//! backdoors ([`attacks`]), and run the three defenses
//! ([`neural_cleanse`], [`abs_scan`], [`mntd`]). The [`harness`] module
//! wraps everything in declarative, seeded scenarios with CSV/JSON
//! reports and SVG plots.

pub mod abs_scan;
pub mod attacks;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod mntd;
pub mod nets;
pub mod neural_cleanse;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Outcome of a model inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Backdoored,
    Benign,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Backdoored => write!(f, "backdoored"),
            Verdict::Benign => write!(f, "benign"),
        }
    }
}
