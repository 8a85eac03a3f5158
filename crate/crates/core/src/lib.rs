//! Bias classifiers for piecewise-linear ReLU networks.
//!
//! A ReLU network is affine on each of its linear regions, so at any input it
//! splits as `F(x) = W_x·x + B_x`. The constant term `B_x` (the *bias part*) is
//! piecewise constant in `x`, and `argmax B_x` is itself a classifier whose
//! input gradient is zero almost everywhere. This crate provides:
//!
//! - [`net`]: feed-forward dense/conv/maxpool ReLU networks with exact forward
//!   evaluation and reverse-mode gradients.
//! - [`decomposition`]: extraction of `(W_x, B_x)`, the bias-classifier decision
//!   rule, and the step-function-to-ReLU construction.
//! - [`training`]: normal, adversarial and bias-part training.
//! - [`attacks`]: FGSM, PGD, greedy l0 saliency, original-model, correlation
//!   and transfer attacks.
//! - [`safety`]: random first-degree augmentation `F + W_R·x` and Monte-Carlo
//!   validators of its safety bounds.
//! - [`metrics`]: accuracy, random-perturbation rates and table-shaped reports.
//! - [`data`]: IDX ingestion, synthetic datasets and persistence.

pub mod attacks;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod safety;
pub mod training;

pub use data::LabeledDataset;
pub use decomposition::{AffineDecomposition, AffineModel};
pub use error::{Error, Result};
pub use net::{ActivationPattern, Layer, Network};
