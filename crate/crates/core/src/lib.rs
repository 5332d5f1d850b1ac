//! Augmentation-free self-supervised representation learning.
//!
//! Two views of every mini-batch are produced by virtual-adversarial
//! perturbation of the input; balanced soft targets for each view come from
//! Sinkhorn-Knopp scaling of the other view's logits, with the Sinkhorn
//! temperature steered so the target entropy follows a warm-up schedule.
//! The crate also carries the evaluation harness (linear probe, k-NN graph
//! score, k-means ACC/NMI/ARI, regression RSS), synthetic data generators and
//! the `selflabel` command-line driver.

pub mod adapt;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod nn;
pub mod prob;
pub mod rng;
pub mod sinkhorn;
pub mod trainer;
pub mod vat;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use prob::{entropy, kl_divergence, softmax_rows, DistributionBatch, TransportPlan};
pub use rng::{sample_gaussian, Rng};
