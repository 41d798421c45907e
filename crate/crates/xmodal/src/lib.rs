//! Cross-modal universal adversarial perturbation toolkit.
//!
//! Two cooperating optimization layers attack synthetic multi-modality
//! retrieval benchmarks:
//!
//! * a gradient layer that learns a dense universal perturbation by momentum
//!   sign-descent on a Mahalanobis triplet loss over cluster centroids, and
//! * an evolutionary layer that searches for a sparse ternary perturbation
//!   which, superimposed on the dense one, transfers across the auxiliary
//!   modalities.
//!
//! Supporting modules provide the synthetic benchmark generator, small
//! differentiable embedding models, retrieval metrics (Rank-k/CMC/mAP),
//! and an experiment driver behind the `xmodal` CLI.

pub mod binio;
pub mod centroids;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod evo;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod uap;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
