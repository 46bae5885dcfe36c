//! Similarity analysis for trained classifiers.
//!
//! The crate compares pairs of models through the activations and logits they
//! produce on a shared set of inputs:
//!
//! * [`repsim`]: representational measures on penultimate-layer activations
//!   (linear CKA, Procrustes similarity, k-NN Jaccard, topology divergence).
//! * [`funcsim`]: prediction-level measures (agreement rate, scaled
//!   Jensen-Shannon similarity).
//! * [`stats`]: rank correlation with permutation p-values, agree/disagree
//!   subgroup analysis and agreement bounds.
//! * [`probe`]: linear probes retrained on frozen representations.
//! * [`pipeline`]: pairwise sweeps over experiment manifests with
//!   deterministic CSV/JSON emission.
//!
//! Tensors are exchanged as `.npy` files ([`tensor_io`]); every computation
//! runs in `f64`.

pub mod error;
pub mod funcsim;
pub mod pipeline;
pub mod preprocess;
pub mod probe;
pub mod repsim;
pub mod stats;
pub mod synth;
pub mod tensor_io;

pub use error::Error;
pub use funcsim::{agreement, jsd, jsdsim, FuncSimError};
pub use preprocess::{CenteredMatrix, PreprocessError, ProbabilityMatrix};
pub use repsim::{cka, jaccard_sim, knn_indices, procrustes_sim, rtd, RepSimError};
pub use stats::{AgreementBounds, CorrelationReport, StatsError, SubgroupResult};
pub use tensor_io::{ExperimentManifest, InputType, ModelRecord, TensorFile, TensorIoError};

/// Dense `f64` matrix used throughout the crate. Rows are inputs.
pub type Matrix = nalgebra::DMatrix<f64>;

/// N×D penultimate-layer activations.
pub type ActivationMatrix = Matrix;

/// N×C pre-softmax outputs.
pub type LogitMatrix = Matrix;

/// N class labels in `[0, C)`.
pub type LabelVector = Vec<usize>;
