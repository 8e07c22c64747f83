//! Flexible concept bottleneck models.
//!
//! A linear projector maps backbone features onto concept activations, and a
//! hypernetwork generates the sparse class weights from concept text
//! embeddings, so the concept pool can be swapped without retraining.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod hypernet;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod projector;
pub mod sparsemax;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, HeadCheckpoint};
pub use error::{FcbmError, Result};
pub use hypernet::{generate_weights, HypernetParams, Selector, WeightMode};
pub use io::{ConceptSet, Dataset, DatasetManifest, Tensor};
pub use metrics::{accuracy, explain, nec, ReportFormat};
pub use numeric::{Matrix, Rng};
pub use projector::{train_projector, ConceptValueStats, ProjectorConfig, ProjectorWeights};
pub use sparsemax::sparsemax_forward;
pub use trainer::{finetune, train_head, AblationMode, HeadData, TauInit, TrainConfig};
