//! Noise-robust cross-modal hashing: two-branch hash networks trained
//! with a semantic-consistent, bidirectional soft contrastive objective,
//! evaluated by bit-packed Hamming retrieval.
//!
//! The pipeline at a glance:
//!
//! 1. [`dataset`] builds or loads multimodal features with multi-hot
//!    labels, splits them into train/query/retrieval sets, and injects
//!    symmetric label noise into the train split.
//! 2. [`model`] holds the per-modality hash branches (tanh heads) and
//!    linear-plus-sigmoid classifiers.
//! 3. [`losses`] defines the objective: a confidence-weighted
//!    classification term plus attraction, repulsion, and quantization
//!    terms over soft label-overlap pairs.
//! 4. [`trainer`] runs Adam over mini-batches with a warm-up schedule
//!    before enabling confidence weighting.
//! 5. [`retrieval`] binarizes codes, ranks by popcount Hamming distance,
//!    and scores MAP and precision-recall.
//!
//! Gradients come from [`ndmath`], a small matrix-valued reverse-mode
//! tape covering exactly the primitives the objective needs.

pub mod dataset;
pub mod error;
pub mod losses;
pub mod model;
pub mod ndmath;
pub mod retrieval;
pub mod trainer;

pub use dataset::{
    corrupt_labels, generate_synthetic, load_features, save_features, FileFormat,
    MultimodalDataset, NoiseScheme, NoiseSpec, Split, SyntheticSpec,
};
pub use error::{Error, Result};
pub use losses::{ContrastiveParams, LossBreakdown, NeighborSet, SimilarityScaling};
pub use model::{BranchConfig, HashModel, Modality, ModelConfig};
pub use ndmath::{Matrix, Tape, Var};
pub use retrieval::{
    average_precision, evaluate_model, hamming, mean_average_precision, precision_recall_curve,
    BinaryCodeIndex, CrossModalMap, Direction, MapResult, PrMode, PrPoint, RetrievalRun,
};
pub use trainer::{
    train, AblationFlags, Adam, MetricsLog, NeighborSpace, TrainConfig, TrainOutcome, TrainState,
};
