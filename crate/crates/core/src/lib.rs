//! Weakly-supervised in-hand object segmentation from narration embeddings.
//!
//! Training aligns object proposals with hand-specific noun phrases, turns
//! the alignment into contact and matching pseudo-labels, and fits two
//! hand-object heads on them. Prediction needs only visual features.

pub mod alignment;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod inference;
pub mod numerics;
pub mod pseudo_labels;
pub mod synthgen;
pub mod trainer;

pub use data::{
    load_bundles, load_checkpoint, read_bundles_file, save_checkpoint, write_bundles_file,
    GroundTruth, HandEntry, HandSide, ModelState, ObjectProposal, PhraseEntry, RleMask,
    SampleBundle, VisualView,
};
pub use error::{Result, WishError};
pub use inference::{evaluate, evaluate_by_id, predict, EvalReport, Prediction};
pub use synthgen::{generate_dataset, SynthConfig};
pub use trainer::{train, TrainConfig, TrainLog};
