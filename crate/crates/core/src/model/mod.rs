//! The detector: configuration, parameters, forward/backward passes,
//! training and persistence.

pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod gradsuite;
pub mod params;
pub mod pipeline;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, AideConfig, SemanticSource};
pub use embedding::{load_embedding_table, EmbeddingTable, EMBEDDING_MAGIC};
pub use params::{AideWeights, ConvStack, FusionMlp, Gradients, LinearLayer, ModelParams, PatchEncoder, SemanticBranch};
pub use pipeline::{
    diagnose, encode_patch_branch, encode_semantic, fuse_and_score, fuse_and_score_with_grads, logit, logit_and_grads, patch_encoder_forward,
    Diagnostics, FusionInputGrads, PatchCoord, PreparedInput, Preprocessor, SemanticInput,
};
pub use train::{
    init_checkpoint, load_train_examples, train_examples, train_model, train_with, TrainExample, TrainOptions,
};
