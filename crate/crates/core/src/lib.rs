//! Checkpoint surgery for cross-lingual and progressive transfer of language
//! models.
//!
//! The crate initializes a large model for a target language from a large
//! source-language model and a small target-language model, and provides the
//! two diagnostics that motivate the method: vocabulary overlap between
//! tokenizers ([`vocab`]) and nearest-neighbor agreement between embedding
//! spaces of different sizes ([`embed_space`]).
//!
//! Heavy loops run on rayon when the default `parallel` feature is enabled;
//! disable it (or pass [`Execution::Sequential`]) for a single-threaded
//! build with identical results.

pub mod embed_space;
pub mod error;
pub mod exec;
mod json;
mod kernels;
pub mod tensor_io;
pub mod transfer;
pub mod vocab;

pub use embed_space::{cosine_similarities, knn, knn_audit, knn_overlap_score, KnnAudit, NeighborSet};
pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
pub use tensor_io::{
    find_embedding_tensor, open_checkpoint, read_matrix, write_checkpoint, CheckpointBundle, Dtype, EmbeddingMatrix,
    EmbeddingTensors, TensorRecord, TensorSpec,
};
pub use transfer::{
    baseline_init, build_target_embeddings, construct_missing_embedding, delta_weights, transfer_checkpoint,
    BuildReport, Fallback, HeadPolicy, InitMethod, OutputDtype, TransferConfig, TransferOutput, TransferReport,
    WeightMode, WeightVector,
};
pub use vocab::{
    compute_overlap, overlap_ratio, CanonicalMode, CanonicalizationPolicy, Denominator, OverlapMap, VocabFormat,
    Vocabulary,
};
