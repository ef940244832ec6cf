//! Word-level causal transformer language model: vocabulary, training with
//! dev-based model selection, hidden-state extraction and checkpoints.

mod checkpoint;
pub mod gradcheck;
pub mod tensor;
mod train;
mod transformer;
mod vocab;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{
    decode_container, encode_container, load_checkpoint, read_container_file, save_checkpoint, write_container_file,
    Checkpoint, Container, ContainerHeader, TensorEntry, CONTAINER_VERSION, MAGIC,
};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use train::{encode, evaluate, log_csv, perplexity, train_lm, unigram_perplexity, Encoder, EpochLog, TrainConfig};
pub use transformer::{
    cross_entropy, positional_encoding, softmax_rows, total_nll, Batch, Forward, Layout, Transformer,
    TransformerConfig, LAYER_NORM_EPS,
};
pub use vocab::{Vocab, BOS, EOS, PAD, SPECIALS, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("out-of-vocabulary token `{0}`")]
    OutOfVocabulary(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {length} exceeds the maximum of {max}")]
    SequenceTooLong { length: usize, max: usize },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("container version {found} is not supported (expected version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated container: expected {expected} payload bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload hash mismatch: header records {expected}, payload hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("container: {0}")]
    Container(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
