//! Subspace-aware soft-prompt continual learning.
//!
//! Each task is summarized by the PCA subspace of its embeddings under a frozen
//! base model. A new task either reuses the stored prompt whose subspace it
//! overlaps most, or receives a fresh prompt parameterized in the orthogonal
//! complement of every stored subspace. Only the prompt coordinates (and,
//! optionally, low-rank adapters) are trained.

pub mod continual;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod subspace;

pub use continual::{run, AccuracyMatrix, Mode, RunConfig, RunOutcome, Trainer, TransferReport};
pub use data::{Dataset, DatasetKind, DomainSpec};
pub use error::{Result, SparcError};
pub use linalg::{Matrix, SubspaceBasis};
pub use model::{TinyLm, TinyLmConfig};
pub use prompt::{PromptStore, SoftPrompt};
pub use subspace::{OverlapReport, ReuseDecision};
