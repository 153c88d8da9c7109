//! Zero-shot composed image retrieval: a reference image plus a textual
//! modification go in, a ranked list of gallery images comes out.
//!
//! The crate is organised by stage:
//!
//! - [`vector`] and [`vindex`]: unit-norm embeddings and the exact top-K index;
//! - [`prompts`]: the prompt templates and their rendering;
//! - [`clients`]: embedder, captioner and scorer interfaces, with mock and HTTP
//!   implementations plus caching and admission control;
//! - [`pipeline`]: pseudo-target generation, coarse retrieval, re-ranking and fusion;
//! - [`evalkit`]: dataset ingestion, metrics and benchmark runs;
//! - [`synth`]: seeded synthetic datasets for tests and benchmarks.

pub mod clients;
pub mod evalkit;
pub mod fsutil;
pub mod pipeline;
pub mod prompts;
pub mod synth;
pub mod types;
pub mod vector;
pub mod vindex;

pub use pipeline::{Pipeline, PipelineConfig, PipelineError, QueryRun};
pub use prompts::PromptSet;
pub use types::{
    CompositeQuery, GroundTruth, PromptMode, PseudoTarget, RankedList, ScoredCandidate,
    ValidationError,
};
pub use vector::{EmbeddingVector, VectorError};
pub use vindex::{GalleryIndex, IndexError};
