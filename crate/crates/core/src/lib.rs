//! Dense text-to-image retrieval with pluggable relevance feedback.
//!
//! Everything operates on precomputed embedding stores (see [`store`]): the
//! engine never runs an encoder. Queries are scored against image embeddings
//! by cosine similarity ([`ranker`]) and refined between turns by one of
//! several feedback strategies:
//!
//! - Rocchio-style pseudo relevance feedback over retrieved images, in the
//!   classical mean-based form and the softmax-weighted hard-negative form
//!   ([`rocchio`]);
//! - generative feedback, which applies the same rule to embeddings of
//!   precomputed synthetic captions of the retrieved images;
//! - the attentive feedback summarizer, a two-block cross/self-attention
//!   model over patch and token features of the retrieved items ([`afs`]),
//!   built on a small reverse-mode autodiff core ([`tensor`]);
//! - simulated or live explicit feedback ([`session`]).
//!
//! [`synth`] generates seeded synthetic stores with a controllable
//! modality gap, and [`eval`] runs whole query sets through the session
//! machinery to produce Hits@K / MRR@K reports.

pub mod afs;
pub mod eval;
pub mod pca;
pub mod ranker;
pub mod rocchio;
pub mod session;
pub mod store;
pub mod synth;
pub mod tensor;

pub use afs::{AfsConfig, AfsModel, AfsParams, LossMode, TrainConfig};
pub use eval::{evaluate, EvalConfig, QueryRun};
pub use ranker::{rank, Candidate, CandidateSet, MetricsReport, TurnMetrics};
pub use rocchio::{RefinementBreakdown, RocchioParams};
pub use session::{Anchor, ExplicitMode, SessionConfig, SessionState, Strategy, TurnResult};
pub use store::{load_store, validate_store, write_store, EmbeddingStore, ValidationReport};
pub use synth::SynthConfig;

/// Seed used when neither a flag nor `REFRANK_SEED` provides one.
pub const DEFAULT_SEED: u64 = 42;
