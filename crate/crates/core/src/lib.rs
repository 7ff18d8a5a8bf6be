//! Zero-shot normalization of adverse drug event mentions.
//!
//! Mentions are linked to preferred terms of a terminology by ranking every
//! lowest-level term against the mention with each sentence encoder, then
//! fusing the per-encoder rankings with reciprocal-rank fusion.
//!
//! The crate is organized the way the pipeline runs:
//!
//! - [`spans`] turns BIO token labels into character-offset mentions.
//! - [`terminology`] loads the LLT → PT vocabulary.
//! - [`embeddings`] loads per-encoder embedding files and provides a
//!   deterministic hashing embedder for tests and fixtures.
//! - [`retrieval`] ranks, fuses and links.
//! - [`pipeline`] wires encoders to a terminology and links batches of
//!   mentions in parallel with deterministic output.
//! - [`evaluation`] scores predictions against gold annotations.

pub mod embeddings;
pub mod evaluation;
pub mod jsonl;
pub mod pipeline;
pub mod retrieval;
pub mod spans;
pub mod terminology;

pub use embeddings::{fixture_embed, EmbeddingError, EmbeddingSet, Vector};
pub use evaluation::{evaluate, f1_from_pr, match_annotations, prf, Annotation, EvalReport, MatchMode};
pub use jsonl::JsonlError;
pub use pipeline::{EncoderPair, Mention, Pipeline, PipelineError};
pub use retrieval::{
    cosine, link_mention, rank_terms, rrf_fuse, Aggregation, FusedRanking, LinkResult, Ranking,
    RetrievalError, DEFAULT_K,
};
pub use spans::{decode_bio, encode_bio, DecodeMode, Label, LabeledToken, Span, SpanError};
pub use terminology::{TermRecord, Terminology, TerminologyError};
