//! The oracle boundary.
//!
//! Every operation the engine cannot compute for itself — embedding text,
//! judging relevance, inducing and rewriting skills, reshaping content,
//! attributing failures, executing tasks — sits behind a trait here. The
//! `reference` module provides deterministic offline implementations; the
//! `remote` module speaks a chat-completions-style HTTP API. Swapping one
//! for the other changes no signatures and no persisted bytes.

pub mod reference;
pub mod remote;

use std::sync::Arc;

use thiserror::Error;

use crate::context::{ActivatedSubgraph, ContextString};
use crate::embedding::EmbeddingVector;
use crate::refinement::{EditDecision, Feedback, ReshapeDirection};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("adapter call timed out after {millis}ms")]
    Timeout { millis: u64 },
    #[error("no auth token: environment variable {var} is unset")]
    AuthMissing { var: String },
    #[error("unusable adapter response: {0}")]
    BadResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("adapter produced dimension {got}, graph expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("adapter unavailable: {0}")]
    Unavailable(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

/// Maps text to a point on the unit sphere (or the zero vector).
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError>;
}

/// Judges whether a unit of content is relevant to a query.
pub trait Verifier: Send + Sync {
    fn verify(&self, query: &str, content: &str) -> Result<bool, AdapterError>;
}

/// Extracts a shared skill from episode texts, and rewrites an existing
/// skill given the texts of the members that still succeed under it.
pub trait Inductor: Send + Sync {
    fn induce(&self, member_texts: &[String]) -> Result<String, AdapterError>;
    fn rewrite(
        &self,
        skill: &str,
        successful_member_texts: &[String],
    ) -> Result<String, AdapterError>;
}

/// Rewrites one unit of content toward a coarser or finer granularity.
pub trait Reshaper: Send + Sync {
    fn reshape(&self, content: &str, direction: ReshapeDirection) -> Result<String, AdapterError>;
}

/// Turns execution feedback into a structural edit decision.
pub trait Attributor: Send + Sync {
    fn attribute(
        &self,
        feedback: &Feedback,
        subgraph: &ActivatedSubgraph,
    ) -> Result<EditDecision, AdapterError>;
}

/// Attempts a task against a serialized context and reports the outcome.
pub trait Executor: Send + Sync {
    fn execute(&self, task_id: &str, context: &ContextString) -> Result<Feedback, AdapterError>;
}

/// One implementation of every oracle role, shared by handle.
#[derive(Clone)]
pub struct AdapterSuite {
    pub embedder: Arc<dyn Embedder>,
    pub verifier: Arc<dyn Verifier>,
    pub inductor: Arc<dyn Inductor>,
    pub reshaper: Arc<dyn Reshaper>,
    pub attributor: Arc<dyn Attributor>,
    pub executor: Arc<dyn Executor>,
    /// True when every member is a pure function of its inputs; tests that
    /// depend on bit-reproducibility check this before asserting.
    pub deterministic: bool,
}
