//! Model inference boundary. The engine never runs models itself; embedding
//! and VLM calls go through [`Embedder`] and [`VlmClient`], implemented by
//! the HTTP client for a real sidecar and by in-process mocks for tests.

pub mod http;
pub mod mock;
pub mod protocol;

use std::sync::Arc;

use thiserror::Error;

use crate::model::{EmbeddingExpert, EmbeddingVector};
pub use protocol::{
    DescribeRequest, ExpandKeywordsRequest, KeywordChannel, Op, ProposeRequest, ProposeResponse, ValidateMode,
    ValidateRequest, ValidateResponse,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SidecarError {
    #[error("sidecar unreachable during {op}: {message}")]
    Unreachable { op: Op, message: String },

    #[error("sidecar returned {status} for {op} ({code}): {message}")]
    Status { op: Op, status: u16, code: String, message: String, retry_after: Option<u64> },

    #[error("sidecar protocol {got} is incompatible with engine protocol {expected}")]
    ProtocolMismatch { expected: String, got: String },

    #[error("malformed sidecar response for {op}: {message}")]
    Schema { op: Op, message: String },

    #[error("{op} payload of {size} bytes exceeds the {limit} byte cap")]
    PayloadTooLarge { op: Op, size: usize, limit: usize },
}

impl SidecarError {
    pub fn is_retryable(&self) -> bool {
        match self {
            SidecarError::Unreachable { .. } => true,
            SidecarError::Status { status, .. } => matches!(status, 429 | 502 | 503 | 504),
            _ => false,
        }
    }
}

pub type SidecarResult<T> = Result<T, SidecarError>;

pub trait Embedder: Send + Sync {
    fn embed_image(&self, expert: EmbeddingExpert, image: &[u8]) -> SidecarResult<EmbeddingVector>;
    /// CLIP text embedding.
    fn embed_text(&self, text: &str) -> SidecarResult<EmbeddingVector>;
}

pub trait VlmClient: Send + Sync {
    fn describe(&self, req: &DescribeRequest) -> SidecarResult<String>;
    fn expand_keywords(&self, req: &ExpandKeywordsRequest) -> SidecarResult<Vec<String>>;
    fn propose(&self, req: &ProposeRequest) -> SidecarResult<ProposeResponse>;
    fn validate(&self, req: &ValidateRequest) -> SidecarResult<ValidateResponse>;
    fn revise_prompt(&self, prompt: &str, feedback: &str) -> SidecarResult<String>;
}

/// Both halves of the sidecar contract.
pub trait Sidecar: Embedder + VlmClient {}

impl<T: Embedder + VlmClient> Sidecar for T {}

pub type SharedSidecar = Arc<dyn Sidecar>;

/// Turn a raw vector from the wire into a validated embedding. Vectors are
/// renormalized engine-side so dot product equals cosine downstream.
pub(crate) fn vector_from_wire(op: Op, expected: EmbeddingExpert, got: EmbeddingExpert, dim: usize, data: Vec<f32>) -> SidecarResult<EmbeddingVector> {
    if got != expected {
        return Err(SidecarError::Schema { op, message: format!("asked for {expected}, got {got}") });
    }
    if dim != expected.dim() || data.len() != dim {
        return Err(SidecarError::Schema {
            op,
            message: format!("{expected} vector has dim {} (declared {dim}), expected {}", data.len(), expected.dim()),
        });
    }
    EmbeddingVector::normalized(expected, data).map_err(|e| SidecarError::Schema { op, message: e.to_string() })
}
