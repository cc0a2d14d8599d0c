//! Blocking HTTP client for the sidecar wire protocol.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{
    self, protocol_major, DescribeRequest, EmbedImageRequest, EmbedResult, EmbedTextRequest, ErrorEnvelope,
    ExpandKeywordsRequest, Health, KeywordsResult, Op, ProposeRequest, ProposeResponse, RequestEnvelope,
    ResponseEnvelope, RevisePromptRequest, TextResult, ValidateRequest, ValidateResponse, MAX_PAYLOAD_BYTES,
    PROTOCOL_MAJOR, PROTOCOL_VERSION,
};
use super::{vector_from_wire, Embedder, SidecarError, SidecarResult, VlmClient};
use crate::model::{EmbeddingExpert, EmbeddingVector};

const RESPONSE_LIMIT: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub backoff: Duration,
    /// Upper bound on a server-provided `Retry-After`.
    pub max_retry_after: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff: Duration::from_millis(250),
            max_retry_after: Duration::from_secs(10),
        }
    }
}

pub struct HttpSidecar {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpSidecar {
    pub fn new(endpoint: &str, timeout: Duration, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpSidecar { base: endpoint.trim_end_matches('/').to_string(), agent, retry }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    pub fn health(&self) -> SidecarResult<Health> {
        let url = format!("{}/health", self.base);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| SidecarError::Unreachable { op: Op::EmbedImage, message: e.to_string() })?;
        let body = resp
            .body_mut()
            .with_config()
            .limit(RESPONSE_LIMIT)
            .read_to_vec()
            .map_err(|e| SidecarError::Unreachable { op: Op::EmbedImage, message: e.to_string() })?;
        let health: Health = serde_json::from_slice(&body)
            .map_err(|e| SidecarError::Schema { op: Op::EmbedImage, message: format!("health: {e}") })?;
        check_version(&health.protocol)?;
        Ok(health)
    }

    fn call<P: Serialize, R: DeserializeOwned>(&self, op: Op, payload: &P) -> SidecarResult<(R, protocol::ResponseMetadata)> {
        let body = serde_json::to_vec(&RequestEnvelope::new(op, payload))
            .map_err(|e| SidecarError::Schema { op, message: format!("encode: {e}") })?;
        if body.len() > MAX_PAYLOAD_BYTES {
            return Err(SidecarError::PayloadTooLarge { op, size: body.len(), limit: MAX_PAYLOAD_BYTES });
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.call_once::<R>(op, &body) {
                Ok(ok) => return Ok(ok),
                Err(err) if err.is_retryable() && attempt < self.retry.max_attempts => {
                    let wait = match &err {
                        SidecarError::Status { retry_after: Some(secs), .. } => {
                            Duration::from_secs(*secs).min(self.retry.max_retry_after)
                        }
                        _ => self.retry.backoff * attempt,
                    };
                    log::warn!("sidecar {op} attempt {attempt} failed ({err}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn call_once<R: DeserializeOwned>(&self, op: Op, body: &[u8]) -> SidecarResult<(R, protocol::ResponseMetadata)> {
        let url = format!("{}/v1/{}", self.base, op.as_str());
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| SidecarError::Unreachable { op, message: e.to_string() })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok());
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(RESPONSE_LIMIT)
            .read_to_vec()
            .map_err(|e| SidecarError::Unreachable { op, message: e.to_string() })?;
        if status != 200 {
            let (code, message) = match serde_json::from_slice::<ErrorEnvelope>(&bytes) {
                Ok(env) => (env.error.code, env.error.message),
                Err(_) => ("unknown".to_string(), String::from_utf8_lossy(&bytes).into_owned()),
            };
            return Err(SidecarError::Status { op, status, code, message, retry_after });
        }
        let env: ResponseEnvelope<R> =
            serde_json::from_slice(&bytes).map_err(|e| SidecarError::Schema { op, message: e.to_string() })?;
        check_version(&env.protocol)?;
        if env.op != op {
            return Err(SidecarError::Schema { op, message: format!("response is for op {}", env.op) });
        }
        log::debug!(
            "sidecar {op}: model {} preprocessing {:?} latency {}ms",
            env.metadata.model_id,
            env.metadata.preprocessing,
            env.metadata.latency_ms
        );
        Ok((env.result, env.metadata))
    }
}

fn check_version(got: &str) -> SidecarResult<()> {
    if protocol_major(got) != Some(PROTOCOL_MAJOR) {
        return Err(SidecarError::ProtocolMismatch { expected: PROTOCOL_VERSION.to_string(), got: got.to_string() });
    }
    Ok(())
}

impl Embedder for HttpSidecar {
    fn embed_image(&self, expert: EmbeddingExpert, image: &[u8]) -> SidecarResult<EmbeddingVector> {
        let req = EmbedImageRequest { expert, image: image.to_vec() };
        let (res, _): (EmbedResult, _) = self.call(Op::EmbedImage, &req)?;
        vector_from_wire(Op::EmbedImage, expert, res.expert, res.dim, res.vector)
    }

    fn embed_text(&self, text: &str) -> SidecarResult<EmbeddingVector> {
        let req = EmbedTextRequest { expert: EmbeddingExpert::ClipText, text: text.to_string() };
        let (res, meta): (EmbedResult, _) = self.call(Op::EmbedText, &req)?;
        if meta.truncated {
            log::info!("sidecar truncated a {}-char text input", text.chars().count());
        }
        vector_from_wire(Op::EmbedText, EmbeddingExpert::ClipText, res.expert, res.dim, res.vector)
    }
}

impl VlmClient for HttpSidecar {
    fn describe(&self, req: &DescribeRequest) -> SidecarResult<String> {
        let (res, _): (TextResult, _) = self.call(Op::Describe, req)?;
        Ok(res.text)
    }

    fn expand_keywords(&self, req: &ExpandKeywordsRequest) -> SidecarResult<Vec<String>> {
        let (res, _): (KeywordsResult, _) = self.call(Op::ExpandKeywords, req)?;
        Ok(res.keywords)
    }

    fn propose(&self, req: &ProposeRequest) -> SidecarResult<ProposeResponse> {
        let (res, _): (ProposeResponse, _) = self.call(Op::Propose, req)?;
        Ok(res)
    }

    fn validate(&self, req: &ValidateRequest) -> SidecarResult<ValidateResponse> {
        let (res, _): (ValidateResponse, _) = self.call(Op::Validate, req)?;
        Ok(res)
    }

    fn revise_prompt(&self, prompt: &str, feedback: &str) -> SidecarResult<String> {
        let req = RevisePromptRequest { prompt: prompt.to_string(), feedback: feedback.to_string() };
        let (res, _): (TextResult, _) = self.call(Op::RevisePrompt, &req)?;
        Ok(res.text)
    }
}
