//! Wire protocol between the engine and the model sidecar.
//!
//! Every op is `POST {endpoint}/v1/{op}` with a JSON envelope
//! `{"protocol": "1.0", "op": ..., "payload": {...}}`. Successful responses
//! echo the op and carry `result` plus `metadata`; failures carry
//! `{"error": {"code", "message"}}` with a 4xx/5xx status. Images travel as
//! base64 strings. `GET {endpoint}/health` reports the loaded models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ClassId, EmbeddingExpert};
use crate::revlm::{Granularity, RegionBox};

pub const PROTOCOL_VERSION: &str = "1.0";
pub const PROTOCOL_MAJOR: u32 = 1;
/// Requests larger than this are refused before sending.
pub const MAX_PAYLOAD_BYTES: usize = 20 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    EmbedImage,
    EmbedText,
    Describe,
    ExpandKeywords,
    Propose,
    Validate,
    RevisePrompt,
}

impl Op {
    pub const ALL: [Op; 7] = [
        Op::EmbedImage,
        Op::EmbedText,
        Op::Describe,
        Op::ExpandKeywords,
        Op::Propose,
        Op::Validate,
        Op::RevisePrompt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::EmbedImage => "embed_image",
            Op::EmbedText => "embed_text",
            Op::Describe => "describe",
            Op::ExpandKeywords => "expand_keywords",
            Op::Propose => "propose",
            Op::Validate => "validate",
            Op::RevisePrompt => "revise_prompt",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Major component of a `"major.minor"` protocol string.
pub fn protocol_major(version: &str) -> Option<u32> {
    version.split('.').next()?.parse().ok()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestEnvelope<P> {
    pub protocol: String,
    pub op: Op,
    pub payload: P,
}

impl<P> RequestEnvelope<P> {
    pub fn new(op: Op, payload: P) -> Self {
        RequestEnvelope { protocol: PROTOCOL_VERSION.to_string(), op, payload }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseEnvelope<R> {
    pub protocol: String,
    pub op: Op,
    pub result: R,
    pub metadata: ResponseMetadata,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseMetadata {
    pub model_id: String,
    /// Image preprocessing applied before embedding (resize, crop,
    /// normalization), reported for auditability.
    #[serde(default)]
    pub preprocessing: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
    /// Set when a text input was truncated to the model's context limit.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    #[serde(default)]
    pub protocol: Option<String>,
    pub error: ErrorBody,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub protocol: String,
    pub models: std::collections::BTreeMap<String, String>,
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod b64_list {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(items.len()))?;
        for item in items {
            seq.serialize_element(&STANDARD.encode(item))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.into_iter()
            .map(|s| STANDARD.decode(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub expert: EmbeddingExpert,
    #[serde(rename = "image_b64", with = "b64")]
    pub image: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub expert: EmbeddingExpert,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResult {
    pub expert: EmbeddingExpert,
    pub dim: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    #[serde(rename = "image_b64", with = "b64")]
    pub image: Vec<u8>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResult {
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordChannel {
    /// Images plus the category prompt.
    Visual,
    /// Category prompt only.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandKeywordsRequest {
    pub channel: KeywordChannel,
    pub category: ClassId,
    pub prompt: String,
    #[serde(rename = "images_b64", with = "b64_list")]
    pub images: Vec<Vec<u8>>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordsResult {
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub granularity: Granularity,
    pub boxes: Vec<RegionBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeRequest {
    #[serde(rename = "image_b64", with = "b64")]
    pub image: Vec<u8>,
    pub prompt: String,
    pub traces: Vec<String>,
    pub grids: Vec<GridSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxFlags {
    #[serde(rename = "box")]
    pub index: usize,
    pub traces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProposal {
    pub granularity: Granularity,
    pub subject: Vec<usize>,
    #[serde(default)]
    pub flags: Vec<BoxFlags>,
}

/// Raw proposer answer, before engine-side validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeResponse {
    pub grids: Vec<GridProposal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidateMode {
    /// Whole-image inference.
    Global,
    /// Inference over the subject and flagged subregion crops.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRole {
    Subject,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRef {
    pub granularity: Granularity,
    pub index: usize,
    pub role: RegionRole,
    #[serde(rename = "box")]
    pub bbox: RegionBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateRequest {
    pub mode: ValidateMode,
    #[serde(rename = "image_b64", with = "b64")]
    pub image: Vec<u8>,
    pub prompt: String,
    /// The class whose feature description built the prompt.
    pub category_hint: ClassId,
    pub categories: Vec<ClassId>,
    pub traces: Vec<String>,
    #[serde(default)]
    pub regions: Vec<RegionRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResponse {
    pub category: ClassId,
    pub traces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisePromptRequest {
    pub prompt: String,
    pub feedback: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_shape() {
        let env = RequestEnvelope::new(
            Op::EmbedImage,
            EmbedImageRequest { expert: EmbeddingExpert::Dinov2, image: vec![1, 2, 3] },
        );
        let v = serde_json::to_value(&env).unwrap();
        assert_eq!(v["protocol"], "1.0");
        assert_eq!(v["op"], "embed_image");
        assert_eq!(v["payload"]["expert"], "dinov2");
        assert_eq!(v["payload"]["image_b64"], "AQID");
        let back: RequestEnvelope<EmbedImageRequest> = serde_json::from_value(v).unwrap();
        assert_eq!(back.payload.image, vec![1, 2, 3]);
    }

    #[test]
    fn major_version_parsing() {
        assert_eq!(protocol_major("1.0"), Some(1));
        assert_eq!(protocol_major("2.13"), Some(2));
        assert_eq!(protocol_major("x"), None);
    }

    #[test]
    fn propose_response_wire_names() {
        let raw = r#"{"grids":[{"granularity":"3x3","subject":[0,4],"flags":[{"box":4,"traces":["rust"]}]}]}"#;
        let resp: ProposeResponse = serde_json::from_str(raw).unwrap();
        assert_eq!(resp.grids[0].granularity, Granularity::G3);
        assert_eq!(resp.grids[0].flags[0].index, 4);
    }
}
