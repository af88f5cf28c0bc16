//! Payload modes, encoders, token estimation, negotiation and fallback.
//!
//! Modes are totally ordered from plain text (0) to cache slices (5). Two
//! parties settle on the richest mode both support; when a mode fails
//! mid-exchange the sender steps down one ordinal at a time until it reaches
//! text, which every delegate must accept. Only text and semantic frames have
//! encoders; the higher modes exist as ordinals for negotiation and fallback
//! arithmetic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PayloadError {
    #[error("content is not valid UTF-8")]
    Encoding,
    #[error("invalid semantic frame: {0}")]
    InvalidFrame(String),
    #[error("no encoder for payload mode {0}")]
    UnsupportedMode(PayloadMode),
    #[error("a mode set must include text (mode 0)")]
    MissingText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    Text = 0,
    SemanticFrame = 1,
    EmbeddingHints = 2,
    SemanticGraphs = 3,
    LatentCapsules = 4,
    CacheSlices = 5,
}

impl PayloadMode {
    pub const ALL: [PayloadMode; 6] = [
        PayloadMode::Text,
        PayloadMode::SemanticFrame,
        PayloadMode::EmbeddingHints,
        PayloadMode::SemanticGraphs,
        PayloadMode::LatentCapsules,
        PayloadMode::CacheSlices,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(n: u8) -> Option<Self> {
        Self::ALL.get(n as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PayloadMode::Text => "text",
            PayloadMode::SemanticFrame => "semantic_frame",
            PayloadMode::EmbeddingHints => "embedding_hints",
            PayloadMode::SemanticGraphs => "semantic_graphs",
            PayloadMode::LatentCapsules => "latent_capsules",
            PayloadMode::CacheSlices => "cache_slices",
        }
    }
}

impl fmt::Display for PayloadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PayloadMode {
    type Err = String;

    /// Accepts the snake-case name, a short alias (`frame`), or the ordinal.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<u8>() {
            return Self::from_ordinal(n)
                .ok_or_else(|| format!("no payload mode with ordinal {n}"));
        }
        match s {
            "frame" => return Ok(PayloadMode::SemanticFrame),
            "embedding" => return Ok(PayloadMode::EmbeddingHints),
            "graph" => return Ok(PayloadMode::SemanticGraphs),
            _ => {}
        }
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown payload mode {s:?}"))
    }
}

/// Modes a party supports. Always contains [`PayloadMode::Text`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PayloadMode>", into = "Vec<PayloadMode>")]
pub struct ModeSet(BTreeSet<PayloadMode>);

impl ModeSet {
    pub fn new(modes: impl IntoIterator<Item = PayloadMode>) -> Result<Self, PayloadError> {
        let set: BTreeSet<_> = modes.into_iter().collect();
        if !set.contains(&PayloadMode::Text) {
            return Err(PayloadError::MissingText);
        }
        Ok(Self(set))
    }

    pub fn text_only() -> Self {
        Self(BTreeSet::from([PayloadMode::Text]))
    }

    /// Text and semantic frames: everything with an encoder.
    pub fn encodable() -> Self {
        Self(BTreeSet::from([
            PayloadMode::Text,
            PayloadMode::SemanticFrame,
        ]))
    }

    pub fn all() -> Self {
        Self(PayloadMode::ALL.into_iter().collect())
    }

    pub fn contains(&self, mode: PayloadMode) -> bool {
        self.0.contains(&mode)
    }

    pub fn max(&self) -> PayloadMode {
        *self.0.iter().next_back().expect("mode set contains text")
    }

    pub fn iter(&self) -> impl Iterator<Item = PayloadMode> + '_ {
        self.0.iter().copied()
    }
}

impl TryFrom<Vec<PayloadMode>> for ModeSet {
    type Error = PayloadError;

    fn try_from(v: Vec<PayloadMode>) -> Result<Self, Self::Error> {
        ModeSet::new(v)
    }
}

impl From<ModeSet> for Vec<PayloadMode> {
    fn from(s: ModeSet) -> Self {
        s.0.into_iter().collect()
    }
}

/// Richest mode in both sets. Never fails: both contain text.
pub fn negotiate_mode(caller: &ModeSet, callee: &ModeSet) -> PayloadMode {
    caller
        .0
        .intersection(&callee.0)
        .last()
        .copied()
        .unwrap_or(PayloadMode::Text)
}

/// One step down the fallback chain; `None` below text.
pub fn fallback_next(mode: PayloadMode) -> Option<PayloadMode> {
    mode.ordinal()
        .checked_sub(1)
        .and_then(PayloadMode::from_ordinal)
}

const STRUCTURAL: &[char] = &['{', '}', '[', ']', '"', ':', ','];

/// Deterministic token estimate.
///
/// Whitespace-separated tokens made only of `{}[]":,` count one per
/// character; every other token is a word. Result is
/// `ceil(1.3 * words) + structural`.
pub fn estimate_tokens(content: &[u8]) -> Result<usize, PayloadError> {
    let text = std::str::from_utf8(content).map_err(|_| PayloadError::Encoding)?;
    Ok(estimate_str(text))
}

pub fn estimate_str(text: &str) -> usize {
    let mut words = 0usize;
    let mut structural = 0usize;
    for tok in text.split_whitespace() {
        if tok.chars().all(|c| STRUCTURAL.contains(&c)) {
            structural += tok.chars().count();
        } else {
            words += 1;
        }
    }
    // ceil(1.3 * w) in integers
    (13 * words).div_ceil(10) + structural
}

/// Mode-1 typed task. Serialized field order is fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticFrame {
    pub task_type: String,
    pub instruction: String,
    pub input: String,
    pub expected_output_format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl SemanticFrame {
    pub fn validate(&self) -> Result<(), PayloadError> {
        if self.task_type.trim().is_empty() {
            return Err(PayloadError::InvalidFrame("task_type is empty".into()));
        }
        if self.instruction.trim().is_empty() {
            return Err(PayloadError::InvalidFrame("instruction is empty".into()));
        }
        Ok(())
    }

    /// Plain-text rendering used when a frame falls back to mode 0.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}.", self.instruction.trim_end_matches('.'));
        if !self.input.is_empty() {
            out.push_str(&format!(" Input: {}", self.input));
        }
        if let Some(labels) = &self.labels {
            out.push_str(&format!(" Options: {}.", labels.join(", ")));
        }
        if !self.expected_output_format.is_empty() {
            out.push_str(&format!(" Respond with: {}.", self.expected_output_format));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPayload {
    mode: PayloadMode,
    bytes: Vec<u8>,
    token_estimate: usize,
}

impl EncodedPayload {
    pub fn new(mode: PayloadMode, bytes: Vec<u8>) -> Result<Self, PayloadError> {
        let token_estimate = estimate_tokens(&bytes)?;
        Ok(Self {
            mode,
            bytes,
            token_estimate,
        })
    }

    pub fn mode(&self) -> PayloadMode {
        self.mode
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Always valid UTF-8: construction checks it.
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.bytes).expect("payload bytes are utf-8")
    }

    pub fn token_estimate(&self) -> usize {
        self.token_estimate
    }
}

/// Task content before a mode is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskContent {
    Text(String),
    Frame(SemanticFrame),
}

impl TaskContent {
    pub fn to_text(&self) -> String {
        match self {
            TaskContent::Text(t) => t.clone(),
            TaskContent::Frame(f) => f.to_text(),
        }
    }

    /// Richest encodable mode for this content.
    pub fn natural_mode(&self) -> PayloadMode {
        match self {
            TaskContent::Text(_) => PayloadMode::Text,
            TaskContent::Frame(_) => PayloadMode::SemanticFrame,
        }
    }
}

/// Single-line JSON with `", "` and `": "` separators, the layout token
/// estimates are quoted against.
struct SpacedFormatter;

impl serde_json::ser::Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b": ")
    }
}

pub fn to_spaced_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SpacedFormatter);
    value.serialize(&mut ser).expect("in-memory serialization");
    out
}

pub fn encode_mode0(task_text: &str) -> EncodedPayload {
    EncodedPayload::new(PayloadMode::Text, task_text.as_bytes().to_vec()).expect("str is utf-8")
}

pub fn encode_mode1(frame: &SemanticFrame) -> Result<EncodedPayload, PayloadError> {
    frame.validate()?;
    EncodedPayload::new(PayloadMode::SemanticFrame, to_spaced_json(frame))
}

#[derive(Serialize)]
struct A2aPart<'a> {
    text: &'a str,
}

#[derive(Serialize)]
struct A2aMessage<'a> {
    role: &'a str,
    parts: [A2aPart<'a>; 1],
}

#[derive(Serialize)]
struct A2aTask<'a> {
    message: A2aMessage<'a>,
}

#[derive(Serialize)]
struct A2aEnvelope<'a> {
    task: A2aTask<'a>,
}

/// Baseline: raw text inside `task.message.parts[0].text`. Tagged as text
/// mode since the content is natural language.
pub fn encode_a2a(task_text: &str) -> EncodedPayload {
    let env = A2aEnvelope {
        task: A2aTask {
            message: A2aMessage {
                role: "user",
                parts: [A2aPart { text: task_text }],
            },
        },
    };
    EncodedPayload::new(PayloadMode::Text, to_spaced_json(&env)).expect("json is utf-8")
}

/// Encode `content` at `mode`. Frames render to text for mode 0; text cannot
/// be lifted into a frame.
pub fn encode(mode: PayloadMode, content: &TaskContent) -> Result<EncodedPayload, PayloadError> {
    match (mode, content) {
        (PayloadMode::Text, c) => Ok(encode_mode0(&c.to_text())),
        (PayloadMode::SemanticFrame, TaskContent::Frame(f)) => encode_mode1(f),
        (PayloadMode::SemanticFrame, TaskContent::Text(_)) => Err(PayloadError::InvalidFrame(
            "text content has no frame form".into(),
        )),
        (m, _) => Err(PayloadError::UnsupportedMode(m)),
    }
}

pub fn decode_frame(bytes: &[u8]) -> Option<SemanticFrame> {
    let frame: SemanticFrame = serde_json::from_slice(bytes).ok()?;
    frame.validate().ok()?;
    Some(frame)
}

/// True iff `bytes` is a complete, valid semantic frame. Failures return
/// false so callers can fall back instead of erroring.
pub fn validate_frame_schema(bytes: &[u8]) -> bool {
    decode_frame(bytes).is_some()
}
