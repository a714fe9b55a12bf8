//! Domain types shared by every other module: prompts, images, scores and the
//! records the refinement loop produces.
//!
//! Everything here is immutable after construction. Constructors validate, so a
//! value that exists is a value that satisfies its invariants.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised by domain constructors.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("prompt text contains no tokens")]
    EmptyPrompt,
    #[error("image has no bytes")]
    EmptyImage,
    #[error("image payload of {0} bytes exceeds the {MAX_IMAGE_BYTES} byte cap")]
    ImageTooLarge(usize),
    #[error("unsupported media type: {0}")]
    UnsupportedMediaType(String),
    #[error("reference set must contain at least one image")]
    EmptyReferenceSet,
    #[error("score {0} is outside 0..=10")]
    ScoreOutOfRange(u64),
    #[error("total score denominator must be nonzero")]
    ZeroDenominator,
}

/// Upper bound on a single image payload (8 MiB).
pub const MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;

/// Counts tokens in prompt text and clips text to a token budget.
///
/// The engine treats tokenization as an injected policy so a model-specific
/// tokenizer can replace the default without touching call sites.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Returns the longest prefix of `text` holding at most `limit` tokens,
    /// re-joined under this counter's joining rule.
    fn clip(&self, text: &str, limit: usize) -> String;
}

/// Default counter: whitespace-delimited words, single-space join on clip.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl TokenCounter for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn clip(&self, text: &str, limit: usize) -> String {
        text.split_whitespace()
            .take(limit)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A non-empty prompt with its token count under the counter that built it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    text: String,
    token_count: usize,
}

impl Prompt {
    pub fn new(text: impl Into<String>, counter: &dyn TokenCounter) -> Result<Self, DomainError> {
        let text = text.into();
        let token_count = counter.count(&text);
        if token_count == 0 {
            return Err(DomainError::EmptyPrompt);
        }
        Ok(Self { text, token_count })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Returns `p` unchanged when it fits, otherwise the first `limit` tokens.
///
/// Idempotent: clipping a clipped prompt is a no-op.
pub fn clip_prompt(p: &Prompt, limit: usize, counter: &dyn TokenCounter) -> Prompt {
    if p.token_count() <= limit {
        return p.clone();
    }
    let clipped = counter.clip(p.text(), limit);
    Prompt::new(clipped, counter).expect("clip of a non-empty prompt to a positive limit is non-empty")
}

/// Media types the wire format accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaType {
    Jpeg,
    Png,
    Webp,
}

impl MediaType {
    pub fn as_str(&self) -> &'static str {
        match self {
            MediaType::Jpeg => "image/jpeg",
            MediaType::Png => "image/png",
            MediaType::Webp => "image/webp",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DomainError> {
        match s {
            "image/jpeg" => Ok(MediaType::Jpeg),
            "image/png" => Ok(MediaType::Png),
            "image/webp" => Ok(MediaType::Webp),
            other => Err(DomainError::UnsupportedMediaType(other.to_string())),
        }
    }
}

/// Where an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reference,
    Generated,
}

/// An immutable image payload. Bytes are shared, so clones are cheap and the
/// history window can hold handles without copying megabytes around.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHandle {
    bytes: Arc<[u8]>,
    media_type: MediaType,
    provenance: Provenance,
    origin_id: String,
}

impl ImageHandle {
    pub fn new(
        bytes: Vec<u8>,
        media_type: MediaType,
        provenance: Provenance,
        origin_id: impl Into<String>,
    ) -> Result<Self, DomainError> {
        if bytes.is_empty() {
            return Err(DomainError::EmptyImage);
        }
        if bytes.len() > MAX_IMAGE_BYTES {
            return Err(DomainError::ImageTooLarge(bytes.len()));
        }
        Ok(Self {
            bytes: Arc::from(bytes),
            media_type,
            provenance,
            origin_id: origin_id.into(),
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> MediaType {
        self.media_type
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn origin_id(&self) -> &str {
        &self.origin_id
    }

    /// Hex SHA-256 of the payload, used for content addressing.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }
}

/// Ordered, non-empty collection of reference images. Order is fixed at
/// construction; sampling draws an index so callers can log which one was used.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    images: Vec<ImageHandle>,
}

impl ReferenceSet {
    pub fn new(images: Vec<ImageHandle>) -> Result<Self, DomainError> {
        if images.is_empty() {
            return Err(DomainError::EmptyReferenceSet);
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, index: usize) -> &ImageHandle {
        &self.images[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageHandle> {
        self.images.iter()
    }
}

/// Integer similarity verdict on the judge's 0..=10 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Score(u8);

impl Score {
    pub const MAX: Score = Score(10);

    pub fn new(value: u64) -> Result<Self, DomainError> {
        if value > 10 {
            return Err(DomainError::ScoreOutOfRange(value));
        }
        Ok(Score(value as u8))
    }

    pub fn value(&self) -> u8 {
        self.0
    }
}

impl TryFrom<u64> for Score {
    type Error = DomainError;

    fn try_from(value: u64) -> Result<Self, Self::Error> {
        Score::new(value)
    }
}

impl From<Score> for u64 {
    fn from(s: Score) -> u64 {
        s.0 as u64
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How a total score was aggregated from individual judgments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBasis {
    /// In-iteration score plus every re-evaluation score, summed.
    SumTally,
    /// Arithmetic mean of the re-evaluation scores.
    MeanOverReferences,
}

/// Exact rational total score. Kept as numerator/denominator so equality and
/// ordering of ties are exact rather than subject to float rounding.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TotalScore {
    numer: u64,
    denom: u64,
    basis: ScoreBasis,
}

impl TotalScore {
    pub fn new(numer: u64, denom: u64, basis: ScoreBasis) -> Result<Self, DomainError> {
        if denom == 0 {
            return Err(DomainError::ZeroDenominator);
        }
        Ok(Self { numer, denom, basis })
    }

    /// Sum of the given scores over denominator 1.
    pub fn sum_tally(scores: impl IntoIterator<Item = Score>) -> Self {
        let numer = scores.into_iter().map(|s| s.value() as u64).sum();
        Self { numer, denom: 1, basis: ScoreBasis::SumTally }
    }

    /// Mean of the given scores. Errors when the slice is empty.
    pub fn mean(scores: &[Score]) -> Result<Self, DomainError> {
        if scores.is_empty() {
            return Err(DomainError::ZeroDenominator);
        }
        let numer = scores.iter().map(|s| s.value() as u64).sum();
        Ok(Self { numer, denom: scores.len() as u64, basis: ScoreBasis::MeanOverReferences })
    }

    pub fn numer(&self) -> u64 {
        self.numer
    }

    pub fn denom(&self) -> u64 {
        self.denom
    }

    pub fn basis(&self) -> ScoreBasis {
        self.basis
    }

    pub fn value(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

impl PartialEq for TotalScore {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for TotalScore {}

impl PartialOrd for TotalScore {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TotalScore {
    fn cmp(&self, other: &Self) -> Ordering {
        // Cross-multiplication keeps the comparison exact.
        let lhs = self.numer as u128 * other.denom as u128;
        let rhs = other.numer as u128 * self.denom as u128;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for TotalScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom == 1 {
            write!(f, "{}", self.numer)
        } else {
            write!(f, "{:.3}", self.value())
        }
    }
}

/// Parsed engineer output: commentary plus the proposed prompt, with the raw
/// completion retained so conversations can be replayed verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineerReply {
    pub improvement: String,
    pub prompt: Prompt,
    pub raw: String,
}

/// Raw judge completion plus the rating parsed out of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub raw: String,
    pub rating: Score,
}

/// One successful refinement iteration: the prompt tried, the image it made,
/// which reference it was judged against and what the judge said.
#[derive(Debug, Clone)]
pub struct CandidateRecord {
    pub stream_id: u32,
    pub iteration: u32,
    pub prompt: Prompt,
    pub generated: ImageHandle,
    pub reference_used: ImageHandle,
    pub in_iteration_score: Score,
    pub attempts_used: u32,
}

impl CandidateRecord {
    /// Stable identity used by ordering rules: streams then iterations.
    pub fn identity(&self) -> (u32, u32) {
        (self.stream_id, self.iteration)
    }
}
