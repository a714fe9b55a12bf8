//! A deterministic miniature world for exercising the engine end to end.
//!
//! An "image" here is a set of attribute strings with a canonical byte
//! encoding, a "generator" maps prompt tokens to attribute unions through a
//! codebook, and a "judge" scores the Jaccard overlap of two attribute sets
//! on the usual 0..=10 scale. Everything is a pure function of its inputs
//! plus an explicit seed, which makes exact assertions and independent
//! oracles possible.

mod fault;
mod oracle;
mod policy;

pub use fault::{FaultPlan, FlakyChat, FlakyGenerator};
pub use oracle::{oracle_best_prompt, OraclePick};
pub use policy::{ScriptedPolicy, SimEngineer, SimGenerator, SimJudge};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::domain::{ImageHandle, MediaType, Provenance, Score};

/// Canonical payload of an image with no attributes. A real byte payload is
/// required, so the empty set gets a reserved marker.
pub const BLANK_TOKEN: &str = "{blank}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("codebook line {line} is not of the form 'token: attr, attr'")]
    MalformedLine { line: usize },
    #[error("codebook defines token '{0}' twice")]
    DuplicateToken(String),
    #[error("codebook token '{0}' lists no attributes")]
    EmptyAttributeList(String),
    #[error("'{0}' is reserved and cannot be used in a codebook")]
    ReservedWord(String),
    #[error("codebook token '{0}' contains whitespace and could never match")]
    TokenWithWhitespace(String),
    #[error("image payload is not an attribute image")]
    NotAnAttributeImage,
    #[error("could not read codebook: {0}")]
    Io(String),
}

/// An image in the simulated world: a set of attribute strings. The byte
/// encoding is the attributes sorted and newline-joined, so equal sets have
/// equal payloads and equal digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeImage {
    attrs: BTreeSet<String>,
}

impl AttributeImage {
    /// Builds an image from attribute strings. Empty strings are ignored.
    /// Attributes must not contain newlines (they would corrupt the
    /// canonical encoding) or equal the blank marker.
    pub fn new(attrs: impl IntoIterator<Item = String>) -> Self {
        let attrs: BTreeSet<String> = attrs.into_iter().filter(|a| !a.is_empty()).collect();
        for attr in &attrs {
            assert!(!attr.contains('\n'), "attribute {attr:?} contains a newline");
            assert!(attr != BLANK_TOKEN, "attribute must not equal the blank marker");
        }
        AttributeImage { attrs }
    }

    pub fn empty() -> Self {
        AttributeImage { attrs: BTreeSet::new() }
    }

    pub fn attrs(&self) -> &BTreeSet<String> {
        &self.attrs
    }

    /// Canonical byte payload: sorted attributes joined by newlines, or the
    /// blank marker for the empty set.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        if self.attrs.is_empty() {
            return BLANK_TOKEN.as_bytes().to_vec();
        }
        let joined: Vec<&str> = self.attrs.iter().map(String::as_str).collect();
        joined.join("\n").into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SimError> {
        let text = std::str::from_utf8(bytes).map_err(|_| SimError::NotAnAttributeImage)?;
        if text == BLANK_TOKEN {
            return Ok(AttributeImage::empty());
        }
        let attrs: BTreeSet<String> = text
            .split('\n')
            .filter(|line| !line.is_empty())
            .map(str::to_string)
            .collect();
        Ok(AttributeImage { attrs })
    }

    pub fn from_handle(handle: &ImageHandle) -> Result<Self, SimError> {
        Self::from_bytes(handle.bytes())
    }

    /// Wraps the canonical payload in an image handle. The media type is a
    /// stand-in; nothing in the simulated world decodes pixels.
    pub fn to_handle(&self, provenance: Provenance, origin_id: impl Into<String>) -> ImageHandle {
        ImageHandle::new(self.canonical_bytes(), MediaType::Png, provenance, origin_id)
            .expect("canonical payloads are small and non-empty")
    }
}

/// Jaccard similarity of two attribute sets, mapped to 0..=10 with
/// round-half-up. Two blank images count as identical.
pub fn sim_judge(generated: &AttributeImage, reference: &AttributeImage) -> Score {
    let i = generated.attrs.intersection(&reference.attrs).count() as u64;
    let u = generated.attrs.union(&reference.attrs).count() as u64;
    if u == 0 {
        return Score::MAX;
    }
    Score::new((20 * i + u) / (2 * u)).expect("rounding keeps the value in range")
}

/// Maps prompt tokens to attribute sets.
///
/// The text format is one entry per line, `token: attr, attr, ...`, with `#`
/// starting a comment and blank lines ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl Codebook {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut entries: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (index, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let number = index + 1;
            let (token, attr_list) = line
                .split_once(':')
                .ok_or(SimError::MalformedLine { line: number })?;
            let token = token.trim();
            if token.is_empty() {
                return Err(SimError::MalformedLine { line: number });
            }
            if token == BLANK_TOKEN {
                return Err(SimError::ReservedWord(token.to_string()));
            }
            if token.chars().any(char::is_whitespace) {
                return Err(SimError::TokenWithWhitespace(token.to_string()));
            }
            let attrs: BTreeSet<String> = attr_list
                .split(',')
                .map(str::trim)
                .filter(|a| !a.is_empty())
                .map(str::to_string)
                .collect();
            if attrs.is_empty() {
                return Err(SimError::EmptyAttributeList(token.to_string()));
            }
            if attrs.contains(BLANK_TOKEN) {
                return Err(SimError::ReservedWord(BLANK_TOKEN.to_string()));
            }
            if entries.insert(token.to_string(), attrs).is_some() {
                return Err(SimError::DuplicateToken(token.to_string()));
            }
        }
        Ok(Codebook { entries })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn attributes_for(&self, token: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// All attribute values across the codebook, sorted and deduplicated.
    pub fn all_attributes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.values().flatten().collect();
        set.into_iter().cloned().collect()
    }

    /// The noiseless rendering of a prompt: the union of the attribute sets
    /// of every known whitespace-separated token. Unknown tokens contribute
    /// nothing, so generation prefixes are harmless.
    pub fn render(&self, prompt_text: &str) -> AttributeImage {
        let mut attrs: BTreeSet<String> = BTreeSet::new();
        for token in prompt_text.split_whitespace() {
            if let Some(set) = self.entries.get(token) {
                attrs.extend(set.iter().cloned());
            }
        }
        AttributeImage { attrs }
    }
}
