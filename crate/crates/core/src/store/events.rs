//! Event vocabulary of the run ledger.
//!
//! Every observable step of a run is one of these bodies, serialized as the
//! `payload` of a ledger line. Field names and order are part of the on-disk
//! format; replay and the resume path depend on them.

use serde::{Deserialize, Serialize};

use crate::domain::{MediaType, ScoreBasis};
use crate::store::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStarted,
    IterationStarted,
    EngineerReply,
    ImageGenerated,
    Judged,
    IterationFailed,
    Reeval,
    FinalSelected,
}

/// Which phase of an iteration failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Engineer,
    Generator,
    Judge,
}

impl std::fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PhaseKind::Engineer => "engineer",
            PhaseKind::Generator => "generator",
            PhaseKind::Judge => "judge",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStartedBody {
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationStartedBody {
    pub stream_id: u32,
    pub iteration: u32,
    pub reference_index: u32,
    pub reference_origin: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineerReplyBody {
    pub stream_id: u32,
    pub iteration: u32,
    /// Raw completion text; replay re-parses it to rebuild the exchange.
    pub raw: String,
    /// Clipped prompt actually sent to the generator.
    pub prompt_text: String,
    pub prompt_tokens: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageGeneratedBody {
    pub stream_id: u32,
    pub iteration: u32,
    pub request_text: String,
    /// Content address of the payload in the object store.
    pub digest: String,
    pub media_type: MediaType,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgedBody {
    pub stream_id: u32,
    pub iteration: u32,
    pub raw: String,
    pub score: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationFailedBody {
    pub stream_id: u32,
    pub iteration: u32,
    pub phase: PhaseKind,
    pub error: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReevalSampleBody {
    pub reference_index: u32,
    pub repetition: u32,
    /// Content address of the fresh generation; absent when it failed.
    pub digest: Option<String>,
    pub score: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReevalBody {
    pub stream_id: u32,
    pub iteration: u32,
    pub prompt_text: String,
    pub samples: Vec<ReevalSampleBody>,
    pub numer: u64,
    pub denom: u64,
    pub basis: ScoreBasis,
    pub partial: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalSelectedBody {
    pub stream_id: u32,
    pub iteration: u32,
    pub prompt_text: String,
    pub prompt_tokens: u64,
    pub numer: u64,
    pub denom: u64,
    pub basis: ScoreBasis,
}

/// A typed event body paired with its kind tag.
#[derive(Debug, Clone)]
pub enum EventBody {
    RunStarted(RunStartedBody),
    IterationStarted(IterationStartedBody),
    EngineerReply(EngineerReplyBody),
    ImageGenerated(ImageGeneratedBody),
    Judged(JudgedBody),
    IterationFailed(IterationFailedBody),
    Reeval(ReevalBody),
    FinalSelected(FinalSelectedBody),
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::RunStarted(_) => EventKind::RunStarted,
            EventBody::IterationStarted(_) => EventKind::IterationStarted,
            EventBody::EngineerReply(_) => EventKind::EngineerReply,
            EventBody::ImageGenerated(_) => EventKind::ImageGenerated,
            EventBody::Judged(_) => EventKind::Judged,
            EventBody::IterationFailed(_) => EventKind::IterationFailed,
            EventBody::Reeval(_) => EventKind::Reeval,
            EventBody::FinalSelected(_) => EventKind::FinalSelected,
        }
    }

    /// Serializes just the payload, the bytes the checksum covers.
    pub fn payload_json(&self) -> serde_json::Result<String> {
        match self {
            EventBody::RunStarted(b) => serde_json::to_string(b),
            EventBody::IterationStarted(b) => serde_json::to_string(b),
            EventBody::EngineerReply(b) => serde_json::to_string(b),
            EventBody::ImageGenerated(b) => serde_json::to_string(b),
            EventBody::Judged(b) => serde_json::to_string(b),
            EventBody::IterationFailed(b) => serde_json::to_string(b),
            EventBody::Reeval(b) => serde_json::to_string(b),
            EventBody::FinalSelected(b) => serde_json::to_string(b),
        }
    }

    /// Parses a payload back into its typed body.
    pub fn from_payload(kind: EventKind, payload: &str) -> serde_json::Result<Self> {
        Ok(match kind {
            EventKind::RunStarted => EventBody::RunStarted(serde_json::from_str(payload)?),
            EventKind::IterationStarted => {
                EventBody::IterationStarted(serde_json::from_str(payload)?)
            }
            EventKind::EngineerReply => EventBody::EngineerReply(serde_json::from_str(payload)?),
            EventKind::ImageGenerated => EventBody::ImageGenerated(serde_json::from_str(payload)?),
            EventKind::Judged => EventBody::Judged(serde_json::from_str(payload)?),
            EventKind::IterationFailed => {
                EventBody::IterationFailed(serde_json::from_str(payload)?)
            }
            EventKind::Reeval => EventBody::Reeval(serde_json::from_str(payload)?),
            EventKind::FinalSelected => EventBody::FinalSelected(serde_json::from_str(payload)?),
        })
    }
}
