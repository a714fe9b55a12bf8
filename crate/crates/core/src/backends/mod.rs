//! Black-box collaborator interfaces: the prompt engineer, the image
//! generator and the similarity judge, plus the wire format and the shipped
//! system-prompt assets.
//!
//! The engine only ever talks to these traits; HTTP adapters and the
//! deterministic simulated world are interchangeable behind them.

pub mod assets;
pub mod http;
pub mod wire;

use std::sync::Arc;

use thiserror::Error;

use crate::domain::ImageHandle;

pub use assets::{load_prompt_assets, AssetError, SystemPromptAsset};
pub use wire::{
    build_engineer_messages, build_judge_messages, compose_feedback_turn, compose_kickoff_turn,
    decode_data_url, distill_instruction, distill_prompt, encode_image_part, engineer_propose,
    feedback_text, generate_image, judge_similarity, CallError, ChatMessage, ContentPart,
    ImageUrl, Role, KICKOFF_TEXT,
};

/// Default completion budget for engineer replies.
pub const ENGINEER_MAX_TOKENS_DEFAULT: u32 = 500;

/// Why a backend is being called. Carried on every call so deterministic
/// backends can derive per-call seeds and so adapters can tag requests;
/// network adapters are free to ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallPurpose {
    /// In-loop refinement step.
    Refine,
    /// Fresh generation/judgment during candidate re-evaluation.
    Reevaluate { reference_index: u32, repetition: u32 },
    /// Prompt distillation request.
    Distill,
    /// Scoring of a composed evaluation prompt.
    Eval { template_index: u32 },
}

/// Identity of the call site: which stream and iteration is asking, and why.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallContext {
    pub stream_id: u32,
    pub iteration: u32,
    pub purpose: CallPurpose,
}

impl CallContext {
    pub fn refine(stream_id: u32, iteration: u32) -> Self {
        CallContext { stream_id, iteration, purpose: CallPurpose::Refine }
    }

    /// Stable seed components for deterministic backends: a purpose domain
    /// tag, the stream, the iteration and a purpose-specific discriminant.
    pub fn seed_components(&self) -> [u64; 4] {
        let (domain, extra) = match self.purpose {
            CallPurpose::Refine => (1, 0),
            CallPurpose::Reevaluate { reference_index, repetition } => {
                (2, ((reference_index as u64) << 32) | repetition as u64)
            }
            CallPurpose::Distill => (3, 0),
            CallPurpose::Eval { template_index } => (4, template_index as u64),
        };
        [domain, self.stream_id as u64, self.iteration as u64, extra]
    }
}

/// Errors shared by all backend adapters.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request rejected by safety system: {0}")]
    SafetyRejected(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("generated image is invalid: {0}")]
    Image(#[from] crate::domain::DomainError),
}

/// A chat-completions endpoint: multimodal messages in, completion text out.
/// Both the engineer and the judge speak this shape.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        max_tokens: u32,
    ) -> Result<String, BackendError>;
}

/// A text-to-image endpoint: request text in, one image out.
pub trait ImageGenerator: Send + Sync {
    fn generate(&self, ctx: &CallContext, request_text: &str) -> Result<ImageHandle, BackendError>;
}

/// The three collaborators a run needs. The engineer and judge may well be
/// the same endpoint configured with different system prompts.
#[derive(Clone)]
pub struct BackendBundle {
    pub engineer: Arc<dyn ChatBackend>,
    pub generator: Arc<dyn ImageGenerator>,
    pub judge: Arc<dyn ChatBackend>,
}
