//! Chat wire format shared by the engineer and judge backends, plus the
//! message-assembly helpers the engine calls.
//!
//! Serialization shape is frozen by golden fixtures: changing field names or
//! order here is a protocol change, not a refactor.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, CallContext, CallPurpose, ChatBackend, ImageGenerator};
use crate::domain::{
    clip_prompt, ImageHandle, JudgeVerdict, MediaType, Prompt, Score, TokenCounter,
};
use crate::parse::parse_rating;

/// Fixed text of the first-iteration user turn, before any feedback exists.
pub const KICKOFF_TEXT: &str = "This is the REFERENCE image. Craft your first prompt.";

/// Instruction template for prompt distillation; `<length>` is substituted.
const DISTILL_TEMPLATE: &str = "Here is a prompt to this image with a text-to-image model, make it more concise (less than <length> tokens) but keep all the descriptive details";

/// Feedback line shown to the engineer each iteration. The trailing space is
/// part of the frozen format.
pub fn feedback_text(score: Score) -> String {
    format!(
        "The first image is the GENERATIVE MODEL OUTPUT image and the second image is the OBJECTIVE image. SCORE: {} ",
        score.value()
    )
}

/// Distillation instruction with the target length substituted.
pub fn distill_instruction(length: usize) -> String {
    DISTILL_TEMPLATE.replace("<length>", &length.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

/// One element of a multimodal message body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenated text parts, ignoring images.
    pub fn text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::ImageUrl { .. } => None,
            })
            .collect()
    }
}

/// Encodes an image as a `data:` URL content part.
///
/// Emptiness, size and media type were already validated when the
/// [`ImageHandle`] was constructed, so this cannot fail.
pub fn encode_image_part(image: &ImageHandle) -> ContentPart {
    let url = format!(
        "data:{};base64,{}",
        image.media_type().as_str(),
        BASE64.encode(image.bytes())
    );
    ContentPart::ImageUrl {
        image_url: ImageUrl { url },
    }
}

/// Decodes a `data:` URL produced by [`encode_image_part`] back to media type
/// and payload bytes.
pub fn decode_data_url(url: &str) -> Result<(MediaType, Vec<u8>), BackendError> {
    let rest = url
        .strip_prefix("data:")
        .ok_or_else(|| BackendError::MalformedResponse("image url is not a data url".into()))?;
    let (media, b64) = rest
        .split_once(";base64,")
        .ok_or_else(|| BackendError::MalformedResponse("data url is not base64 encoded".into()))?;
    let media_type = MediaType::parse(media)
        .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let bytes = BASE64
        .decode(b64)
        .map_err(|e| BackendError::MalformedResponse(format!("invalid base64 payload: {e}")))?;
    Ok((media_type, bytes))
}

/// First-iteration user turn: kickoff text plus the reference image.
pub fn compose_kickoff_turn(reference: &ImageHandle) -> ChatMessage {
    ChatMessage {
        role: Role::User,
        content: vec![
            ContentPart::Text { text: KICKOFF_TEXT.to_string() },
            encode_image_part(reference),
        ],
    }
}

/// Feedback user turn: score line, then the generated image, then the
/// reference image, in that order.
pub fn compose_feedback_turn(
    generated: &ImageHandle,
    reference: &ImageHandle,
    score: Score,
) -> ChatMessage {
    ChatMessage {
        role: Role::User,
        content: vec![
            ContentPart::Text { text: feedback_text(score) },
            encode_image_part(generated),
            encode_image_part(reference),
        ],
    }
}

/// Full engineer request: system prompt, then each past exchange as a
/// user/assistant pair oldest first, then the current user turn.
pub fn build_engineer_messages<'a>(
    engineer_text: &str,
    history: impl IntoIterator<Item = (&'a ChatMessage, &'a str)>,
    current: ChatMessage,
) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(engineer_text)];
    for (user_turn, assistant_raw) in history {
        messages.push(user_turn.clone());
        messages.push(ChatMessage::assistant(assistant_raw));
    }
    messages.push(current);
    messages
}

/// Judge request: judge system prompt plus one user turn holding the generated
/// image first and the reference image second.
pub fn build_judge_messages(
    judge_text: &str,
    generated: &ImageHandle,
    reference: &ImageHandle,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(judge_text),
        ChatMessage {
            role: Role::User,
            content: vec![encode_image_part(generated), encode_image_part(reference)],
        },
    ]
}

/// Upper bound on judge completion length; the verdict is one short line.
pub const JUDGE_MAX_TOKENS: u32 = 128;

/// Asks the engineer for its next reply given assembled history and the
/// current turn. Returns the raw completion text.
pub fn engineer_propose<'a>(
    engineer: &dyn ChatBackend,
    ctx: &CallContext,
    engineer_text: &str,
    history: impl IntoIterator<Item = (&'a ChatMessage, &'a str)>,
    current: ChatMessage,
    max_tokens: u32,
) -> Result<String, BackendError> {
    let messages = build_engineer_messages(engineer_text, history, current);
    let raw = engineer.complete(ctx, &messages, max_tokens)?;
    if raw.trim().is_empty() {
        return Err(BackendError::EmptyCompletion);
    }
    Ok(raw)
}

/// Requests one generated image for `prefix` + `prompt`.
pub fn generate_image(
    generator: &dyn ImageGenerator,
    ctx: &CallContext,
    prefix: &str,
    prompt: &Prompt,
) -> Result<ImageHandle, BackendError> {
    let request_text = format!("{}{}", prefix, prompt.text());
    generator.generate(ctx, &request_text)
}

/// Errors from a backend call followed by completion parsing.
#[derive(Debug, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] crate::parse::ParseError),
}

/// Scores `generated` against `reference` and parses the verdict.
pub fn judge_similarity(
    judge: &dyn ChatBackend,
    ctx: &CallContext,
    judge_text: &str,
    generated: &ImageHandle,
    reference: &ImageHandle,
) -> Result<JudgeVerdict, CallError> {
    let messages = build_judge_messages(judge_text, generated, reference);
    let raw = judge.complete(ctx, &messages, JUDGE_MAX_TOKENS)?;
    let rating = parse_rating(&raw)?;
    Ok(JudgeVerdict { raw, rating })
}

/// Asks the engineer to shorten `prompt` to fewer than `length` tokens and
/// clips the reply to `length` as a hard guarantee.
pub fn distill_prompt(
    engineer: &dyn ChatBackend,
    prompt: &Prompt,
    length: usize,
    counter: &dyn TokenCounter,
) -> Result<Prompt, CallError> {
    let ctx = CallContext {
        stream_id: 0,
        iteration: 0,
        purpose: CallPurpose::Distill,
    };
    let messages = vec![ChatMessage {
        role: Role::User,
        content: vec![
            ContentPart::Text { text: distill_instruction(length) },
            ContentPart::Text { text: prompt.text().to_string() },
        ],
    }];
    let raw = engineer.complete(&ctx, &messages, crate::backends::ENGINEER_MAX_TOKENS_DEFAULT)?;
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(BackendError::EmptyCompletion.into());
    }
    let reply = Prompt::new(trimmed, counter)
        .map_err(|_| BackendError::EmptyCompletion)?;
    Ok(clip_prompt(&reply, length, counter))
}
