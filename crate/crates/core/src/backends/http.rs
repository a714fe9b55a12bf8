//! Chat-completions and image-generation adapters over HTTP.
//!
//! Request bodies follow the widely deployed chat-completions shape; the
//! exact serialization is covered by golden fixtures in the wire module
//! tests. Adapters are stateless request builders over a shared connection
//! pool, plus an optional per-endpoint minimum request interval.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, CallContext, ChatBackend, ImageGenerator};
use crate::domain::{ImageHandle, MediaType, Provenance};

use super::wire::ChatMessage;

/// Connection settings for one chat endpoint.
#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Minimum spacing between requests to this endpoint, if any.
    pub min_request_interval: Option<Duration>,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpEndpoint {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            min_request_interval: None,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

fn pace(last: &Mutex<Option<Instant>>, interval: Option<Duration>) {
    let Some(interval) = interval else { return };
    let mut guard = last.lock().expect("pacing lock poisoned");
    if let Some(prev) = *guard {
        let elapsed = prev.elapsed();
        if elapsed < interval {
            std::thread::sleep(interval - elapsed);
        }
    }
    *guard = Some(Instant::now());
}

fn classify_http_error(status: u16, body: &str) -> BackendError {
    let lowered = body.to_ascii_lowercase();
    if lowered.contains("content_policy") || lowered.contains("safety") {
        BackendError::SafetyRejected(format!("http {status}: {body}"))
    } else {
        BackendError::Transport(format!("http {status}: {body}"))
    }
}

/// Chat-completions client used for both the engineer and the judge.
pub struct HttpChatBackend {
    endpoint: HttpEndpoint,
    client: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl HttpChatBackend {
    pub fn new(endpoint: HttpEndpoint) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpChatBackend { endpoint, client, last_request: Mutex::new(None) })
    }

    fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        body: &B,
    ) -> Result<R, BackendError> {
        pace(&self.last_request, self.endpoint.min_request_interval);
        let mut request = self.client.post(&self.endpoint.url).json(body);
        if let Some(key) = &self.endpoint.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(classify_http_error(status.as_u16(), &body));
        }
        response
            .json::<R>()
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(
        &self,
        _ctx: &CallContext,
        messages: &[ChatMessage],
        max_tokens: u32,
    ) -> Result<String, BackendError> {
        let body = ChatRequest { model: &self.endpoint.model, messages, max_tokens };
        let response: ChatResponse = self.post_json(&body)?;
        let content = response
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or(BackendError::EmptyCompletion)?;
        if content.is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(content)
    }
}

#[derive(Serialize)]
struct ImageRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    response_format: &'a str,
}

#[derive(Deserialize)]
struct ImageResponse {
    data: Vec<ImageDatum>,
}

#[derive(Deserialize)]
struct ImageDatum {
    b64_json: String,
}

/// Image-generation client.
pub struct HttpImageBackend {
    endpoint: HttpEndpoint,
    media_type: MediaType,
    client: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl HttpImageBackend {
    pub fn new(endpoint: HttpEndpoint, media_type: MediaType) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpImageBackend { endpoint, media_type, client, last_request: Mutex::new(None) })
    }
}

impl ImageGenerator for HttpImageBackend {
    fn generate(&self, ctx: &CallContext, request_text: &str) -> Result<ImageHandle, BackendError> {
        pace(&self.last_request, self.endpoint.min_request_interval);
        let body = ImageRequest {
            model: &self.endpoint.model,
            prompt: request_text,
            response_format: "b64_json",
        };
        let mut request = self.client.post(&self.endpoint.url).json(&body);
        if let Some(key) = &self.endpoint.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(classify_http_error(status.as_u16(), &body));
        }
        let parsed: ImageResponse = response
            .json()
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let datum = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("empty image data".into()))?;
        let bytes = BASE64
            .decode(datum.b64_json.as_bytes())
            .map_err(|e| BackendError::MalformedResponse(format!("invalid image base64: {e}")))?;
        let origin = format!("http-gen-{}-{}", ctx.stream_id, ctx.iteration);
        Ok(ImageHandle::new(bytes, self.media_type, Provenance::Generated, origin)?)
    }
}
