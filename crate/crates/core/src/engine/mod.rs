//! The refinement engine.
//!
//! Runs N independent streams for K iterations each, then re-evaluates the
//! shortlisted candidates and selects the final prompt. Every observable step
//! is pushed through an [`EventSink`], and a run can be resumed from whatever
//! state a sink captured.

pub mod retry;
mod run;
mod state;

pub use retry::{with_retries, RetryExhausted};
pub use run::{run, RunResult};
pub use state::{push_bounded, Exchange, Feedback, StreamState};

use std::collections::BTreeMap;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::AssetError;
use crate::domain::{CandidateRecord, EngineerReply, ImageHandle, TotalScore};
use crate::store::events::{EventBody, PhaseKind};
use crate::tasks::{ReevalPolicy, TaskKind};

/// What to do when an iteration exhausts its retries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Record the failure and move on; the stream keeps its state.
    Skip,
    /// Stop the whole run.
    Abort,
}

/// Validated run parameters. Construct via [`RunConfig::for_task`] and adjust
/// fields, or deserialize and call [`RunConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Parallel conversation streams (N).
    pub streams: u32,
    /// Refinement iterations per stream (K).
    pub iterations: u32,
    /// Shortlist size for re-evaluation (C).
    pub top_c: u32,
    pub reeval: ReevalPolicy,
    /// Attempts allowed per backend call before the phase counts as failed.
    pub retry_limit: u32,
    pub max_engineer_tokens: u32,
    /// Hard cap on prompt length in tokens; `None` disables clipping.
    pub clip_limit: Option<usize>,
    /// Exchanges of conversation kept visible to the engineer (H).
    pub history_window: usize,
    pub seed: u64,
    /// Which generation prefix to use for personalization tasks.
    pub prefix_index: usize,
    pub on_iteration_failure: FailurePolicy,
    /// When true, streams run sequentially; the event order is identical
    /// either way, so this mainly aids debugging.
    pub deterministic: bool,
}

impl RunConfig {
    /// The task's published defaults with the given seed.
    pub fn for_task(task: TaskKind, seed: u64) -> Self {
        RunConfig {
            task,
            streams: task.default_streams(),
            iterations: task.default_iterations(),
            top_c: task.default_top_c(),
            reeval: task.default_reeval(),
            retry_limit: 5,
            max_engineer_tokens: crate::backends::ENGINEER_MAX_TOKENS_DEFAULT,
            clip_limit: Some(77),
            history_window: 3,
            seed,
            prefix_index: 0,
            on_iteration_failure: FailurePolicy::Skip,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        fn ensure(ok: bool, field: &str, message: &str) -> Result<(), EngineError> {
            if ok {
                Ok(())
            } else {
                Err(EngineError::Validation {
                    field: field.to_string(),
                    message: message.to_string(),
                })
            }
        }
        ensure(self.streams >= 1, "streams", "at least one stream is required")?;
        ensure(self.iterations >= 1, "iterations", "at least one iteration is required")?;
        ensure(self.top_c >= 1, "top_c", "the shortlist must hold at least one candidate")?;
        ensure(self.retry_limit >= 1, "retry_limit", "at least one attempt is required")?;
        ensure(
            self.max_engineer_tokens >= 1,
            "max_engineer_tokens",
            "the engineer needs a positive completion budget",
        )?;
        ensure(
            self.reeval.repetitions >= 1,
            "reeval.repetitions",
            "re-evaluation needs at least one repetition",
        )?;
        if let Some(limit) = self.clip_limit {
            ensure(limit >= 1, "clip_limit", "a clip limit of zero would empty every prompt")?;
        }
        Ok(())
    }

    /// Total refinement budget: one generator call per iteration.
    pub fn budget(&self) -> u64 {
        self.streams as u64 * self.iterations as u64
    }
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("ledger write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("event serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("ledger sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("stored object {digest} failed verification")]
    CorruptObject { digest: String },
}

/// Receives every event and image a run produces. Implementations decide
/// persistence; the engine only promises emission order.
pub trait EventSink {
    fn emit(&mut self, body: &EventBody) -> Result<(), SinkError>;

    /// Stores an image payload and returns its content address.
    fn put_image(&mut self, image: &ImageHandle) -> Result<String, SinkError>;
}

/// Discards everything. Useful when only the returned result matters.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _body: &EventBody) -> Result<(), SinkError> {
        Ok(())
    }

    fn put_image(&mut self, image: &ImageHandle) -> Result<String, SinkError> {
        Ok(image.digest())
    }
}

/// Collects events and images in memory. Each parallel stream writes into its
/// own buffer, which the engine then flushes in stream order so the resulting
/// ledger is identical to a sequential run's.
#[derive(Default)]
pub struct BufferSink {
    pub events: Vec<EventBody>,
    images: Vec<(String, ImageHandle)>,
}

impl BufferSink {
    pub fn images(&self) -> impl Iterator<Item = &ImageHandle> {
        self.images.iter().map(|(_, image)| image)
    }

    /// Forwards all buffered images and then all buffered events.
    pub fn flush_into(&mut self, sink: &mut dyn EventSink) -> Result<(), SinkError> {
        for (_, image) in self.images.drain(..) {
            sink.put_image(&image)?;
        }
        for event in self.events.drain(..) {
            sink.emit(&event)?;
        }
        Ok(())
    }
}

impl EventSink for BufferSink {
    fn emit(&mut self, body: &EventBody) -> Result<(), SinkError> {
        self.events.push(body.clone());
        Ok(())
    }

    fn put_image(&mut self, image: &ImageHandle) -> Result<String, SinkError> {
        let digest = image.digest();
        if !self.images.iter().any(|(d, _)| *d == digest) {
            self.images.push((digest.clone(), image.clone()));
        }
        Ok(digest)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {field}: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error("every refinement iteration failed; there is no candidate to select")]
    AllIterationsFailed,
    #[error("stream {stream_id} iteration {iteration} failed in the {phase} phase: {error}")]
    Aborted {
        stream_id: u32,
        iteration: u32,
        phase: PhaseKind,
        error: String,
    },
    #[error(transparent)]
    Storage(#[from] SinkError),
}

/// An iteration that exhausted its retries under the skip policy.
#[derive(Debug, Clone)]
pub struct FailedIteration {
    pub stream_id: u32,
    pub iteration: u32,
    pub phase: PhaseKind,
    pub error: String,
}

/// An iteration that was started but not completed when the run stopped.
/// Recovered phase outputs carry the attempt count they were obtained with.
#[derive(Debug, Clone)]
pub struct PartialIteration {
    pub stream_id: u32,
    pub iteration: u32,
    pub reference_index: u32,
    pub reply: Option<(EngineerReply, u32)>,
    pub generated: Option<(ImageHandle, u32)>,
}

/// Everything a resumed run needs to continue exactly where the ledger ends.
/// `Default` is a fresh run.
#[derive(Debug, Default)]
pub struct ResumeState {
    /// Completed iterations, any order.
    pub records: Vec<CandidateRecord>,
    /// Skipped iterations, any order.
    pub failed: Vec<FailedIteration>,
    /// Final known history window per stream.
    pub histories: BTreeMap<u32, VecDeque<Exchange>>,
    /// Pending feedback per stream.
    pub pending: BTreeMap<u32, Feedback>,
    /// Iterations started per stream, completed or not.
    pub attempted: BTreeMap<u32, u32>,
    /// At most one mid-flight iteration, the last one started.
    pub partial: Option<PartialIteration>,
    /// Re-evaluation totals already on record, by candidate identity.
    pub reeval_done: BTreeMap<(u32, u32), TotalScore>,
    /// True when the final selection was already emitted.
    pub finalized: bool,
}

impl ResumeState {
    pub fn is_fresh(&self) -> bool {
        self.records.is_empty()
            && self.failed.is_empty()
            && self.attempted.is_empty()
            && self.partial.is_none()
            && self.reeval_done.is_empty()
            && !self.finalized
    }
}
