//! Fault injection around any backend.
//!
//! A fault plan maps call sites (identified by their seed components, which
//! are unique per stream, iteration and purpose) to a number of transport
//! failures to inject before letting calls through. Wrapping a working
//! backend in a plan exercises the retry and skip/abort paths exactly.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::backends::wire::ChatMessage;
use crate::backends::{BackendError, CallContext, ChatBackend, ImageGenerator};
use crate::domain::ImageHandle;

/// Injected failures per call site.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    counts: BTreeMap<[u64; 4], u32>,
}

impl FaultPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail the first `times` calls matching `ctx`, then succeed. Pass
    /// `u32::MAX` to make the call site fail persistently.
    pub fn fail(mut self, ctx: &CallContext, times: u32) -> Self {
        self.counts.insert(ctx.seed_components(), times);
        self
    }

    /// Consumes one planned failure if any is left for this call site.
    fn take_failure(&mut self, ctx: &CallContext) -> bool {
        match self.counts.get_mut(&ctx.seed_components()) {
            Some(0) | None => false,
            Some(remaining) => {
                *remaining = remaining.saturating_sub(1);
                true
            }
        }
    }
}

fn injected() -> BackendError {
    BackendError::Transport("injected fault".to_string())
}

/// A chat backend that fails according to a plan, then delegates.
pub struct FlakyChat<B> {
    inner: B,
    plan: Mutex<FaultPlan>,
}

impl<B> FlakyChat<B> {
    pub fn new(inner: B, plan: FaultPlan) -> Self {
        FlakyChat { inner, plan: Mutex::new(plan) }
    }
}

impl<B: ChatBackend> ChatBackend for FlakyChat<B> {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        max_tokens: u32,
    ) -> Result<String, BackendError> {
        if self.plan.lock().expect("fault plan lock").take_failure(ctx) {
            return Err(injected());
        }
        self.inner.complete(ctx, messages, max_tokens)
    }
}

/// An image generator that fails according to a plan, then delegates.
pub struct FlakyGenerator<G> {
    inner: G,
    plan: Mutex<FaultPlan>,
}

impl<G> FlakyGenerator<G> {
    pub fn new(inner: G, plan: FaultPlan) -> Self {
        FlakyGenerator { inner, plan: Mutex::new(plan) }
    }
}

impl<G: ImageGenerator> ImageGenerator for FlakyGenerator<G> {
    fn generate(&self, ctx: &CallContext, request_text: &str) -> Result<ImageHandle, BackendError> {
        if self.plan.lock().expect("fault plan lock").take_failure(ctx) {
            return Err(injected());
        }
        self.inner.generate(ctx, request_text)
    }
}
