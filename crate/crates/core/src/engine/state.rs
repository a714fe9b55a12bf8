//! Per-stream conversation state.
//!
//! Each stream is an independent conversation with the engineer. Its state is
//! the bounded history window, the feedback owed from the previous iteration
//! and the stream's reference-sampling generator. All of it can be rebuilt
//! from the event ledger, which is what makes resumption exact.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::wire::ChatMessage;
use crate::domain::{ImageHandle, Score};
use crate::seeds::{mix_seed, DOMAIN_STREAM_RNG};

/// One completed engineer exchange: the user turn we sent and the raw
/// completion that answered it. The raw text goes back into later requests
/// verbatim, so the engineer sees its own words unedited.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub user_turn: ChatMessage,
    pub assistant_raw: String,
}

/// Outcome of the previous iteration, owed to the engineer as feedback at the
/// start of the next one. `None` means no completed iteration yet, so the
/// next turn is a kickoff.
#[derive(Debug, Clone)]
pub struct Feedback {
    pub generated: ImageHandle,
    pub score: Score,
}

#[derive(Debug)]
pub struct StreamState {
    pub stream_id: u32,
    pub history: VecDeque<Exchange>,
    pub pending: Option<Feedback>,
    rng: ChaCha8Rng,
}

impl StreamState {
    /// Fresh state with a sampling generator derived from the run seed and
    /// the stream id, independent of every other stream.
    pub fn new(stream_id: u32, run_seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(
            run_seed,
            &[DOMAIN_STREAM_RNG, stream_id as u64],
        ));
        StreamState {
            stream_id,
            history: VecDeque::new(),
            pending: None,
            rng,
        }
    }

    /// Draws the reference index for the iteration that is about to start.
    pub fn sample_reference(&mut self, reference_count: usize) -> u32 {
        self.rng.gen_range(0..reference_count) as u32
    }

    /// Discards `count` draws, aligning the generator with a resumed run in
    /// which that many iterations had already started.
    pub fn skip_samples(&mut self, count: u32, reference_count: usize) {
        for _ in 0..count {
            let _ = self.rng.gen_range(0..reference_count);
        }
    }

    /// Appends an exchange, evicting the oldest beyond `window`.
    pub fn push_exchange(&mut self, exchange: Exchange, window: usize) {
        push_bounded(&mut self.history, exchange, window);
    }

    /// History in the shape the request builder wants: oldest first.
    pub fn history_pairs(&self) -> impl Iterator<Item = (&ChatMessage, &str)> {
        self.history
            .iter()
            .map(|e| (&e.user_turn, e.assistant_raw.as_str()))
    }
}

/// Appends to a history window, evicting the oldest beyond `window`. Shared
/// with ledger replay so both sides age history identically.
pub fn push_bounded(history: &mut VecDeque<Exchange>, exchange: Exchange, window: usize) {
    history.push_back(exchange);
    while history.len() > window {
        history.pop_front();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::wire::Role;

    fn exchange(tag: &str) -> Exchange {
        Exchange {
            user_turn: ChatMessage {
                role: Role::User,
                content: vec![crate::backends::wire::ContentPart::Text { text: tag.into() }],
            },
            assistant_raw: format!("reply to {tag}"),
        }
    }

    #[test]
    fn window_keeps_only_the_newest_exchanges() {
        let mut state = StreamState::new(0, 42);
        for i in 0..5 {
            state.push_exchange(exchange(&format!("turn {i}")), 3);
        }
        assert_eq!(state.history.len(), 3);
        let firsts: Vec<String> = state
            .history_pairs()
            .map(|(user, _)| user.text())
            .collect();
        assert_eq!(firsts, vec!["turn 2", "turn 3", "turn 4"]);
    }

    #[test]
    fn zero_window_retains_nothing() {
        let mut state = StreamState::new(0, 42);
        state.push_exchange(exchange("a"), 0);
        assert!(state.history.is_empty());
    }

    #[test]
    fn streams_sample_independently_and_reproducibly() {
        let mut a1 = StreamState::new(0, 7);
        let mut a2 = StreamState::new(0, 7);
        let mut b = StreamState::new(1, 7);
        let draws_a1: Vec<u32> = (0..8).map(|_| a1.sample_reference(5)).collect();
        let draws_a2: Vec<u32> = (0..8).map(|_| a2.sample_reference(5)).collect();
        let draws_b: Vec<u32> = (0..8).map(|_| b.sample_reference(5)).collect();
        assert_eq!(draws_a1, draws_a2);
        assert_ne!(draws_a1, draws_b);
    }

    #[test]
    fn skipping_draws_matches_consuming_them() {
        let mut consumed = StreamState::new(3, 99);
        for _ in 0..4 {
            consumed.sample_reference(7);
        }
        let mut skipped = StreamState::new(3, 99);
        skipped.skip_samples(4, 7);
        assert_eq!(consumed.sample_reference(7), skipped.sample_reference(7));
    }

    #[test]
    fn single_reference_still_consumes_a_draw() {
        // With one reference every draw returns 0, but the generator must
        // still advance so resumption fast-forwards by the same amount
        // regardless of the reference count.
        let mut plain = StreamState::new(0, 5);
        let first = plain.sample_reference(1);
        assert_eq!(first, 0);
        let after_one_draw = plain.sample_reference(9);

        let mut skipped = StreamState::new(0, 5);
        skipped.skip_samples(1, 1);
        assert_eq!(skipped.sample_reference(9), after_one_draw);
    }
}
