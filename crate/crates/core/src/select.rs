//! Candidate ranking: the top-C cut after the refinement loop and the final
//! winner after re-evaluation.

use std::cmp::Ordering;

use thiserror::Error;

use crate::domain::{CandidateRecord, Prompt, TotalScore};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("cannot select a winner from an empty candidate set")]
    EmptyCandidateSet,
}

/// Proxy for prompt log-likelihood under a language prior: shorter prompts
/// rank higher. Exposed so tie-breaking is one observable rule.
pub fn likelihood_proxy(p: &Prompt) -> i64 {
    -(p.token_count() as i64)
}

/// Picks the `c` best records by in-iteration score.
///
/// Ordering is total: score descending, then stream id, then iteration, so the
/// cut is insensitive to input order. Returns fewer than `c` records only when
/// fewer exist.
pub fn select_top_c(records: &[CandidateRecord], c: usize) -> Vec<CandidateRecord> {
    let mut ranked: Vec<&CandidateRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        b.in_iteration_score
            .cmp(&a.in_iteration_score)
            .then_with(|| a.identity().cmp(&b.identity()))
    });
    ranked.into_iter().take(c).cloned().collect()
}

/// Orders re-evaluated candidates from best to worst: higher total score wins,
/// ties go to the higher likelihood proxy (shorter prompt), remaining ties to
/// the earlier (stream, iteration) identity.
fn final_rank(a: &(CandidateRecord, TotalScore), b: &(CandidateRecord, TotalScore)) -> Ordering {
    b.1.cmp(&a.1)
        .then_with(|| likelihood_proxy(&b.0.prompt).cmp(&likelihood_proxy(&a.0.prompt)))
        .then_with(|| a.0.identity().cmp(&b.0.identity()))
}

/// Returns the winning candidate after re-evaluation.
pub fn select_final(
    candidates: &[(CandidateRecord, TotalScore)],
) -> Result<&(CandidateRecord, TotalScore), SelectError> {
    candidates
        .iter()
        .min_by(|a, b| final_rank(a, b))
        .ok_or(SelectError::EmptyCandidateSet)
}
