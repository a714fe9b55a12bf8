//! Run summaries built from the event ledger.
//!
//! A report needs only the ledger lines, not the image payloads, so it works
//! on a ledger copied away from its run directory. The builder is infallible
//! over parsed events: unexpected shapes produce empty sections, not errors.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::domain::ScoreBasis;
use crate::store::events::{EventBody, PhaseKind};
use crate::tasks::TaskKind;

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub run_id: Option<String>,
    pub task: Option<TaskKind>,
    /// One row per finished iteration, in ledger order.
    pub rows: Vec<IterationRow>,
    pub failures: FailureCounts,
    pub reevaluations: Vec<ReevalRow>,
    pub final_selection: Option<FinalRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRow {
    pub stream_id: u32,
    pub iteration: u32,
    pub reference_index: u32,
    pub prompt_tokens: Option<u64>,
    /// In-iteration judge score; absent when the iteration failed.
    pub score: Option<u64>,
    /// Highest score over this row and all earlier rows; nondecreasing.
    pub best_so_far: Option<u64>,
    pub attempts: u32,
    pub failed_phase: Option<PhaseKind>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FailureCounts {
    pub iterations_failed: u64,
    pub engineer: u64,
    pub generator: u64,
    pub judge: u64,
    /// Calls that needed more than one attempt but eventually succeeded.
    pub retried_calls: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReevalRow {
    pub stream_id: u32,
    pub iteration: u32,
    pub prompt_text: String,
    pub samples: usize,
    pub numer: u64,
    pub denom: u64,
    pub basis: ScoreBasis,
    pub partial: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalRow {
    pub stream_id: u32,
    pub iteration: u32,
    pub prompt_text: String,
    pub prompt_tokens: u64,
    pub numer: u64,
    pub denom: u64,
    pub basis: ScoreBasis,
}

#[derive(Default)]
struct OpenRow {
    reference_index: u32,
    prompt_tokens: Option<u64>,
    attempts: u32,
}

/// Folds a verified event stream into a report.
pub fn build_report(events: &[(u64, EventBody)]) -> RunReport {
    let mut report = RunReport {
        run_id: None,
        task: None,
        rows: Vec::new(),
        failures: FailureCounts::default(),
        reevaluations: Vec::new(),
        final_selection: None,
    };
    let mut open: BTreeMap<u32, OpenRow> = BTreeMap::new();
    let mut best: Option<u64> = None;

    for (_, event) in events {
        match event {
            EventBody::RunStarted(body) => {
                if report.run_id.is_none() {
                    report.run_id = Some(body.manifest.run_id.clone());
                    report.task = Some(body.manifest.config.task);
                }
            }
            EventBody::IterationStarted(body) => {
                open.insert(
                    body.stream_id,
                    OpenRow {
                        reference_index: body.reference_index,
                        prompt_tokens: None,
                        attempts: 0,
                    },
                );
            }
            EventBody::EngineerReply(body) => {
                if let Some(row) = open.get_mut(&body.stream_id) {
                    row.prompt_tokens = Some(body.prompt_tokens);
                    row.attempts = row.attempts.max(body.attempts);
                    if body.attempts > 1 {
                        report.failures.retried_calls += 1;
                    }
                }
            }
            EventBody::ImageGenerated(body) => {
                if let Some(row) = open.get_mut(&body.stream_id) {
                    row.attempts = row.attempts.max(body.attempts);
                    if body.attempts > 1 {
                        report.failures.retried_calls += 1;
                    }
                }
            }
            EventBody::Judged(body) => {
                let row = open.remove(&body.stream_id).unwrap_or_default();
                if body.attempts > 1 {
                    report.failures.retried_calls += 1;
                }
                best = Some(best.map_or(body.score, |b| b.max(body.score)));
                report.rows.push(IterationRow {
                    stream_id: body.stream_id,
                    iteration: body.iteration,
                    reference_index: row.reference_index,
                    prompt_tokens: row.prompt_tokens,
                    score: Some(body.score),
                    best_so_far: best,
                    attempts: row.attempts.max(body.attempts),
                    failed_phase: None,
                });
            }
            EventBody::IterationFailed(body) => {
                let row = open.remove(&body.stream_id).unwrap_or_default();
                report.failures.iterations_failed += 1;
                match body.phase {
                    PhaseKind::Engineer => report.failures.engineer += 1,
                    PhaseKind::Generator => report.failures.generator += 1,
                    PhaseKind::Judge => report.failures.judge += 1,
                }
                report.rows.push(IterationRow {
                    stream_id: body.stream_id,
                    iteration: body.iteration,
                    reference_index: row.reference_index,
                    prompt_tokens: row.prompt_tokens,
                    score: None,
                    best_so_far: best,
                    attempts: row.attempts.max(body.attempts),
                    failed_phase: Some(body.phase),
                });
            }
            EventBody::Reeval(body) => {
                report.reevaluations.push(ReevalRow {
                    stream_id: body.stream_id,
                    iteration: body.iteration,
                    prompt_text: body.prompt_text.clone(),
                    samples: body.samples.len(),
                    numer: body.numer,
                    denom: body.denom,
                    basis: body.basis,
                    partial: body.partial,
                });
            }
            EventBody::FinalSelected(body) => {
                report.final_selection = Some(FinalRow {
                    stream_id: body.stream_id,
                    iteration: body.iteration,
                    prompt_text: body.prompt_text.clone(),
                    prompt_tokens: body.prompt_tokens,
                    numer: body.numer,
                    denom: body.denom,
                    basis: body.basis,
                });
            }
        }
    }

    report
}

fn fmt_total(f: &mut fmt::Formatter<'_>, numer: u64, denom: u64, basis: ScoreBasis) -> fmt::Result {
    let label = match basis {
        ScoreBasis::SumTally => "sum",
        ScoreBasis::MeanOverReferences => "mean",
    };
    if denom == 1 {
        write!(f, "{numer} ({label})")
    } else {
        write!(f, "{numer}/{denom} ({label})")
    }
}

fn fmt_opt(value: Option<u64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let run_id = self.run_id.as_deref().unwrap_or("(unknown)");
        write!(f, "run {run_id}")?;
        if let Some(task) = self.task {
            write!(f, "  task {task}")?;
        }
        writeln!(f)?;
        writeln!(f)?;

        writeln!(
            f,
            "{:>6}  {:>4}  {:>3}  {:>6}  {:>5}  {:>4}  {:>8}  outcome",
            "stream", "iter", "ref", "tokens", "score", "best", "attempts"
        )?;
        for row in &self.rows {
            let outcome = match row.failed_phase {
                None => "scored".to_string(),
                Some(phase) => format!("failed: {phase}"),
            };
            writeln!(
                f,
                "{:>6}  {:>4}  {:>3}  {:>6}  {:>5}  {:>4}  {:>8}  {}",
                row.stream_id,
                row.iteration,
                row.reference_index,
                fmt_opt(row.prompt_tokens),
                fmt_opt(row.score),
                fmt_opt(row.best_so_far),
                row.attempts,
                outcome
            )?;
        }

        writeln!(f)?;
        writeln!(
            f,
            "iterations {}  failed {}  retried calls {}",
            self.rows.len(),
            self.failures.iterations_failed,
            self.failures.retried_calls
        )?;

        if !self.reevaluations.is_empty() {
            writeln!(f)?;
            writeln!(f, "re-evaluations")?;
            for row in &self.reevaluations {
                write!(f, "{:>6}  {:>4}  ", row.stream_id, row.iteration)?;
                fmt_total(f, row.numer, row.denom, row.basis)?;
                if row.partial {
                    write!(f, "  [partial]")?;
                }
                writeln!(f, "  {}", row.prompt_text)?;
            }
        }

        if let Some(final_row) = &self.final_selection {
            writeln!(f)?;
            write!(
                f,
                "final: stream {} iteration {} total ",
                final_row.stream_id, final_row.iteration
            )?;
            fmt_total(f, final_row.numer, final_row.denom, final_row.basis)?;
            writeln!(f)?;
            writeln!(f, "prompt: {}", final_row.prompt_text)?;
        }

        Ok(())
    }
}
