//! Task kinds and their evaluation machinery: re-evaluation of shortlisted
//! candidates, composition of evaluation prompts from templates, and
//! generation failure accounting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    generate_image, judge_similarity, BackendBundle, CallContext, CallPurpose,
};
use crate::domain::{
    CandidateRecord, ImageHandle, Prompt, ReferenceSet, Score, TokenCounter, TotalScore,
};
use crate::engine::with_retries;

/// What the run is trying to recover from the references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Reproduce one exact image.
    #[serde(alias = "inversion")]
    DirectInversion,
    /// Capture one object across multiple views.
    #[serde(alias = "subject")]
    SubjectPersonalization,
    /// Capture a visual style across multiple examples.
    #[serde(alias = "style")]
    StylePersonalization,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TaskKind::DirectInversion => "direct_inversion",
            TaskKind::SubjectPersonalization => "subject_personalization",
            TaskKind::StylePersonalization => "style_personalization",
        };
        f.write_str(name)
    }
}

impl TaskKind {
    pub fn is_personalization(&self) -> bool {
        !matches!(self, TaskKind::DirectInversion)
    }

    /// How shortlisted candidates are re-scored after the loop.
    pub fn default_reeval(&self) -> ReevalPolicy {
        match self {
            TaskKind::DirectInversion => ReevalPolicy {
                repetitions: 2,
                per_reference: false,
                aggregate: Aggregate::SumTallyWithInIteration,
            },
            _ => ReevalPolicy {
                repetitions: 1,
                per_reference: true,
                aggregate: Aggregate::MeanOverReferences,
            },
        }
    }

    pub fn default_streams(&self) -> u32 {
        match self {
            TaskKind::DirectInversion => 6,
            _ => 10,
        }
    }

    pub fn default_iterations(&self) -> u32 {
        match self {
            TaskKind::DirectInversion => 5,
            _ => 4,
        }
    }

    pub fn default_top_c(&self) -> u32 {
        5
    }

    /// Joining text between an evaluation template and the learned prompt.
    pub fn eval_separator(&self) -> &'static str {
        match self {
            TaskKind::StylePersonalization => " in the style of ",
            _ => ", ",
        }
    }
}

/// Controls candidate re-evaluation after the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReevalPolicy {
    /// Fresh generations per judged reference.
    pub repetitions: u32,
    /// Judge against every reference (true) or only the primary one (false).
    pub per_reference: bool,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// In-iteration score plus all re-evaluation scores, summed.
    SumTallyWithInIteration,
    /// Mean of the re-evaluation scores.
    MeanOverReferences,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("template must contain exactly one {{}} slot, found {slots}")]
    MalformedTemplate { slots: usize },
    #[error("composed evaluation prompt is empty")]
    EmptyComposition,
    #[error("attempt list is empty")]
    EmptyAttemptList,
    #[error("attempt list of {got} exceeds the retry limit of {limit}")]
    TooManyAttempts { got: usize, limit: u32 },
}

/// One fresh generation plus judgment during re-evaluation. Failed phases
/// leave their outputs empty and carry the error text instead.
#[derive(Debug, Clone)]
pub struct ReevalSample {
    pub reference_index: u32,
    pub repetition: u32,
    pub image: Option<ImageHandle>,
    pub score: Option<Score>,
    pub error: Option<String>,
}

/// Outcome of re-evaluating one candidate.
#[derive(Debug, Clone)]
pub struct ReevalReport {
    pub samples: Vec<ReevalSample>,
    pub total: TotalScore,
    /// True when at least one planned judgment did not produce a score; the
    /// total is then computed from whatever scores exist, falling back to the
    /// in-iteration score alone if none do.
    pub partial: bool,
}

/// Re-scores one shortlisted candidate with fresh generations.
///
/// Reference visit order is shuffled (seeded) when several references exist;
/// scores do not depend on the order, only the event trace does. Every
/// generation and judgment retries up to `retry_limit` times; persistent
/// failures degrade the report to partial instead of aborting.
pub fn reevaluate(
    record: &CandidateRecord,
    refs: &ReferenceSet,
    bundle: &BackendBundle,
    judge_text: &str,
    prefix: &str,
    policy: &ReevalPolicy,
    retry_limit: u32,
    shuffle_seed: u64,
) -> ReevalReport {
    let reference_order: Vec<u32> = if policy.per_reference {
        let mut order: Vec<u32> = (0..refs.len() as u32).collect();
        if refs.len() > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            order.shuffle(&mut rng);
        }
        order
    } else {
        vec![0]
    };

    let mut samples = Vec::new();
    for &reference_index in &reference_order {
        for repetition in 0..policy.repetitions {
            let ctx = CallContext {
                stream_id: record.stream_id,
                iteration: record.iteration,
                purpose: CallPurpose::Reevaluate { reference_index, repetition },
            };
            samples.push(reeval_sample(
                record,
                refs.get(reference_index as usize),
                bundle,
                judge_text,
                prefix,
                retry_limit,
                &ctx,
                reference_index,
                repetition,
            ));
        }
    }

    let scores: Vec<Score> = samples.iter().filter_map(|s| s.score).collect();
    let partial = scores.len() != samples.len();
    let total = match policy.aggregate {
        Aggregate::SumTallyWithInIteration => TotalScore::sum_tally(
            std::iter::once(record.in_iteration_score).chain(scores.iter().copied()),
        ),
        Aggregate::MeanOverReferences => {
            if scores.is_empty() {
                TotalScore::mean(&[record.in_iteration_score])
                    .expect("single-score mean is well defined")
            } else {
                TotalScore::mean(&scores).expect("non-empty score list")
            }
        }
    };
    ReevalReport { samples, total, partial }
}

#[allow(clippy::too_many_arguments)]
fn reeval_sample(
    record: &CandidateRecord,
    reference: &ImageHandle,
    bundle: &BackendBundle,
    judge_text: &str,
    prefix: &str,
    retry_limit: u32,
    ctx: &CallContext,
    reference_index: u32,
    repetition: u32,
) -> ReevalSample {
    let generated = with_retries(retry_limit, |_| {
        generate_image(bundle.generator.as_ref(), ctx, prefix, &record.prompt)
    });
    let image = match generated {
        Ok((image, _)) => image,
        Err(exhausted) => {
            return ReevalSample {
                reference_index,
                repetition,
                image: None,
                score: None,
                error: Some(exhausted.to_string()),
            }
        }
    };
    let judged = with_retries(retry_limit, |_| {
        judge_similarity(bundle.judge.as_ref(), ctx, judge_text, &image, reference)
    });
    match judged {
        Ok((verdict, _)) => ReevalSample {
            reference_index,
            repetition,
            image: Some(image),
            score: Some(verdict.rating),
            error: None,
        },
        Err(exhausted) => ReevalSample {
            reference_index,
            repetition,
            image: Some(image),
            score: None,
            error: Some(exhausted.to_string()),
        },
    }
}

/// Fills the template's single `{}` slot with `class_noun` and appends the
/// learned prompt after `", "`.
pub fn compose_eval_prompt(
    template: &str,
    class_noun: &str,
    learned: &Prompt,
    counter: &dyn TokenCounter,
) -> Result<Prompt, TaskError> {
    compose_eval_prompt_with_separator(template, class_noun, learned, ", ", counter)
}

/// As [`compose_eval_prompt`] but with an explicit separator; style tasks
/// join with `" in the style of "`.
pub fn compose_eval_prompt_with_separator(
    template: &str,
    class_noun: &str,
    learned: &Prompt,
    separator: &str,
    counter: &dyn TokenCounter,
) -> Result<Prompt, TaskError> {
    let slots = template.matches("{}").count();
    if slots != 1 {
        return Err(TaskError::MalformedTemplate { slots });
    }
    let text = format!("{}{}{}", template.replacen("{}", class_noun, 1), separator, learned.text());
    Prompt::new(text, counter).map_err(|_| TaskError::EmptyComposition)
}

/// Result of one generation attempt during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Success,
    SafetyRejected,
    Errored,
}

/// Aggregates per-prompt pass/fail outcomes into a failure rate; a prompt
/// passes when any of its attempts succeeded.
#[derive(Debug, Default, Clone)]
pub struct FailureAccounting {
    outcomes: BTreeMap<String, bool>,
}

impl FailureAccounting {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the attempts for one prompt; returns whether it passed.
    pub fn record_generation_outcome(
        &mut self,
        prompt_id: impl Into<String>,
        attempts: &[AttemptOutcome],
        retry_limit: u32,
    ) -> Result<bool, TaskError> {
        if attempts.is_empty() {
            return Err(TaskError::EmptyAttemptList);
        }
        if attempts.len() > retry_limit as usize {
            return Err(TaskError::TooManyAttempts { got: attempts.len(), limit: retry_limit });
        }
        let passed = attempts.iter().any(|a| *a == AttemptOutcome::Success);
        self.outcomes.insert(prompt_id.into(), passed);
        Ok(passed)
    }

    pub fn prompts(&self) -> usize {
        self.outcomes.len()
    }

    pub fn failures(&self) -> usize {
        self.outcomes.values().filter(|passed| !**passed).count()
    }

    /// Fraction of recorded prompts that never generated successfully.
    pub fn failure_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.failures() as f64 / self.prompts() as f64
    }
}

/// The evaluation prompt templates shipped with the crate, one per line,
/// each with a single `{}` slot for the class noun.
pub fn eval_templates() -> Vec<&'static str> {
    include_str!("../assets/eval_templates.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}
