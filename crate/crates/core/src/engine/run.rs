//! Run orchestration: the refinement loop, re-evaluation and final selection.

use std::collections::BTreeMap;

use crate::backends::wire::{
    compose_feedback_turn, compose_kickoff_turn, engineer_propose, generate_image,
    judge_similarity, CallError,
};
use crate::backends::{load_prompt_assets, BackendBundle, CallContext};
use crate::domain::{
    clip_prompt, CandidateRecord, EngineerReply, ReferenceSet, TotalScore, WhitespaceTokenizer,
};
use crate::parse::parse_engineer_reply;
use crate::seeds::{mix_seed, DOMAIN_REEVAL_SHUFFLE};
use crate::select::{select_final, select_top_c};
use crate::store::events::{
    EngineerReplyBody, EventBody, FinalSelectedBody, ImageGeneratedBody, IterationFailedBody,
    IterationStartedBody, JudgedBody, PhaseKind, ReevalBody, ReevalSampleBody,
};
use crate::tasks::{reevaluate, TaskKind};

use super::retry::with_retries;
use super::state::{Exchange, Feedback, StreamState};
use super::{
    EngineError, EventSink, FailedIteration, FailurePolicy, PartialIteration, ResumeState,
    RunConfig,
};
use super::BufferSink;

/// Everything a run produces, in addition to whatever the sink persisted.
#[derive(Debug)]
pub struct RunResult {
    pub best: CandidateRecord,
    pub total: TotalScore,
    /// Shortlisted candidates with their re-evaluation totals, shortlist order.
    pub shortlist: Vec<(CandidateRecord, TotalScore)>,
    /// All completed iterations, streams then iterations.
    pub records: Vec<CandidateRecord>,
    pub failed: Vec<FailedIteration>,
}

/// Shared read-only inputs of every stream.
#[derive(Clone, Copy)]
struct StreamPlan<'a> {
    config: &'a RunConfig,
    refs: &'a ReferenceSet,
    bundle: &'a BackendBundle,
    engineer_text: &'a str,
    judge_text: &'a str,
    prefix: &'a str,
}

/// Resume data sliced down to one stream.
#[derive(Default)]
struct StreamResume {
    history: std::collections::VecDeque<Exchange>,
    pending: Option<Feedback>,
    attempted: u32,
    done: BTreeMap<u32, CandidateRecord>,
    failed: BTreeMap<u32, FailedIteration>,
    partial: Option<PartialIteration>,
}

#[derive(Default)]
struct StreamOutput {
    records: Vec<CandidateRecord>,
    failed: Vec<FailedIteration>,
}

enum IterationOutcome {
    Completed(CandidateRecord),
    Failed(FailedIteration),
}

/// Runs the full algorithm against the given backends.
///
/// Pass `ResumeState::default()` for a fresh run. Events and images flow into
/// `sink` in a deterministic order; a resumed run emits exactly the events the
/// interrupted one had not yet written.
pub fn run(
    config: &RunConfig,
    refs: &ReferenceSet,
    bundle: &BackendBundle,
    sink: &mut dyn EventSink,
    resume: ResumeState,
) -> Result<RunResult, EngineError> {
    config.validate()?;
    if config.task == TaskKind::DirectInversion && refs.len() != 1 {
        return Err(EngineError::Validation {
            field: "references".to_string(),
            message: format!(
                "direct inversion works on exactly one reference image, got {}",
                refs.len()
            ),
        });
    }
    let asset = load_prompt_assets(config.task)?;
    if config.task.is_personalization() && config.prefix_index >= asset.prefix_examples.len() {
        return Err(EngineError::Validation {
            field: "prefix_index".to_string(),
            message: format!(
                "index {} is out of range for {} generation prefixes",
                config.prefix_index,
                asset.prefix_examples.len()
            ),
        });
    }
    let prefix = asset.prefix(config.prefix_index)?;
    let plan = StreamPlan {
        config,
        refs,
        bundle,
        engineer_text: asset.engineer_text,
        judge_text: asset.judge_text,
        prefix,
    };

    let mut resumes = slice_resume(config, &resume)?;
    let ResumeState { records, failed, partial, reeval_done, finalized, .. } = resume;
    for record in records {
        let slot = resumes.get_mut(&record.stream_id).expect("checked above");
        slot.done.insert(record.iteration, record);
    }
    for failure in failed {
        let slot = resumes.get_mut(&failure.stream_id).expect("checked above");
        slot.failed.insert(failure.iteration, failure);
    }
    if let Some(p) = partial {
        let slot = resumes.get_mut(&p.stream_id).expect("checked above");
        slot.partial = Some(p);
    }

    let mut all_records: Vec<CandidateRecord> = Vec::new();
    let mut all_failed: Vec<FailedIteration> = Vec::new();

    if config.deterministic || config.streams == 1 {
        for stream_id in 0..config.streams {
            let stream_resume = resumes.remove(&stream_id).unwrap_or_default();
            let out = run_stream(plan, stream_id, stream_resume, sink)?;
            all_records.extend(out.records);
            all_failed.extend(out.failed);
        }
    } else {
        // One thread per stream, each writing into its own buffer. Flushing
        // the buffers in stream order makes the ledger byte-identical to a
        // sequential run's.
        let results: Vec<Result<(StreamOutput, BufferSink), EngineError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..config.streams)
                    .map(|stream_id| {
                        let stream_resume = resumes.remove(&stream_id).unwrap_or_default();
                        scope.spawn(move || {
                            let mut buffer = BufferSink::default();
                            let out = run_stream(plan, stream_id, stream_resume, &mut buffer)?;
                            Ok((out, buffer))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|handle| handle.join().expect("stream thread panicked"))
                    .collect()
            });
        for result in results {
            let (out, mut buffer) = result?;
            buffer.flush_into(sink)?;
            all_records.extend(out.records);
            all_failed.extend(out.failed);
        }
    }

    if all_records.is_empty() {
        return Err(EngineError::AllIterationsFailed);
    }

    let shortlisted = select_top_c(&all_records, config.top_c as usize);
    let mut shortlist: Vec<(CandidateRecord, TotalScore)> = Vec::with_capacity(shortlisted.len());
    for record in shortlisted {
        let identity = record.identity();
        let total = match reeval_done.get(&identity) {
            Some(total) => *total,
            None => {
                let shuffle_seed = mix_seed(
                    config.seed,
                    &[DOMAIN_REEVAL_SHUFFLE, identity.0 as u64, identity.1 as u64],
                );
                let report = reevaluate(
                    &record,
                    refs,
                    bundle,
                    asset.judge_text,
                    prefix,
                    &config.reeval,
                    config.retry_limit,
                    shuffle_seed,
                );
                let mut samples = Vec::with_capacity(report.samples.len());
                for sample in &report.samples {
                    let digest = match &sample.image {
                        Some(image) => Some(sink.put_image(image)?),
                        None => None,
                    };
                    samples.push(ReevalSampleBody {
                        reference_index: sample.reference_index,
                        repetition: sample.repetition,
                        digest,
                        score: sample.score.map(|s| s.value() as u64),
                        error: sample.error.clone(),
                    });
                }
                sink.emit(&EventBody::Reeval(ReevalBody {
                    stream_id: identity.0,
                    iteration: identity.1,
                    prompt_text: record.prompt.text().to_string(),
                    samples,
                    numer: report.total.numer(),
                    denom: report.total.denom(),
                    basis: report.total.basis(),
                    partial: report.partial,
                }))?;
                report.total
            }
        };
        shortlist.push((record, total));
    }

    let (best, total) = select_final(&shortlist)
        .expect("shortlist is non-empty")
        .clone();
    if !finalized {
        sink.emit(&EventBody::FinalSelected(FinalSelectedBody {
            stream_id: best.stream_id,
            iteration: best.iteration,
            prompt_text: best.prompt.text().to_string(),
            prompt_tokens: best.prompt.token_count() as u64,
            numer: total.numer(),
            denom: total.denom(),
            basis: total.basis(),
        }))?;
    }

    Ok(RunResult { best, total, shortlist, records: all_records, failed: all_failed })
}

/// Builds one `StreamResume` per configured stream and rejects resume data
/// that references streams outside the configuration.
fn slice_resume(
    config: &RunConfig,
    resume: &ResumeState,
) -> Result<BTreeMap<u32, StreamResume>, EngineError> {
    let out_of_range = resume
        .records
        .iter()
        .map(|r| r.stream_id)
        .chain(resume.failed.iter().map(|f| f.stream_id))
        .chain(resume.attempted.keys().copied())
        .chain(resume.partial.iter().map(|p| p.stream_id))
        .find(|&s| s >= config.streams);
    if let Some(stream_id) = out_of_range {
        return Err(EngineError::Validation {
            field: "resume".to_string(),
            message: format!(
                "resume data references stream {stream_id}, but the run has {} streams",
                config.streams
            ),
        });
    }
    let mut resumes: BTreeMap<u32, StreamResume> = BTreeMap::new();
    for stream_id in 0..config.streams {
        let slot = StreamResume {
            history: resume.histories.get(&stream_id).cloned().unwrap_or_default(),
            pending: resume.pending.get(&stream_id).cloned(),
            attempted: resume.attempted.get(&stream_id).copied().unwrap_or(0),
            ..StreamResume::default()
        };
        resumes.insert(stream_id, slot);
    }
    Ok(resumes)
}

fn run_stream(
    plan: StreamPlan<'_>,
    stream_id: u32,
    mut resume: StreamResume,
    sink: &mut dyn EventSink,
) -> Result<StreamOutput, EngineError> {
    let mut state = StreamState::new(stream_id, plan.config.seed);
    state.history = resume.history;
    state.pending = resume.pending;
    state.skip_samples(resume.attempted, plan.refs.len());

    let mut out = StreamOutput::default();
    for iteration in 1..=plan.config.iterations {
        if iteration <= resume.attempted {
            if let Some(record) = resume.done.remove(&iteration) {
                out.records.push(record);
                continue;
            }
            if let Some(failure) = resume.failed.remove(&iteration) {
                out.failed.push(failure);
                continue;
            }
        }
        let partial = match resume.partial {
            Some(ref p) if p.iteration == iteration => resume.partial.take(),
            _ => None,
        };
        match execute_iteration(plan, &mut state, stream_id, iteration, partial, sink)? {
            IterationOutcome::Completed(record) => out.records.push(record),
            IterationOutcome::Failed(failure) => out.failed.push(failure),
        }
    }
    Ok(out)
}

fn execute_iteration(
    plan: StreamPlan<'_>,
    state: &mut StreamState,
    stream_id: u32,
    iteration: u32,
    partial: Option<PartialIteration>,
    sink: &mut dyn EventSink,
) -> Result<IterationOutcome, EngineError> {
    let config = plan.config;
    let ctx = CallContext::refine(stream_id, iteration);
    let (reference_index, recovered_reply, recovered_generated, already_started) = match partial {
        Some(p) => (p.reference_index, p.reply, p.generated, true),
        None => (state.sample_reference(plan.refs.len()), None, None, false),
    };
    let reference = plan.refs.get(reference_index as usize);
    if !already_started {
        sink.emit(&EventBody::IterationStarted(IterationStartedBody {
            stream_id,
            iteration,
            reference_index,
            reference_origin: reference.origin_id().to_string(),
        }))?;
    }

    // The turn the engineer answers this iteration. With no pending feedback
    // (first iteration, or everything before this failed) it is a kickoff.
    let current = match &state.pending {
        None => compose_kickoff_turn(reference),
        Some(feedback) => compose_feedback_turn(&feedback.generated, reference, feedback.score),
    };

    let (reply, reply_attempts) = match recovered_reply {
        Some(recovered) => recovered,
        None => {
            let proposed = with_retries(config.retry_limit, |_| -> Result<EngineerReply, CallError> {
                let raw = engineer_propose(
                    plan.bundle.engineer.as_ref(),
                    &ctx,
                    plan.engineer_text,
                    state.history_pairs(),
                    current.clone(),
                    config.max_engineer_tokens,
                )?;
                Ok(parse_engineer_reply(&raw, &WhitespaceTokenizer)?)
            });
            match proposed {
                Ok((mut reply, attempts)) => {
                    if let Some(limit) = config.clip_limit {
                        reply.prompt = clip_prompt(&reply.prompt, limit, &WhitespaceTokenizer);
                    }
                    sink.emit(&EventBody::EngineerReply(EngineerReplyBody {
                        stream_id,
                        iteration,
                        raw: reply.raw.clone(),
                        prompt_text: reply.prompt.text().to_string(),
                        prompt_tokens: reply.prompt.token_count() as u64,
                        attempts,
                    }))?;
                    (reply, attempts)
                }
                Err(exhausted) => {
                    return phase_failed(
                        sink,
                        config.on_iteration_failure,
                        stream_id,
                        iteration,
                        PhaseKind::Engineer,
                        exhausted.attempts,
                        exhausted.last_error.to_string(),
                    );
                }
            }
        }
    };

    let (generated, generation_attempts) = match recovered_generated {
        Some(recovered) => recovered,
        None => {
            let produced = with_retries(config.retry_limit, |_| {
                generate_image(plan.bundle.generator.as_ref(), &ctx, plan.prefix, &reply.prompt)
            });
            match produced {
                Ok((image, attempts)) => {
                    let digest = sink.put_image(&image)?;
                    sink.emit(&EventBody::ImageGenerated(ImageGeneratedBody {
                        stream_id,
                        iteration,
                        request_text: format!("{}{}", plan.prefix, reply.prompt.text()),
                        digest,
                        media_type: image.media_type(),
                        attempts,
                    }))?;
                    (image, attempts)
                }
                Err(exhausted) => {
                    return phase_failed(
                        sink,
                        config.on_iteration_failure,
                        stream_id,
                        iteration,
                        PhaseKind::Generator,
                        exhausted.attempts,
                        exhausted.last_error.to_string(),
                    );
                }
            }
        }
    };

    let judged = with_retries(config.retry_limit, |_| {
        judge_similarity(
            plan.bundle.judge.as_ref(),
            &ctx,
            plan.judge_text,
            &generated,
            reference,
        )
    });
    let (verdict, judge_attempts) = match judged {
        Ok(pair) => pair,
        Err(exhausted) => {
            return phase_failed(
                sink,
                config.on_iteration_failure,
                stream_id,
                iteration,
                PhaseKind::Judge,
                exhausted.attempts,
                exhausted.last_error.to_string(),
            );
        }
    };
    sink.emit(&EventBody::Judged(JudgedBody {
        stream_id,
        iteration,
        raw: verdict.raw.clone(),
        score: verdict.rating.value() as u64,
        attempts: judge_attempts,
    }))?;

    let record = CandidateRecord {
        stream_id,
        iteration,
        prompt: reply.prompt.clone(),
        generated: generated.clone(),
        reference_used: reference.clone(),
        in_iteration_score: verdict.rating,
        attempts_used: reply_attempts.max(generation_attempts).max(judge_attempts),
    };

    state.push_exchange(
        Exchange { user_turn: current, assistant_raw: reply.raw.clone() },
        config.history_window,
    );
    state.pending = Some(Feedback { generated, score: verdict.rating });

    Ok(IterationOutcome::Completed(record))
}

/// Records a phase failure and applies the configured policy. A failed
/// iteration leaves history and pending feedback untouched, so the next
/// iteration picks up the conversation as if this one had not happened.
fn phase_failed(
    sink: &mut dyn EventSink,
    policy: FailurePolicy,
    stream_id: u32,
    iteration: u32,
    phase: PhaseKind,
    attempts: u32,
    error: String,
) -> Result<IterationOutcome, EngineError> {
    sink.emit(&EventBody::IterationFailed(IterationFailedBody {
        stream_id,
        iteration,
        phase,
        error: error.clone(),
        attempts,
    }))?;
    match policy {
        FailurePolicy::Abort => Err(EngineError::Aborted { stream_id, iteration, phase, error }),
        FailurePolicy::Skip => Ok(IterationOutcome::Failed(FailedIteration {
            stream_id,
            iteration,
            phase,
            error,
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::wire::ChatMessage;
    use crate::backends::{BackendError, ChatBackend, ImageGenerator};
    use crate::domain::{ImageHandle, MediaType, Provenance};
    use crate::engine::NullSink;
    use std::sync::Arc;

    /// Backends that must never be reached; validation rejects first.
    struct Unreachable;

    impl ChatBackend for Unreachable {
        fn complete(
            &self,
            _ctx: &CallContext,
            _messages: &[ChatMessage],
            _max_tokens: u32,
        ) -> Result<String, BackendError> {
            unreachable!("validation should fail before any backend call")
        }
    }

    impl ImageGenerator for Unreachable {
        fn generate(
            &self,
            _ctx: &CallContext,
            _request_text: &str,
        ) -> Result<ImageHandle, BackendError> {
            unreachable!("validation should fail before any backend call")
        }
    }

    fn unreachable_bundle() -> BackendBundle {
        BackendBundle {
            engineer: Arc::new(Unreachable),
            generator: Arc::new(Unreachable),
            judge: Arc::new(Unreachable),
        }
    }

    fn refs(n: usize) -> ReferenceSet {
        let images = (0..n)
            .map(|i| {
                ImageHandle::new(
                    vec![i as u8 + 1],
                    MediaType::Png,
                    Provenance::Reference,
                    format!("ref-{i}"),
                )
                .unwrap()
            })
            .collect();
        ReferenceSet::new(images).unwrap()
    }

    #[test]
    fn inversion_rejects_multiple_references() {
        let config = RunConfig::for_task(TaskKind::DirectInversion, 1);
        let err = run(
            &config,
            &refs(2),
            &unreachable_bundle(),
            &mut NullSink,
            ResumeState::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, EngineError::Validation { ref field, .. } if field == "references"),
            "got {err:?}"
        );
    }

    #[test]
    fn personalization_rejects_out_of_range_prefix_index() {
        let mut config = RunConfig::for_task(TaskKind::SubjectPersonalization, 1);
        config.prefix_index = 5;
        let err = run(
            &config,
            &refs(3),
            &unreachable_bundle(),
            &mut NullSink,
            ResumeState::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, EngineError::Validation { ref field, .. } if field == "prefix_index"),
            "got {err:?}"
        );
    }

    #[test]
    fn resume_data_for_unknown_streams_is_rejected() {
        let config = RunConfig::for_task(TaskKind::DirectInversion, 1);
        let mut resume = ResumeState::default();
        resume.attempted.insert(99, 1);
        let err = run(
            &config,
            &refs(1),
            &unreachable_bundle(),
            &mut NullSink,
            resume,
        )
        .unwrap_err();
        assert!(
            matches!(err, EngineError::Validation { ref field, .. } if field == "resume"),
            "got {err:?}"
        );
    }
}
