//! Reconstructing engine state from a run directory.
//!
//! Replay folds the verified event stream into exactly the state the engine
//! holds at the corresponding point of a live run: completed records, failed
//! iterations, per-stream history windows and pending feedback, at most one
//! mid-flight iteration, and which re-evaluations and selections are already
//! on record. Resuming with that state re-emits only the missing events.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backends::load_prompt_assets;
use crate::backends::wire::{compose_feedback_turn, compose_kickoff_turn, ChatMessage};
use crate::domain::{
    CandidateRecord, EngineerReply, ImageHandle, Prompt, Provenance, ReferenceSet, Score,
    TotalScore, WhitespaceTokenizer,
};
use crate::engine::{push_bounded, Exchange, FailedIteration, Feedback, PartialIteration, ResumeState};
use crate::parse::parse_engineer_reply;
use crate::store::events::EventBody;
use crate::store::ledger::{read_ledger, StoreError, LEDGER_FILE, OBJECTS_DIR};
use crate::store::manifest::RunManifest;
use crate::store::objects::ObjectStore;

/// Everything replay recovers from a run directory.
#[derive(Debug)]
pub struct Replayed {
    pub manifest: RunManifest,
    pub references: ReferenceSet,
    pub resume: ResumeState,
    /// Sequence number the next appended event must carry.
    pub next_seq: u64,
    /// Byte length of the verified ledger prefix; resume truncates to this.
    pub valid_len: u64,
    /// True when an interrupted trailing line was ignored.
    pub dropped_partial_line: bool,
    /// The full verified event stream, for reporting.
    pub events: Vec<(u64, EventBody)>,
}

struct OpenIteration {
    iteration: u32,
    reference_index: u32,
    current_turn: ChatMessage,
    reply: Option<(EngineerReply, u32)>,
    generated: Option<(ImageHandle, u32)>,
}

#[derive(Default)]
struct StreamFold {
    history: std::collections::VecDeque<Exchange>,
    pending: Option<Feedback>,
    attempted: u32,
    open: Option<OpenIteration>,
}

fn corrupt(seq: u64, detail: impl Into<String>) -> StoreError {
    StoreError::CorruptLine { line: seq as usize, detail: detail.into() }
}

/// Replays the ledger in `run_dir` and verifies it against this build.
pub fn replay(run_dir: &Path) -> Result<Replayed, StoreError> {
    let contents = read_ledger(&run_dir.join(LEDGER_FILE))?;
    if contents.events.is_empty() {
        return Err(StoreError::EmptyLedger);
    }
    let manifest = match &contents.events[0].1 {
        EventBody::RunStarted(body) => body.manifest.clone(),
        _ => return Err(StoreError::MissingManifest),
    };

    // The run is only resumable if this build still carries the instruction
    // texts the run was started with.
    let asset = load_prompt_assets(manifest.config.task)
        .map_err(|e| StoreError::ManifestMismatch(e.to_string()))?;
    if asset.engineer_digest() != manifest.assets.engineer
        || asset.judge_digest() != manifest.assets.judge
    {
        return Err(StoreError::ManifestMismatch(
            "instruction texts differ from the recorded digests".to_string(),
        ));
    }

    let objects = ObjectStore::open(run_dir.join(OBJECTS_DIR))?;
    let mut images = Vec::with_capacity(manifest.references.len());
    for entry in &manifest.references {
        let bytes = objects.get(&entry.digest)?;
        let image = ImageHandle::new(
            bytes,
            entry.media_type,
            Provenance::Reference,
            entry.origin_id.clone(),
        )
        .map_err(|e| {
            StoreError::ManifestMismatch(format!("reference {}: {e}", entry.origin_id))
        })?;
        images.push(image);
    }
    let references = ReferenceSet::new(images)
        .map_err(|e| StoreError::ManifestMismatch(e.to_string()))?;

    let resume = fold_events(&contents.events[1..], &manifest, &references, &objects)?;
    let next_seq = contents.events.last().map(|(seq, _)| seq + 1).unwrap_or(1);

    Ok(Replayed {
        manifest,
        references,
        resume,
        next_seq,
        valid_len: contents.valid_len,
        dropped_partial_line: contents.dropped_partial_line,
        events: contents.events,
    })
}

fn fold_events(
    events: &[(u64, EventBody)],
    manifest: &RunManifest,
    references: &ReferenceSet,
    objects: &ObjectStore,
) -> Result<ResumeState, StoreError> {
    let window = manifest.config.history_window;
    let mut folds: BTreeMap<u32, StreamFold> = BTreeMap::new();
    let mut resume = ResumeState::default();

    for (seq, event) in events {
        let seq = *seq;
        match event {
            EventBody::RunStarted(_) => {
                return Err(corrupt(seq, "second run_started event"));
            }
            EventBody::IterationStarted(body) => {
                let fold = folds.entry(body.stream_id).or_default();
                if let Some(open) = &fold.open {
                    return Err(corrupt(
                        seq,
                        format!(
                            "iteration {} started while iteration {} is still open",
                            body.iteration, open.iteration
                        ),
                    ));
                }
                if body.reference_index as usize >= references.len() {
                    return Err(corrupt(
                        seq,
                        format!("reference index {} out of range", body.reference_index),
                    ));
                }
                let reference = references.get(body.reference_index as usize);
                if reference.origin_id() != body.reference_origin {
                    return Err(StoreError::ManifestMismatch(format!(
                        "event {seq} names reference '{}' but index {} is '{}'",
                        body.reference_origin,
                        body.reference_index,
                        reference.origin_id()
                    )));
                }
                let current_turn = match &fold.pending {
                    None => compose_kickoff_turn(reference),
                    Some(feedback) => {
                        compose_feedback_turn(&feedback.generated, reference, feedback.score)
                    }
                };
                fold.attempted += 1;
                fold.open = Some(OpenIteration {
                    iteration: body.iteration,
                    reference_index: body.reference_index,
                    current_turn,
                    reply: None,
                    generated: None,
                });
            }
            EventBody::EngineerReply(body) => {
                let open = expect_open(&mut folds, body.stream_id, body.iteration, seq)?;
                let prompt = Prompt::new(&body.prompt_text, &WhitespaceTokenizer)
                    .map_err(|e| corrupt(seq, format!("unusable prompt text: {e}")))?;
                if prompt.token_count() as u64 != body.prompt_tokens {
                    return Err(corrupt(
                        seq,
                        format!(
                            "prompt token count {} does not match recorded {}",
                            prompt.token_count(),
                            body.prompt_tokens
                        ),
                    ));
                }
                let improvement = parse_engineer_reply(&body.raw, &WhitespaceTokenizer)
                    .map(|r| r.improvement)
                    .unwrap_or_default();
                open.reply = Some((
                    EngineerReply { improvement, prompt, raw: body.raw.clone() },
                    body.attempts,
                ));
            }
            EventBody::ImageGenerated(body) => {
                let open = expect_open(&mut folds, body.stream_id, body.iteration, seq)?;
                let bytes = objects.get(&body.digest)?;
                let origin = format!("replayed-{}", &body.digest[..12.min(body.digest.len())]);
                let image = ImageHandle::new(bytes, body.media_type, Provenance::Generated, origin)
                    .map_err(|e| corrupt(seq, format!("unusable image payload: {e}")))?;
                open.generated = Some((image, body.attempts));
            }
            EventBody::Judged(body) => {
                let fold = folds.entry(body.stream_id).or_default();
                let open = match fold.open.take() {
                    Some(open) if open.iteration == body.iteration => open,
                    _ => {
                        return Err(corrupt(
                            seq,
                            format!("judged event without open iteration {}", body.iteration),
                        ));
                    }
                };
                let (reply, reply_attempts) = open
                    .reply
                    .ok_or_else(|| corrupt(seq, "judged before any engineer reply"))?;
                let (generated, generation_attempts) = open
                    .generated
                    .ok_or_else(|| corrupt(seq, "judged before any generated image"))?;
                let score = Score::new(body.score)
                    .map_err(|e| corrupt(seq, format!("invalid score: {e}")))?;
                resume.records.push(CandidateRecord {
                    stream_id: body.stream_id,
                    iteration: body.iteration,
                    prompt: reply.prompt.clone(),
                    generated: generated.clone(),
                    reference_used: references.get(open.reference_index as usize).clone(),
                    in_iteration_score: score,
                    attempts_used: reply_attempts
                        .max(generation_attempts)
                        .max(body.attempts),
                });
                push_bounded(
                    &mut fold.history,
                    Exchange { user_turn: open.current_turn, assistant_raw: reply.raw },
                    window,
                );
                fold.pending = Some(Feedback { generated, score });
            }
            EventBody::IterationFailed(body) => {
                let fold = folds.entry(body.stream_id).or_default();
                match fold.open.take() {
                    Some(open) if open.iteration == body.iteration => {}
                    _ => {
                        return Err(corrupt(
                            seq,
                            format!("failure event without open iteration {}", body.iteration),
                        ));
                    }
                }
                resume.failed.push(FailedIteration {
                    stream_id: body.stream_id,
                    iteration: body.iteration,
                    phase: body.phase,
                    error: body.error.clone(),
                });
            }
            EventBody::Reeval(body) => {
                let total = TotalScore::new(body.numer, body.denom, body.basis)
                    .map_err(|e| corrupt(seq, format!("invalid total: {e}")))?;
                resume
                    .reeval_done
                    .insert((body.stream_id, body.iteration), total);
            }
            EventBody::FinalSelected(_) => {
                resume.finalized = true;
            }
        }
    }

    let mut open_streams = folds
        .iter()
        .filter(|(_, fold)| fold.open.is_some())
        .map(|(stream_id, _)| *stream_id);
    if let Some(stream_id) = open_streams.next() {
        if let Some(other) = open_streams.next() {
            return Err(StoreError::CorruptLine {
                line: 0,
                detail: format!(
                    "streams {stream_id} and {other} both have unfinished iterations"
                ),
            });
        }
        let fold = folds.get_mut(&stream_id).expect("fold exists");
        let open = fold.open.take().expect("checked above");
        resume.partial = Some(PartialIteration {
            stream_id,
            iteration: open.iteration,
            reference_index: open.reference_index,
            reply: open.reply,
            generated: open.generated,
        });
    }

    for (stream_id, fold) in folds {
        if !fold.history.is_empty() {
            resume.histories.insert(stream_id, fold.history);
        }
        if let Some(pending) = fold.pending {
            resume.pending.insert(stream_id, pending);
        }
        if fold.attempted > 0 {
            resume.attempted.insert(stream_id, fold.attempted);
        }
    }

    Ok(resume)
}

fn expect_open<'a>(
    folds: &'a mut BTreeMap<u32, StreamFold>,
    stream_id: u32,
    iteration: u32,
    seq: u64,
) -> Result<&'a mut OpenIteration, StoreError> {
    let fold = folds.entry(stream_id).or_default();
    match fold.open.as_mut() {
        Some(open) if open.iteration == iteration => Ok(open),
        _ => Err(corrupt(
            seq,
            format!("event for iteration {iteration} of stream {stream_id} without a matching start"),
        )),
    }
}
