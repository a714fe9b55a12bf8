//! An independent re-derivation of the engine's final choice.
//!
//! Given the completed iteration records of a noise-free simulated run, this
//! recomputes every score from the images and the codebook and re-runs the
//! selection rules with plain loops. It shares no code with the engine's
//! scoring or ranking, so agreement between the two is meaningful evidence.

use crate::domain::{CandidateRecord, ReferenceSet};
use crate::simworld::{AttributeImage, Codebook};
use crate::tasks::{Aggregate, ReevalPolicy};

/// The candidate the selection rules should produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OraclePick {
    pub stream_id: u32,
    pub iteration: u32,
    pub prompt_text: String,
}

/// Predicts the final selection for a noise-free run.
///
/// Assumes generation is exact codebook rendering; runs with generation noise
/// are outside this oracle's scope.
pub fn oracle_best_prompt(
    records: &[CandidateRecord],
    refs: &ReferenceSet,
    codebook: &Codebook,
    prefix: &str,
    policy: &ReevalPolicy,
    top_c: usize,
) -> Option<OraclePick> {
    if records.is_empty() {
        return None;
    }

    // In-iteration score of each record, recomputed from the stored images.
    let in_iteration: Vec<u64> = records
        .iter()
        .map(|r| {
            let generated = AttributeImage::from_handle(&r.generated)
                .expect("simulated images decode");
            let reference = AttributeImage::from_handle(&r.reference_used)
                .expect("simulated images decode");
            jaccard10(&generated, &reference)
        })
        .collect();

    // Shortlist: repeatedly pick the best remaining record, score first,
    // then smaller (stream, iteration).
    let want = top_c.min(records.len());
    let mut chosen: Vec<usize> = Vec::with_capacity(want);
    while chosen.len() < want {
        let mut best: Option<usize> = None;
        for idx in 0..records.len() {
            if chosen.contains(&idx) {
                continue;
            }
            best = Some(match best {
                None => idx,
                Some(current) => {
                    let ahead = in_iteration[idx] > in_iteration[current]
                        || (in_iteration[idx] == in_iteration[current]
                            && records[idx].identity() < records[current].identity());
                    if ahead {
                        idx
                    } else {
                        current
                    }
                }
            });
        }
        chosen.push(best.expect("candidates remain"));
    }

    // Re-evaluation totals as exact fractions.
    let totals: Vec<(u64, u64)> = chosen
        .iter()
        .map(|&idx| {
            let record = &records[idx];
            let fresh = codebook.render(&format!("{}{}", prefix, record.prompt.text()));
            let mut sample_scores: Vec<u64> = Vec::new();
            if policy.per_reference {
                for reference in refs.iter() {
                    let reference = AttributeImage::from_handle(reference)
                        .expect("simulated references decode");
                    for _ in 0..policy.repetitions {
                        sample_scores.push(jaccard10(&fresh, &reference));
                    }
                }
            } else {
                let reference = AttributeImage::from_handle(refs.get(0))
                    .expect("simulated references decode");
                for _ in 0..policy.repetitions {
                    sample_scores.push(jaccard10(&fresh, &reference));
                }
            }
            match policy.aggregate {
                Aggregate::SumTallyWithInIteration => {
                    (in_iteration[idx] + sample_scores.iter().sum::<u64>(), 1)
                }
                Aggregate::MeanOverReferences => {
                    (sample_scores.iter().sum(), sample_scores.len() as u64)
                }
            }
        })
        .collect();

    // Final pick: larger total, then fewer prompt tokens, then smaller
    // (stream, iteration).
    let mut winner = 0;
    for contender in 1..chosen.len() {
        if beats(
            (totals[contender], &records[chosen[contender]]),
            (totals[winner], &records[chosen[winner]]),
        ) {
            winner = contender;
        }
    }
    let record = &records[chosen[winner]];
    Some(OraclePick {
        stream_id: record.stream_id,
        iteration: record.iteration,
        prompt_text: record.prompt.text().to_string(),
    })
}

/// Jaccard overlap mapped to 0..=10, rounding halves up. Written as explicit
/// quotient-and-remainder arithmetic on purpose: it must not share code with
/// the production scoring path it checks.
fn jaccard10(a: &AttributeImage, b: &AttributeImage) -> u64 {
    let i = a.attrs().intersection(b.attrs()).count() as u64;
    let u = a.attrs().union(b.attrs()).count() as u64;
    if u == 0 {
        return 10;
    }
    let scaled = 10 * i;
    let quotient = scaled / u;
    if (scaled % u) * 2 >= u {
        quotient + 1
    } else {
        quotient
    }
}

fn beats(a: ((u64, u64), &CandidateRecord), b: ((u64, u64), &CandidateRecord)) -> bool {
    let ((an, ad), ra) = a;
    let ((bn, bd), rb) = b;
    let left = an as u128 * bd as u128;
    let right = bn as u128 * ad as u128;
    if left != right {
        return left > right;
    }
    let tokens_a = ra.prompt.text().split_whitespace().count();
    let tokens_b = rb.prompt.text().split_whitespace().count();
    if tokens_a != tokens_b {
        return tokens_a < tokens_b;
    }
    ra.identity() < rb.identity()
}
