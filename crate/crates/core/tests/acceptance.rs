//! Acceptance suite. One test per shipping criterion; each prints a single
//! pass or fail line so the run output doubles as a checklist. Tolerances
//! and budgets are pinned as constants next to the criteria that use them.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptforge::backends::{
    build_engineer_messages, build_judge_messages, compose_feedback_turn, compose_kickoff_turn,
    load_prompt_assets, BackendBundle, CallContext, ChatMessage,
};
use promptforge::domain::{
    CandidateRecord, ImageHandle, MediaType, Prompt, Provenance, Score, ScoreBasis, TotalScore,
    WhitespaceTokenizer,
};
use promptforge::engine::{self, ResumeState, RunConfig};
use promptforge::parse::{parse_engineer_reply, parse_rating, ParseError};
use promptforge::select::select_final;
use promptforge::simworld::{
    oracle_best_prompt, FaultPlan, FlakyGenerator, ScriptedPolicy, SimEngineer, SimGenerator,
};
use promptforge::store::{replay, EventBody, RunWriter, LEDGER_FILE, OBJECTS_DIR};
use promptforge::tasks::TaskKind;

use common::{
    codebook, greedy_bundle, ledger_bytes, script_bundle, single_reference, writer_for,
    CountingGenerator, RecordingSink, SpyEngineer,
};

/// Wall-clock ceiling for any single simworld run.
const PER_RUN_TIME_LIMIT: Duration = Duration::from_secs(5);
/// Wall-clock ceiling for the whole oracle-equivalence sweep.
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(60);
const ORACLE_SEEDS: u64 = 100;
const CONVERGENCE_SEEDS: u64 = 100;
/// Seeds out of [`CONVERGENCE_SEEDS`] that must reach the basis maximum.
const CONVERGENCE_MIN_PASSES: usize = 95;
const K_TREND_SEEDS: u64 = 50;
const PARSER_CASES: usize = 10_000;
const TRUNCATION_CUTS: usize = 20;
/// History window in exchanges; a request is one system turn, a user and an
/// assistant turn per visible exchange, and the current user turn.
const HISTORY_WINDOW: usize = 3;
const MAX_ENGINEER_MESSAGES: usize = 2 * HISTORY_WINDOW + 2;
const RETRY_LIMIT: u32 = 5;
const CLIP_LIMIT: usize = 77;

fn criterion(number: u32, name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("criterion {number:02} {name}: pass"),
        Err(message) => {
            println!("criterion {number:02} {name}: FAIL {message}");
            panic!("criterion {number:02} {name} failed: {message}");
        }
    }
}

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn inversion_config(seed: u64, streams: u32, iterations: u32) -> RunConfig {
    let mut config = RunConfig::for_task(TaskKind::DirectInversion, seed);
    config.streams = streams;
    config.iterations = iterations;
    config
}

/// Per-seed shuffle of the engineer's vocabulary: three tokens the codebook
/// knows plus two it does not, so word order varies without making the
/// target unreachable.
fn shuffled_vocabulary(seed: u64) -> Vec<String> {
    let mut words: Vec<String> = ["red", "cube", "metallic", "very", "object"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words.shuffle(&mut rng);
    words
}

fn shuffled_bundle(seed: u64) -> BackendBundle {
    let vocabulary = shuffled_vocabulary(seed);
    BackendBundle {
        engineer: Arc::new(SimEngineer::new(ScriptedPolicy::GreedyAddRemove { vocabulary })),
        generator: Arc::new(SimGenerator::exact(codebook())),
        judge: Arc::new(promptforge::simworld::SimJudge),
    }
}

#[test]
fn criterion_01_budget_exactness() {
    criterion(1, "budget exactness", || {
        for (streams, iterations) in [(1u32, 1u32), (6, 5), (10, 4), (3, 10)] {
            let refs = single_reference(&["color-red", "shape-cube", "finish-metallic"]);
            let counting = Arc::new(CountingGenerator::new(SimGenerator::exact(codebook())));
            let bundle = BackendBundle {
                generator: counting.clone(),
                ..greedy_bundle(&["red", "cube", "metallic", "blue"])
            };
            let config = inversion_config(42, streams, iterations);
            let mut sink = RecordingSink::default();

            let started = Instant::now();
            let result = engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
                .map_err(|e| format!("run ({streams},{iterations}) failed: {e}"))?;
            let elapsed = started.elapsed();
            ensure(elapsed < PER_RUN_TIME_LIMIT, || {
                format!("run ({streams},{iterations}) took {elapsed:?}")
            })?;

            let budget = (streams * iterations) as usize;
            let attempts = sink.count(|e| matches!(e, EventBody::IterationStarted(_)));
            ensure(attempts == budget, || {
                format!("({streams},{iterations}): {attempts} iteration attempts, expected {budget}")
            })?;
            ensure(counting.refine_calls() as usize == budget, || {
                format!(
                    "({streams},{iterations}): {} refinement generator calls, expected {budget}",
                    counting.refine_calls()
                )
            })?;
            let shortlist = budget.min(config.top_c as usize);
            ensure(result.shortlist.len() == shortlist, || {
                format!(
                    "({streams},{iterations}): shortlist of {}, expected {shortlist}",
                    result.shortlist.len()
                )
            })?;
            ensure(counting.reeval_calls() as usize == shortlist * 2, || {
                format!(
                    "({streams},{iterations}): {} re-evaluation generator calls, expected {}",
                    counting.reeval_calls(),
                    shortlist * 2
                )
            })?;
        }
        Ok(())
    });
}

#[test]
fn criterion_02_oracle_equivalence() {
    criterion(2, "oracle equivalence", || {
        let refs = single_reference(&["color-red", "shape-cube", "finish-metallic"]);
        let book = codebook();
        let started = Instant::now();
        for seed in 0..ORACLE_SEEDS {
            let config = inversion_config(seed, 3, 4);
            let bundle = shuffled_bundle(seed);
            let mut sink = RecordingSink::default();
            let result = engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
                .map_err(|e| format!("seed {seed}: run failed: {e}"))?;
            let pick = oracle_best_prompt(
                &result.records,
                &refs,
                &book,
                "",
                &config.reeval,
                config.top_c as usize,
            )
            .ok_or_else(|| format!("seed {seed}: oracle returned no pick"))?;
            let agree = pick.stream_id == result.best.stream_id
                && pick.iteration == result.best.iteration
                && pick.prompt_text == result.best.prompt.text();
            ensure(agree, || {
                format!(
                    "seed {seed}: engine chose ({}, {}) {:?}, oracle ({}, {}) {:?}",
                    result.best.stream_id,
                    result.best.iteration,
                    result.best.prompt.text(),
                    pick.stream_id,
                    pick.iteration,
                    pick.prompt_text
                )
            })?;
        }
        let elapsed = started.elapsed();
        ensure(elapsed < ORACLE_TIME_LIMIT, || {
            format!("{ORACLE_SEEDS} runs took {elapsed:?}")
        })
    });
}

#[test]
fn criterion_03_noise_free_convergence() {
    criterion(3, "noise-free convergence", || {
        let refs = single_reference(&["color-red", "shape-cube", "finish-metallic"]);
        let maximum = TotalScore::new(30, 1, ScoreBasis::SumTally).expect("static total");
        let mut passes = 0usize;
        for seed in 0..CONVERGENCE_SEEDS {
            let config = inversion_config(seed, 3, 5);
            let bundle = shuffled_bundle(seed);
            let mut sink = RecordingSink::default();
            let result = engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
                .map_err(|e| format!("seed {seed}: run failed: {e}"))?;
            if result.total == maximum {
                passes += 1;
            }
        }
        ensure(passes >= CONVERGENCE_MIN_PASSES, || {
            format!(
                "{passes} of {CONVERGENCE_SEEDS} seeds reached the maximum, need {CONVERGENCE_MIN_PASSES}"
            )
        })
    });
}

#[test]
fn criterion_04_k_trend_sanity() {
    criterion(4, "k-trend sanity", || {
        let refs = single_reference(&["color-red", "shape-cube", "finish-metallic"]);
        let mean_best = |iterations: u32| -> Result<f64, String> {
            let mut sum = 0.0f64;
            for seed in 0..K_TREND_SEEDS {
                let config = inversion_config(seed, 3, iterations);
                let bundle = shuffled_bundle(seed);
                let mut sink = RecordingSink::default();
                let result =
                    engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
                        .map_err(|e| format!("seed {seed} K={iterations}: {e}"))?;
                let best = result
                    .records
                    .iter()
                    .map(|r| r.in_iteration_score.value())
                    .max()
                    .unwrap_or(0);
                sum += best as f64;
            }
            Ok(sum / K_TREND_SEEDS as f64)
        };
        let short = mean_best(1)?;
        let long = mean_best(5)?;
        ensure(long >= short, || {
            format!("mean best score fell from {short:.2} at K=1 to {long:.2} at K=5")
        })
    });
}

/// Independent reference scanner for judge verdicts.
#[derive(Debug, PartialEq)]
enum RatingOracle {
    Value(u8),
    OutOfRange,
    Missing,
}

fn scan_rating(s: &str) -> RatingOracle {
    let bytes = s.as_bytes();
    let pattern = b"Rating: [[";
    let mut i = 0;
    while i + pattern.len() <= bytes.len() {
        if &bytes[i..i + pattern.len()] != pattern {
            i += 1;
            continue;
        }
        let digits_start = i + pattern.len();
        let mut j = digits_start;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        if j > digits_start && bytes.len() >= j + 2 && &bytes[j..j + 2] == b"]]" {
            return match s[digits_start..j].parse::<u64>() {
                Ok(v) if v <= 10 => RatingOracle::Value(v as u8),
                _ => RatingOracle::OutOfRange,
            };
        }
        i += 1;
    }
    RatingOracle::Missing
}

fn rating_outcome(raw: &str) -> Result<RatingOracle, String> {
    match parse_rating(raw) {
        Ok(score) => Ok(RatingOracle::Value(score.value())),
        Err(ParseError::RatingOutOfRange(_)) => Ok(RatingOracle::OutOfRange),
        Err(ParseError::NoRatingFound) => Ok(RatingOracle::Missing),
        Err(other) => Err(format!("unexpected rating error: {other}")),
    }
}

fn rating_case(rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for _ in 0..rng.gen_range(0..=6) {
        match rng.gen_range(0..11) {
            0 => out.push_str("The images share composition and subject. "),
            1 => out.push_str(&format!("Rating: [[{}]] ", rng.gen_range(0..=10))),
            2 => out.push_str(&format!("Rating: [[{}]] ", rng.gen_range(11..=2000))),
            3 => out.push_str("Rating: [[]] "),
            4 => out.push_str("Rating: [5] "),
            5 => out.push_str("rating: [[5]] "),
            6 => out.push_str("Rating: [[ 7]] "),
            7 => out.push_str("Rating: [[184467440737095516160]] "),
            8 => out.push_str("notes with [[brackets]] and Rating: words "),
            9 => out.push_str("évaluation ★ hodnocení "),
            _ => out.push_str(&format!("Rating: [[{}x]] ", rng.gen_range(0..=9))),
        }
    }
    out
}

/// Independent reference scanner for engineer replies. Finds the first brace
/// start from which any brace-terminated span parses as a JSON object, by
/// trying every candidate end, then applies the documented key rules.
#[derive(Debug, PartialEq)]
enum ReplyOracle {
    Reply { improvement: String, prompt: String },
    NoObject,
    MissingImprovement,
    MissingPrompt,
    EmptyPrompt,
}

fn scan_reply(s: &str) -> ReplyOracle {
    let bytes = s.as_bytes();
    for start in 0..bytes.len() {
        if bytes[start] != b'{' {
            continue;
        }
        let parsed = (start + 1..bytes.len())
            .filter(|&end| bytes[end] == b'}')
            .find_map(|end| {
                serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(
                    &s[start..=end],
                )
                .ok()
            });
        let Some(map) = parsed else { continue };
        let Some(improvement) = map.get("improvement").and_then(|v| v.as_str()) else {
            return ReplyOracle::MissingImprovement;
        };
        let Some(prompt) = map.get("prompt").and_then(|v| v.as_str()) else {
            return ReplyOracle::MissingPrompt;
        };
        if prompt.split_whitespace().next().is_none() {
            return ReplyOracle::EmptyPrompt;
        }
        return ReplyOracle::Reply {
            improvement: improvement.to_string(),
            prompt: prompt.to_string(),
        };
    }
    ReplyOracle::NoObject
}

fn reply_outcome(raw: &str) -> Result<ReplyOracle, String> {
    match parse_engineer_reply(raw, &WhitespaceTokenizer) {
        Ok(reply) => Ok(ReplyOracle::Reply {
            improvement: reply.improvement,
            prompt: reply.prompt.text().to_string(),
        }),
        Err(ParseError::NoObjectFound) => Ok(ReplyOracle::NoObject),
        Err(ParseError::MissingKey("improvement")) => Ok(ReplyOracle::MissingImprovement),
        Err(ParseError::MissingKey("prompt")) => Ok(ReplyOracle::MissingPrompt),
        Err(ParseError::EmptyPrompt) => Ok(ReplyOracle::EmptyPrompt),
        Err(other) => Err(format!("unexpected reply error: {other}")),
    }
}

fn reply_case(rng: &mut ChaCha8Rng) -> String {
    let texts = [
        "a red cube",
        "braces { } inside a string",
        "quote \" and backslash \\ survive",
        "multi word prompt with detail",
        "",
        "   ",
        "newline\ninside",
        "crème brûlée ★",
    ];
    let pick = |rng: &mut ChaCha8Rng| {
        serde_json::to_string(texts[rng.gen_range(0..texts.len())]).expect("string encodes")
    };
    let mut out = String::new();
    for _ in 0..rng.gen_range(1..=5) {
        match rng.gen_range(0..12) {
            0 => out.push_str("Here is my attempt. "),
            1 => {
                let improvement = pick(rng);
                let prompt = pick(rng);
                out.push_str(&format!(
                    "{{\"improvement\": {improvement}, \"prompt\": {prompt}}} "
                ));
            }
            2 => {
                let prompt = pick(rng);
                let improvement = pick(rng);
                out.push_str(&format!(
                    "{{\"prompt\": {prompt}, \"improvement\": {improvement}}} "
                ));
            }
            3 => {
                let improvement = pick(rng);
                let prompt = pick(rng);
                out.push_str(&format!(
                    "```json\n{{\"improvement\": {improvement}, \"prompt\": {prompt}}}\n``` "
                ));
            }
            4 => out.push_str("{improvement: bare words} "),
            5 => out.push_str("{\"improvement\": \"half "),
            6 => out.push_str("{} "),
            7 => out.push_str("{\"improvement\": null, \"prompt\": \"p\"} "),
            8 => out.push_str("{\"improvement\": \"i\", \"prompt\": [\"list\"]} "),
            9 => out.push_str("{\"meta\": {\"improvement\": \"inner\", \"prompt\": \"inner\"}} "),
            10 => out.push_str("plain prose without any object "),
            _ => {
                let improvement = pick(rng);
                out.push_str(&format!("{{\"improvement\": {improvement}}} "));
            }
        }
    }
    out
}

#[test]
fn criterion_05_parser_suites() {
    criterion(5, "parser suites", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1005);
        for case in 0..PARSER_CASES {
            let raw = rating_case(&mut rng);
            let got = rating_outcome(&raw)?;
            let want = scan_rating(&raw);
            ensure(got == want, || {
                format!("rating case {case}: parser {got:?}, scanner {want:?}, input {raw:?}")
            })?;
        }
        for case in 0..PARSER_CASES {
            let raw = reply_case(&mut rng);
            let got = reply_outcome(&raw)?;
            let want = scan_reply(&raw);
            ensure(got == want, || {
                format!("reply case {case}: parser {got:?}, scanner {want:?}, input {raw:?}")
            })?;
        }

        let rating_table: &[(&str, ParseError)] = &[
            ("", ParseError::NoRatingFound),
            ("Rating: [[]]", ParseError::NoRatingFound),
            ("Rating: [[3]", ParseError::NoRatingFound),
            ("Rating: [[ 5]]", ParseError::NoRatingFound),
            ("Rating: [[11]]", ParseError::RatingOutOfRange(11)),
            ("Rating: [[12]] Rating: [[5]]", ParseError::RatingOutOfRange(12)),
            (
                "Rating: [[184467440737095516160]]",
                ParseError::RatingOutOfRange(u64::MAX),
            ),
        ];
        for (input, want) in rating_table {
            let got = parse_rating(input).expect_err("malformed verdicts are rejected");
            ensure(&got == want, || {
                format!("verdict {input:?}: got {got:?}, want {want:?}")
            })?;
        }

        let reply_table: &[(&str, ParseError)] = &[
            ("no braces at all", ParseError::NoObjectFound),
            ("{ unbalanced", ParseError::NoObjectFound),
            ("{\"improvement\": \"i\"}", ParseError::MissingKey("prompt")),
            ("{\"prompt\": \"p\"}", ParseError::MissingKey("improvement")),
            (
                "{\"improvement\": 3, \"prompt\": \"p\"}",
                ParseError::MissingKey("improvement"),
            ),
            (
                "{\"improvement\": \"i\", \"prompt\": 7}",
                ParseError::MissingKey("prompt"),
            ),
            (
                "{\"improvement\": \"i\", \"prompt\": \"\"}",
                ParseError::EmptyPrompt,
            ),
            (
                "{\"improvement\": \"i\", \"prompt\": \"   \"}",
                ParseError::EmptyPrompt,
            ),
        ];
        for (input, want) in reply_table {
            let got = parse_engineer_reply(input, &WhitespaceTokenizer)
                .expect_err("malformed replies are rejected");
            ensure(&got == want, || {
                format!("reply {input:?}: got {got:?}, want {want:?}")
            })?;
        }
        Ok(())
    });
}

#[test]
fn criterion_06_history_bound() {
    criterion(6, "history bound", || {
        let refs = single_reference(&["color-red", "shape-cube", "finish-metallic"]);
        let spy = Arc::new(SpyEngineer::new(SimEngineer::new(
            ScriptedPolicy::GreedyAddRemove {
                vocabulary: shuffled_vocabulary(6),
            },
        )));
        let bundle = BackendBundle {
            engineer: spy.clone(),
            ..greedy_bundle(&["red"])
        };
        let config = inversion_config(6, 2, 10);
        ensure(config.history_window == HISTORY_WINDOW, || {
            format!("default window is {}, expected {HISTORY_WINDOW}", config.history_window)
        })?;
        let mut sink = RecordingSink::default();
        engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
            .map_err(|e| e.to_string())?;

        ensure(spy.calls() == 20, || {
            format!("{} engineer calls, expected 20", spy.calls())
        })?;
        ensure(spy.max_refine_messages() == MAX_ENGINEER_MESSAGES, || {
            format!(
                "largest request held {} messages, expected the window to saturate at {}",
                spy.max_refine_messages(),
                MAX_ENGINEER_MESSAGES
            )
        })
    });
}

#[test]
fn criterion_07_retry_semantics() {
    criterion(7, "retry semantics", || {
        let refs = single_reference(&["color-red", "shape-cube"]);
        let config = inversion_config(7, 2, 3);
        ensure(config.retry_limit == RETRY_LIMIT, || {
            format!("default retry limit is {}, expected {RETRY_LIMIT}", config.retry_limit)
        })?;

        // Four injected failures: the fifth attempt lands inside the limit.
        let plan = FaultPlan::new().fail(&CallContext::refine(0, 2), RETRY_LIMIT - 1);
        let bundle = BackendBundle {
            generator: Arc::new(FlakyGenerator::new(SimGenerator::exact(codebook()), plan)),
            ..greedy_bundle(&["red", "cube"])
        };
        let mut sink = RecordingSink::default();
        let result = engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
            .map_err(|e| format!("recoverable run failed: {e}"))?;
        ensure(result.failed.is_empty(), || {
            format!("{} iterations failed under four faults", result.failed.len())
        })?;
        let record = result
            .records
            .iter()
            .find(|r| r.identity() == (0, 2))
            .ok_or("faulted iteration has no record")?;
        ensure(record.attempts_used == RETRY_LIMIT, || {
            format!("attempts_used {}, expected {RETRY_LIMIT}", record.attempts_used)
        })?;

        // Five injected failures: the iteration fails, the rest continue.
        let plan = FaultPlan::new().fail(&CallContext::refine(0, 2), RETRY_LIMIT);
        let bundle = BackendBundle {
            generator: Arc::new(FlakyGenerator::new(SimGenerator::exact(codebook()), plan)),
            ..greedy_bundle(&["red", "cube"])
        };
        let mut sink = RecordingSink::default();
        let result = engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
            .map_err(|e| format!("skip-policy run failed: {e}"))?;
        ensure(result.failed.len() == 1, || {
            format!("{} failed iterations, expected 1", result.failed.len())
        })?;
        ensure(
            result.failed[0].stream_id == 0 && result.failed[0].iteration == 2,
            || "the wrong iteration failed".to_string(),
        )?;
        let failures = sink.count(|e| matches!(e, EventBody::IterationFailed(_)));
        ensure(failures == 1, || format!("{failures} failure events, expected 1"))?;
        let completed: BTreeSet<(u32, u32)> =
            result.records.iter().map(|r| r.identity()).collect();
        let expected: BTreeSet<(u32, u32)> = [(0, 1), (0, 3), (1, 1), (1, 2), (1, 3)].into();
        ensure(completed == expected, || {
            format!("completed iterations {completed:?}, expected {expected:?}")
        })
    });
}

#[test]
fn criterion_08_clipping() {
    criterion(8, "clipping", || {
        let refs = single_reference(&["color-red", "shape-cube"]);
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prompts: Vec<String> = (0..5)
                .map(|i| {
                    let length = if i == 0 { 120 } else { rng.gen_range(40..=160) };
                    (0..length)
                        .map(|_| format!("w{}", rng.gen_range(0..1000)))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            ensure(
                prompts.iter().any(|p| p.split_whitespace().count() > CLIP_LIMIT),
                || "fuzzed script never exceeded the limit".to_string(),
            )?;

            let mut config = inversion_config(seed, 2, 5);
            config.clip_limit = Some(CLIP_LIMIT);
            let bundle = script_bundle(&prompts.iter().map(|s| s.as_str()).collect::<Vec<_>>());
            let mut sink = RecordingSink::default();
            let result = engine::run(&config, &refs, &bundle, &mut sink, ResumeState::default())
                .map_err(|e| format!("seed {seed}: {e}"))?;

            for record in &result.records {
                ensure(record.prompt.token_count() <= CLIP_LIMIT, || {
                    format!(
                        "seed {seed}: stored prompt of {} tokens at {:?}",
                        record.prompt.token_count(),
                        record.identity()
                    )
                })?;
            }
            for event in &sink.events {
                if let EventBody::EngineerReply(body) = event {
                    ensure(body.prompt_tokens as usize <= CLIP_LIMIT, || {
                        format!(
                            "seed {seed}: ledger prompt of {} tokens at ({}, {})",
                            body.prompt_tokens, body.stream_id, body.iteration
                        )
                    })?;
                }
            }
        }
        Ok(())
    });
}

fn clone_run_with_truncated_ledger(src: &Path, dst: &Path, ledger_prefix: &[u8]) {
    std::fs::create_dir_all(dst.join(OBJECTS_DIR)).expect("objects dir");
    for entry in std::fs::read_dir(src.join(OBJECTS_DIR)).expect("objects readable") {
        let entry = entry.expect("entry");
        std::fs::copy(entry.path(), dst.join(OBJECTS_DIR).join(entry.file_name()))
            .expect("object copies");
    }
    std::fs::write(dst.join(LEDGER_FILE), ledger_prefix).expect("ledger prefix writes");
}

#[test]
fn criterion_09_determinism_and_resume() {
    criterion(9, "determinism and resume", || {
        let refs = single_reference(&["color-red", "shape-cube", "finish-metallic"]);
        let config = inversion_config(9, 2, 4);
        let noisy_bundle = || BackendBundle {
            generator: Arc::new(SimGenerator::noisy(codebook(), 77, 0.15, 0.10)),
            ..greedy_bundle(&["red", "cube", "metallic", "blue", "sphere"])
        };

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut full = Vec::new();
        for name in ["a", "b"] {
            let run_dir = dir.path().join(name);
            let mut writer = writer_for(&run_dir, &config, &refs);
            engine::run(&config, &refs, &noisy_bundle(), &mut writer, ResumeState::default())
                .map_err(|e| format!("{name}: {e}"))?;
            drop(writer);
            full.push(ledger_bytes(&run_dir));
        }
        ensure(full[0] == full[1], || {
            "same-seed runs wrote different ledgers".to_string()
        })?;

        let reference = &full[0];
        let first_line_end = reference
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("ledger has no line break")?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for cut_index in 0..TRUNCATION_CUTS {
            let cut = rng.gen_range(first_line_end + 1..reference.len());
            let run_dir = dir.path().join(format!("cut-{cut_index}"));
            clone_run_with_truncated_ledger(&dir.path().join("a"), &run_dir, &reference[..cut]);

            let replayed = replay(&run_dir)
                .map_err(|e| format!("cut {cut}: replay failed: {e}"))?;
            let mut writer =
                RunWriter::resume(&run_dir, replayed.valid_len, replayed.next_seq, false)
                    .map_err(|e| format!("cut {cut}: reopen failed: {e}"))?;
            engine::run(&config, &refs, &noisy_bundle(), &mut writer, replayed.resume)
                .map_err(|e| format!("cut {cut}: resumed run failed: {e}"))?;
            drop(writer);

            ensure(&ledger_bytes(&run_dir) == reference, || {
                format!("cut at byte {cut} did not reproduce the ledger")
            })?;
        }
        Ok(())
    });
}

const INVERSION_ENGINEER_SHA256: &str =
    "fc87fea2bbca16bd0cda0cede999c405407039d25d87c6652e8c1da12de51ce7";
const INVERSION_JUDGE_SHA256: &str =
    "f6f950e0615b3df99e19bc5c741aba5963034bb4ad29f05cb534d389b9d2f9dc";
const SUBJECT_ENGINEER_SHA256: &str =
    "9a895b40218be3f6c06a06c1795fe187d7c3efd98a7a30077fcb6a934b98b6fb";
const SUBJECT_JUDGE_SHA256: &str =
    "4e82f67d6224ea7e75939667d24802c90b809d629f12bd7ffe9417936436d1ea";
const STYLE_ENGINEER_SHA256: &str =
    "7e4c6f460d868b4aad17e6aa361f54a2d2afb3e3c858038063b1a0a79044aa6c";
const STYLE_JUDGE_SHA256: &str =
    "4975dfd7c9a27a5042e7b1e9aeb44822d5b60970a8aea36794393482e6f3ec9f";

#[test]
fn criterion_10_wire_conformance() {
    criterion(10, "wire conformance", || {
        let generated = ImageHandle::new(
            vec![0xFF, 0xD8, 0xFF, 0xDB, 0x00, 0x43, 0x01, 0x02],
            MediaType::Jpeg,
            Provenance::Generated,
            "gen-1",
        )
        .expect("generated fixture image");
        let reference = ImageHandle::new(
            vec![0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x10, 0x4A, 0x46],
            MediaType::Jpeg,
            Provenance::Reference,
            "ref-1",
        )
        .expect("reference fixture image");
        let score = |v: u64| Score::new(v).expect("fixture score");

        fn compare<T: serde::Serialize>(
            name: &str,
            golden: &str,
            built: &T,
        ) -> Result<(), String> {
            let actual = serde_json::to_string(built).expect("payload serializes");
            ensure(actual == golden, || {
                format!("{name} diverged from its golden fixture\n got: {actual}\nwant: {golden}")
            })
        }

        compare(
            "kickoff turn",
            include_str!("fixtures/engineer_kickoff_turn.json"),
            &compose_kickoff_turn(&reference),
        )?;

        let history: Vec<(ChatMessage, String)> = vec![
            (
                compose_kickoff_turn(&reference),
                r#"{"improvement": "start with the subject", "prompt": "a red cube"}"#.to_string(),
            ),
            (
                compose_feedback_turn(&generated, &reference, score(3)),
                r#"{"improvement": "add the finish", "prompt": "a red metallic cube"}"#.to_string(),
            ),
            (
                compose_feedback_turn(&generated, &reference, score(6)),
                r#"{"improvement": "mention the lighting", "prompt": "a red metallic cube, studio lighting"}"#.to_string(),
            ),
        ];
        let messages = build_engineer_messages(
            "engineer-instructions",
            history.iter().map(|(turn, raw)| (turn, raw.as_str())),
            compose_feedback_turn(&generated, &reference, score(7)),
        );
        ensure(messages.len() == MAX_ENGINEER_MESSAGES, || {
            format!("{} messages assembled, expected {MAX_ENGINEER_MESSAGES}", messages.len())
        })?;
        compare(
            "engineer request",
            include_str!("fixtures/engineer_messages.json"),
            &messages,
        )?;

        compare(
            "judge request",
            include_str!("fixtures/judge_messages.json"),
            &build_judge_messages("judge-instructions", &generated, &reference),
        )?;

        let digests = [
            (TaskKind::DirectInversion, INVERSION_ENGINEER_SHA256, INVERSION_JUDGE_SHA256),
            (TaskKind::SubjectPersonalization, SUBJECT_ENGINEER_SHA256, SUBJECT_JUDGE_SHA256),
            (TaskKind::StylePersonalization, STYLE_ENGINEER_SHA256, STYLE_JUDGE_SHA256),
        ];
        for (task, engineer, judge) in digests {
            let asset = load_prompt_assets(task).map_err(|e| e.to_string())?;
            ensure(asset.engineer_digest() == engineer, || {
                format!("{task} engineer instructions changed: {}", asset.engineer_digest())
            })?;
            ensure(asset.judge_digest() == judge, || {
                format!("{task} judge instructions changed: {}", asset.judge_digest())
            })?;
        }
        Ok(())
    });
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, items, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut items, &mut out);
    out
}

fn tie_candidate(stream_id: u32, iteration: u32, words: usize) -> CandidateRecord {
    let text = (0..words).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    let image = |provenance, id: &str| {
        ImageHandle::new(vec![0xFF, 0xD8, 0xFF, 0xD9], MediaType::Jpeg, provenance, id)
            .expect("fixture image")
    };
    CandidateRecord {
        stream_id,
        iteration,
        prompt: Prompt::new(text, &WhitespaceTokenizer).expect("fixture prompt"),
        generated: image(Provenance::Generated, "gen"),
        reference_used: image(Provenance::Reference, "ref"),
        in_iteration_score: Score::new(8).expect("fixture score"),
        attempts_used: 1,
    }
}

#[test]
fn criterion_11_tie_break_rule() {
    criterion(11, "tie-break rule", || {
        // Equal totals under different rational representations; one
        // uniquely shortest prompt.
        let total = |numer: u64, denom: u64| {
            TotalScore::new(numer, denom, ScoreBasis::MeanOverReferences).expect("fixture total")
        };
        let by_length: Vec<(CandidateRecord, TotalScore)> = vec![
            (tie_candidate(0, 1, 5), total(8, 1)),
            (tie_candidate(1, 2, 2), total(16, 2)),
            (tie_candidate(2, 3, 9), total(24, 3)),
            (tie_candidate(3, 4, 3), total(40, 5)),
            (tie_candidate(4, 5, 7), total(80, 10)),
        ];
        for order in permutations(by_length.len()) {
            let shuffled: Vec<(CandidateRecord, TotalScore)> =
                order.iter().map(|&i| by_length[i].clone()).collect();
            let winner = select_final(&shuffled).map_err(|e| e.to_string())?;
            ensure(winner.0.identity() == (1, 2), || {
                format!(
                    "order {order:?}: picked {:?} with {} tokens, expected the 2-token prompt",
                    winner.0.identity(),
                    winner.0.prompt.token_count()
                )
            })?;
        }

        // Equal totals and equal lengths: the smallest (stream, iteration)
        // identity wins.
        let by_identity: Vec<(CandidateRecord, TotalScore)> = vec![
            (tie_candidate(2, 3, 2), total(8, 1)),
            (tie_candidate(0, 9, 2), total(16, 2)),
            (tie_candidate(1, 4, 2), total(24, 3)),
            (tie_candidate(0, 12, 2), total(40, 5)),
            (tie_candidate(3, 1, 2), total(80, 10)),
        ];
        for order in permutations(by_identity.len()) {
            let shuffled: Vec<(CandidateRecord, TotalScore)> =
                order.iter().map(|&i| by_identity[i].clone()).collect();
            let winner = select_final(&shuffled).map_err(|e| e.to_string())?;
            ensure(winner.0.identity() == (0, 9), || {
                format!("order {order:?}: picked {:?}, expected (0, 9)", winner.0.identity())
            })?;
        }
        Ok(())
    });
}
