//! Scripted collaborators for the simulated world.
//!
//! All three are stateless: every reply is a pure function of the call
//! context and the visible messages, so retries, resumption and parallel
//! streams cannot desynchronize them.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::wire::{ChatMessage, ContentPart, Role};
use crate::backends::{BackendError, CallContext, CallPurpose, ChatBackend, ImageGenerator};
use crate::domain::{ImageHandle, Provenance, WhitespaceTokenizer};
use crate::parse::parse_engineer_reply;
use crate::seeds::mix_seed;
use crate::simworld::{sim_judge, AttributeImage, Codebook};

/// Domain tag for generation noise, distinct from the engine's tags.
const DOMAIN_GEN_NOISE: u64 = 0x6e_6f_69_73_65; // "noise"

/// How the simulated engineer writes prompts.
#[derive(Debug, Clone)]
pub enum ScriptedPolicy {
    /// Tries one vocabulary token per iteration, keeping it when the score
    /// did not drop and reverting it otherwise. Converges to a perfect
    /// prompt whenever the vocabulary covers the reference.
    GreedyAddRemove { vocabulary: Vec<String> },
    /// Replays a fixed list of prompts, repeating the last one when the
    /// iterations outnumber the script.
    FixedScript { prompts: Vec<String> },
}

/// A deterministic engineer. Replies are well-formed JSON objects in the
/// expected reply shape; distillation requests echo the prompt to shorten.
pub struct SimEngineer {
    policy: ScriptedPolicy,
}

impl SimEngineer {
    pub fn new(policy: ScriptedPolicy) -> Self {
        match &policy {
            ScriptedPolicy::GreedyAddRemove { vocabulary } => {
                assert!(!vocabulary.is_empty(), "greedy policy needs a vocabulary");
                for word in vocabulary {
                    assert!(
                        !word.is_empty() && !word.chars().any(char::is_whitespace),
                        "vocabulary entries must be single tokens, got {word:?}"
                    );
                }
            }
            ScriptedPolicy::FixedScript { prompts } => {
                assert!(!prompts.is_empty(), "fixed script needs at least one prompt");
                assert!(
                    prompts.iter().all(|p| !p.trim().is_empty()),
                    "scripted prompts must be non-empty"
                );
            }
        }
        SimEngineer { policy }
    }

    fn reply(improvement: &str, prompt: &str) -> String {
        serde_json::json!({ "improvement": improvement, "prompt": prompt }).to_string()
    }

    fn propose_greedy(vocabulary: &[String], iteration: u32, messages: &[ChatMessage]) -> String {
        let current_score = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .and_then(|m| extract_score(&m.text()));

        // The accepted prompt so far, derived from the last own reply and the
        // score movement it caused.
        let base = match (last_assistant_prompt(messages), current_score) {
            (None, _) | (_, None) => String::new(),
            (Some(previous), Some(current)) => {
                let before = score_before_last_reply(messages).unwrap_or(-1);
                if current >= before {
                    previous
                } else {
                    strip_last_token(&previous)
                }
            }
        };

        let candidate = iteration
            .checked_sub(1)
            .and_then(|i| vocabulary.get(i as usize));
        match candidate {
            Some(token) if base.is_empty() => Self::reply(&format!("starting with '{token}'"), token),
            Some(token) => Self::reply(
                &format!("trying '{token}' on top of what worked"),
                &format!("{base} {token}"),
            ),
            None if base.is_empty() => {
                let token = vocabulary.last().expect("vocabulary is non-empty");
                Self::reply("vocabulary exhausted, restating the last candidate", token)
            }
            None => Self::reply("vocabulary exhausted, keeping what worked", &base),
        }
    }

    fn propose_scripted(prompts: &[String], iteration: u32) -> String {
        let index = (iteration.saturating_sub(1) as usize).min(prompts.len() - 1);
        Self::reply(&format!("scripted step {iteration}"), &prompts[index])
    }

    fn distill(messages: &[ChatMessage]) -> Result<String, BackendError> {
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Transport("distill request without a user turn".into()))?;
        let prompt_part = user
            .content
            .iter()
            .filter_map(|part| match part {
                ContentPart::Text { text } => Some(text.clone()),
                ContentPart::ImageUrl { .. } => None,
            })
            .last()
            .ok_or_else(|| BackendError::Transport("distill request without text".into()))?;
        Ok(prompt_part)
    }
}

impl ChatBackend for SimEngineer {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        _max_tokens: u32,
    ) -> Result<String, BackendError> {
        if ctx.purpose == CallPurpose::Distill {
            return Self::distill(messages);
        }
        let raw = match &self.policy {
            ScriptedPolicy::GreedyAddRemove { vocabulary } => {
                Self::propose_greedy(vocabulary, ctx.iteration, messages)
            }
            ScriptedPolicy::FixedScript { prompts } => {
                Self::propose_scripted(prompts, ctx.iteration)
            }
        };
        Ok(raw)
    }
}

/// Score embedded in a feedback turn, if any. Kickoff turns have none.
fn extract_score(text: &str) -> Option<i64> {
    let pos = text.find("SCORE: ")?;
    let digits: String = text[pos + "SCORE: ".len()..]
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

/// The prompt proposed in the most recent own reply, if parseable.
fn last_assistant_prompt(messages: &[ChatMessage]) -> Option<String> {
    let last = messages.iter().rev().find(|m| m.role == Role::Assistant)?;
    parse_engineer_reply(&last.text(), &WhitespaceTokenizer)
        .ok()
        .map(|reply| reply.prompt.text().to_string())
}

/// The score that preceded the most recent own reply: the feedback in the
/// user turn right before it. Absent when that turn was a kickoff.
fn score_before_last_reply(messages: &[ChatMessage]) -> Option<i64> {
    let last_assistant = messages.iter().rposition(|m| m.role == Role::Assistant)?;
    messages[..last_assistant]
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .and_then(|m| extract_score(&m.text()))
}

fn strip_last_token(prompt: &str) -> String {
    match prompt.rsplit_once(char::is_whitespace) {
        Some((rest, _)) => rest.trim_end().to_string(),
        None => String::new(),
    }
}

/// A deterministic generator: renders prompts through the codebook, with
/// optional seeded attribute dropout and spurious additions.
pub struct SimGenerator {
    codebook: Arc<Codebook>,
    world_seed: u64,
    dropout: f64,
    spurious: f64,
    spurious_pool: Vec<String>,
}

impl SimGenerator {
    /// Noise-free generator: the image is exactly the rendered prompt.
    pub fn exact(codebook: Arc<Codebook>) -> Self {
        Self::noisy(codebook, 0, 0.0, 0.0)
    }

    /// Generator with seeded noise. Each rendered attribute is dropped with
    /// probability `dropout`; each other codebook attribute is added with
    /// probability `spurious`. Noise depends only on the seed and the call
    /// context, so retries of the same call reproduce the same image.
    pub fn noisy(codebook: Arc<Codebook>, world_seed: u64, dropout: f64, spurious: f64) -> Self {
        assert!((0.0..=1.0).contains(&dropout), "dropout must be a probability");
        assert!((0.0..=1.0).contains(&spurious), "spurious must be a probability");
        let spurious_pool = codebook.all_attributes();
        SimGenerator { codebook, world_seed, dropout, spurious, spurious_pool }
    }
}

impl ImageGenerator for SimGenerator {
    fn generate(&self, ctx: &CallContext, request_text: &str) -> Result<ImageHandle, BackendError> {
        let rendered = self.codebook.render(request_text);
        let image = if self.dropout == 0.0 && self.spurious == 0.0 {
            rendered
        } else {
            let parts = ctx.seed_components();
            let seed = mix_seed(
                self.world_seed,
                &[DOMAIN_GEN_NOISE, parts[0], parts[1], parts[2], parts[3]],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut attrs: Vec<String> = Vec::new();
            for attr in rendered.attrs() {
                if rng.gen::<f64>() >= self.dropout {
                    attrs.push(attr.clone());
                }
            }
            for attr in &self.spurious_pool {
                if rng.gen::<f64>() < self.spurious {
                    attrs.push(attr.clone());
                }
            }
            AttributeImage::new(attrs)
        };
        let origin = format!("sim-gen-s{}-i{}", ctx.stream_id, ctx.iteration);
        Ok(image.to_handle(Provenance::Generated, origin))
    }
}

/// A deterministic judge: decodes the two attribute images from the request
/// and scores their Jaccard overlap.
pub struct SimJudge;

impl ChatBackend for SimJudge {
    fn complete(
        &self,
        _ctx: &CallContext,
        messages: &[ChatMessage],
        _max_tokens: u32,
    ) -> Result<String, BackendError> {
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Transport("judge request without a user turn".into()))?;
        let mut images = Vec::new();
        for part in &user.content {
            if let ContentPart::ImageUrl { image_url } = part {
                let (_, bytes) = crate::backends::wire::decode_data_url(&image_url.url)?;
                let image = AttributeImage::from_bytes(&bytes)
                    .map_err(|e| BackendError::Transport(format!("undecodable image: {e}")))?;
                images.push(image);
            }
        }
        if images.len() != 2 {
            return Err(BackendError::Transport(format!(
                "judge expected two images, got {}",
                images.len()
            )));
        }
        let score = sim_judge(&images[0], &images[1]);
        Ok(format!("Rating: [[{}]]", score.value()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::wire::{
        build_judge_messages, compose_feedback_turn, compose_kickoff_turn,
    };
    use crate::domain::Score;

    fn greedy(vocab: &[&str]) -> SimEngineer {
        SimEngineer::new(ScriptedPolicy::GreedyAddRemove {
            vocabulary: vocab.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn prompt_of(raw: &str) -> String {
        parse_engineer_reply(raw, &WhitespaceTokenizer)
            .unwrap()
            .prompt
            .text()
            .to_string()
    }

    fn handle(attrs: &[&str], origin: &str) -> ImageHandle {
        AttributeImage::new(attrs.iter().map(|s| s.to_string()))
            .to_handle(Provenance::Generated, origin)
    }

    #[test]
    fn greedy_starts_with_the_first_vocabulary_token() {
        let engineer = greedy(&["dog", "red", "hat"]);
        let kickoff = compose_kickoff_turn(&handle(&["x"], "ref"));
        let raw = engineer
            .complete(&CallContext::refine(0, 1), &[kickoff], 500)
            .unwrap();
        assert_eq!(prompt_of(&raw), "dog");
    }

    #[test]
    fn greedy_keeps_improvements_and_reverts_regressions() {
        let engineer = greedy(&["dog", "red", "hat"]);
        let generated = handle(&["g"], "gen");
        let reference = handle(&["r"], "ref");

        // Iteration 2: previous reply "dog" scored 5 after a kickoff. The
        // kickoff had no score, so 5 counts as an improvement and the next
        // token is stacked on top.
        let messages = vec![
            compose_kickoff_turn(&reference),
            ChatMessage::assistant(SimEngineer::reply("start", "dog")),
            compose_feedback_turn(&generated, &reference, Score::new(5).unwrap()),
        ];
        let raw = engineer.complete(&CallContext::refine(0, 2), &messages, 500).unwrap();
        assert_eq!(prompt_of(&raw), "dog red");

        // Iteration 3: "dog red" dropped the score from 5 to 3, so "red" is
        // reverted before trying "hat".
        let messages = vec![
            compose_feedback_turn(&generated, &reference, Score::new(5).unwrap()),
            ChatMessage::assistant(SimEngineer::reply("try", "dog red")),
            compose_feedback_turn(&generated, &reference, Score::new(3).unwrap()),
        ];
        let raw = engineer.complete(&CallContext::refine(0, 3), &messages, 500).unwrap();
        assert_eq!(prompt_of(&raw), "dog hat");

        // Same iteration but the score held steady: the token stays.
        let messages = vec![
            compose_feedback_turn(&generated, &reference, Score::new(5).unwrap()),
            ChatMessage::assistant(SimEngineer::reply("try", "dog red")),
            compose_feedback_turn(&generated, &reference, Score::new(5).unwrap()),
        ];
        let raw = engineer.complete(&CallContext::refine(0, 3), &messages, 500).unwrap();
        assert_eq!(prompt_of(&raw), "dog red hat");
    }

    #[test]
    fn greedy_keeps_the_base_once_the_vocabulary_runs_out() {
        let engineer = greedy(&["dog"]);
        let generated = handle(&["g"], "gen");
        let reference = handle(&["r"], "ref");
        let messages = vec![
            compose_kickoff_turn(&reference),
            ChatMessage::assistant(SimEngineer::reply("start", "dog")),
            compose_feedback_turn(&generated, &reference, Score::new(9).unwrap()),
        ];
        let raw = engineer.complete(&CallContext::refine(0, 2), &messages, 500).unwrap();
        assert_eq!(prompt_of(&raw), "dog");
    }

    #[test]
    fn fixed_script_replays_and_repeats_the_last_prompt() {
        let engineer = SimEngineer::new(ScriptedPolicy::FixedScript {
            prompts: vec!["first".into(), "second".into()],
        });
        let kickoff = compose_kickoff_turn(&handle(&["x"], "ref"));
        for (iteration, expected) in [(1, "first"), (2, "second"), (7, "second")] {
            let raw = engineer
                .complete(&CallContext::refine(0, iteration), &[kickoff.clone()], 500)
                .unwrap();
            assert_eq!(prompt_of(&raw), expected, "iteration {iteration}");
        }
    }

    #[test]
    fn distill_echoes_the_prompt_to_shorten() {
        let engineer = greedy(&["dog"]);
        let ctx = CallContext { stream_id: 0, iteration: 0, purpose: CallPurpose::Distill };
        let messages = vec![ChatMessage {
            role: Role::User,
            content: vec![
                ContentPart::Text { text: "make this shorter".into() },
                ContentPart::Text { text: "a very long prompt".into() },
            ],
        }];
        let raw = engineer.complete(&ctx, &messages, 500).unwrap();
        assert_eq!(raw, "a very long prompt");
    }

    #[test]
    fn exact_generator_renders_the_codebook_union() {
        let book = Arc::new(Codebook::parse("dog: tail, bark\nred: red color").unwrap());
        let generator = SimGenerator::exact(book);
        let image = generator
            .generate(&CallContext::refine(0, 1), "a photo of a red dog")
            .unwrap();
        let decoded = AttributeImage::from_handle(&image).unwrap();
        assert_eq!(decoded.attrs().len(), 3);
        assert!(decoded.attrs().contains("red color"));
    }

    #[test]
    fn noisy_generator_is_deterministic_per_call_site() {
        let book = Arc::new(Codebook::parse("dog: tail, bark, fur, paws").unwrap());
        let generator = SimGenerator::noisy(book.clone(), 42, 0.5, 0.0);
        let a = generator.generate(&CallContext::refine(1, 2), "dog").unwrap();
        let b = generator.generate(&CallContext::refine(1, 2), "dog").unwrap();
        assert_eq!(a.digest(), b.digest(), "same call site, same image");

        let other_world = SimGenerator::noisy(book, 43, 0.5, 0.0);
        let c = other_world.generate(&CallContext::refine(1, 2), "dog").unwrap();
        // Different world seeds are allowed to agree by chance on tiny sets,
        // but dropping all four attributes at 0.5 on both seeds is unlikely;
        // assert only on the documented contract: determinism per seed.
        let c2 = other_world.generate(&CallContext::refine(1, 2), "dog").unwrap();
        assert_eq!(c.digest(), c2.digest());
    }

    #[test]
    fn full_dropout_renders_blank() {
        let book = Arc::new(Codebook::parse("dog: tail, bark").unwrap());
        let generator = SimGenerator::noisy(book, 7, 1.0, 0.0);
        let image = generator.generate(&CallContext::refine(0, 1), "dog").unwrap();
        assert_eq!(image.bytes(), b"{blank}");
    }

    #[test]
    fn judge_scores_the_image_pair_in_request_order() {
        let generated = handle(&["a", "b"], "gen");
        let reference = handle(&["a", "b", "c"], "ref");
        let messages = build_judge_messages("judge instructions", &generated, &reference);
        let raw = SimJudge.complete(&CallContext::refine(0, 1), &messages, 128).unwrap();
        assert_eq!(raw, "Rating: [[7]]");
    }
}
