//! Engine for inverting images into prompts.
//!
//! Given a set of reference images and three black-box collaborators (a
//! prompt engineer model, a text-to-image generator and a similarity judge),
//! the engine runs parallel streams of judged refinement iterations, then
//! re-evaluates the best candidates and returns the prompt that reproduces
//! the references most faithfully.
//!
//! Module map:
//! - [`domain`], [`parse`], [`select`]: core types, completion parsers, ranking
//! - [`backends`]: collaborator traits, chat wire format, prompt assets, HTTP
//! - [`engine`]: the refinement loop itself
//! - [`tasks`]: task kinds, re-evaluation policies, eval-prompt composition
//! - [`simworld`]: a deterministic attribute-set world used as a test oracle
//! - [`store`]: append-only run ledger, replay/resume, reporting, config

pub mod backends;
pub mod domain;
pub mod engine;
pub mod parse;
pub mod seeds;
pub mod select;
pub mod simworld;
pub mod store;
pub mod tasks;

pub use domain::{
    CandidateRecord, DomainError, EngineerReply, ImageHandle, JudgeVerdict, MediaType, Prompt,
    Provenance, ReferenceSet, Score, ScoreBasis, TokenCounter, TotalScore, WhitespaceTokenizer,
};
pub use parse::{parse_engineer_reply, parse_rating, ParseError};
pub use select::{likelihood_proxy, select_final, select_top_c, SelectError};
