//! System-prompt assets shipped with the crate.
//!
//! The engineer and judge instruction texts are data, not code: they are
//! embedded verbatim from `assets/` and integrity-checked against pinned
//! SHA-256 digests on every load, so an accidental edit fails loudly instead
//! of silently changing model behaviour.

use hex::encode as hex_encode;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tasks::TaskKind;

const SUBJECT_ENGINEER: &str = include_str!("../../assets/subject_engineer.txt");
const SUBJECT_JUDGE: &str = include_str!("../../assets/subject_judge.txt");
const STYLE_ENGINEER: &str = include_str!("../../assets/style_engineer.txt");
const STYLE_JUDGE: &str = include_str!("../../assets/style_judge.txt");
const INVERSION_ENGINEER: &str = include_str!("../../assets/inversion_engineer.txt");
const INVERSION_JUDGE: &str = include_str!("../../assets/inversion_judge.txt");

const SUBJECT_ENGINEER_SHA256: &str =
    "9a895b40218be3f6c06a06c1795fe187d7c3efd98a7a30077fcb6a934b98b6fb";
const SUBJECT_JUDGE_SHA256: &str =
    "4e82f67d6224ea7e75939667d24802c90b809d629f12bd7ffe9417936436d1ea";
const STYLE_ENGINEER_SHA256: &str =
    "7e4c6f460d868b4aad17e6aa361f54a2d2afb3e3c858038063b1a0a79044aa6c";
const STYLE_JUDGE_SHA256: &str =
    "4975dfd7c9a27a5042e7b1e9aeb44822d5b60970a8aea36794393482e6f3ec9f";
const INVERSION_ENGINEER_SHA256: &str =
    "fc87fea2bbca16bd0cda0cede999c405407039d25d87c6652e8c1da12de51ce7";
const INVERSION_JUDGE_SHA256: &str =
    "f6f950e0615b3df99e19bc5c741aba5963034bb4ad29f05cb534d389b9d2f9dc";

/// Generation prefixes for subject personalization, in the order the
/// engineer instructions enumerate them. Index 0 is the default.
const SUBJECT_PREFIXES: [&str; 5] = [
    "a photo of a ",
    "photo-realistic ",
    "a close-up picture of ",
    "create a illustration of ",
    "a picture of ",
];

/// Generation prefixes for style personalization.
const STYLE_PREFIXES: [&str; 5] = [
    "a painting in the style of ",
    "a picture in the style of ",
    "a close-up painting in the style of ",
    "a rendition in the style of ",
    "a weird painting in the style of ",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssetError {
    #[error("asset {name} failed integrity check: expected sha256 {expected}, got {actual}")]
    ChecksumMismatch {
        name: &'static str,
        expected: &'static str,
        actual: String,
    },
}

/// Instruction texts and generation prefixes for one task kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemPromptAsset {
    pub task: TaskKind,
    pub engineer_text: &'static str,
    pub judge_text: &'static str,
    /// Prefixes prepended to candidate prompts before generation. Empty for
    /// direct inversion, which sends the prompt bare.
    pub prefix_examples: Vec<&'static str>,
}

impl SystemPromptAsset {
    /// The generation prefix at `index`, or `""` when the task uses none.
    pub fn prefix(&self, index: usize) -> Result<&'static str, AssetError> {
        if self.prefix_examples.is_empty() {
            return Ok("");
        }
        // Index validity is a config concern; loader guarantees non-empty here.
        Ok(self.prefix_examples[index % self.prefix_examples.len()])
    }

    pub fn engineer_digest(&self) -> String {
        hex_encode(Sha256::digest(self.engineer_text.as_bytes()))
    }

    pub fn judge_digest(&self) -> String {
        hex_encode(Sha256::digest(self.judge_text.as_bytes()))
    }
}

fn verify(name: &'static str, text: &'static str, expected: &'static str) -> Result<(), AssetError> {
    let actual = hex_encode(Sha256::digest(text.as_bytes()));
    if actual != expected {
        return Err(AssetError::ChecksumMismatch { name, expected, actual });
    }
    Ok(())
}

/// Loads the verified instruction assets for `task`.
pub fn load_prompt_assets(task: TaskKind) -> Result<SystemPromptAsset, AssetError> {
    let asset = match task {
        TaskKind::SubjectPersonalization => {
            verify("subject_engineer", SUBJECT_ENGINEER, SUBJECT_ENGINEER_SHA256)?;
            verify("subject_judge", SUBJECT_JUDGE, SUBJECT_JUDGE_SHA256)?;
            SystemPromptAsset {
                task,
                engineer_text: SUBJECT_ENGINEER,
                judge_text: SUBJECT_JUDGE,
                prefix_examples: SUBJECT_PREFIXES.to_vec(),
            }
        }
        TaskKind::StylePersonalization => {
            verify("style_engineer", STYLE_ENGINEER, STYLE_ENGINEER_SHA256)?;
            verify("style_judge", STYLE_JUDGE, STYLE_JUDGE_SHA256)?;
            SystemPromptAsset {
                task,
                engineer_text: STYLE_ENGINEER,
                judge_text: STYLE_JUDGE,
                prefix_examples: STYLE_PREFIXES.to_vec(),
            }
        }
        TaskKind::DirectInversion => {
            verify("inversion_engineer", INVERSION_ENGINEER, INVERSION_ENGINEER_SHA256)?;
            verify("inversion_judge", INVERSION_JUDGE, INVERSION_JUDGE_SHA256)?;
            SystemPromptAsset {
                task,
                engineer_text: INVERSION_ENGINEER,
                judge_text: INVERSION_JUDGE,
                prefix_examples: Vec::new(),
            }
        }
    };
    Ok(asset)
}
