//! Operator configuration: one JSON document that picks the backends and
//! overrides engine defaults.
//!
//! Every engine field is optional in the document; unset fields take the
//! task's defaults. Credentials never live in the document alone: the API
//! key environment variable always wins, and endpoint URLs fall back to
//! environment variables when the document leaves them out.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::http::{HttpChatBackend, HttpEndpoint, HttpImageBackend};
use crate::backends::BackendBundle;
use crate::domain::{ImageHandle, MediaType, Provenance, ReferenceSet};
use crate::engine::{EngineError, FailurePolicy, RunConfig};
use crate::simworld::{AttributeImage, Codebook, ScriptedPolicy, SimEngineer, SimGenerator, SimJudge};
use crate::tasks::{ReevalPolicy, TaskKind};

pub const ENGINEER_URL_ENV: &str = "PROMPTFORGE_ENGINEER_URL";
pub const GENERATOR_URL_ENV: &str = "PROMPTFORGE_GENERATOR_URL";
pub const JUDGE_URL_ENV: &str = "PROMPTFORGE_JUDGE_URL";
pub const API_KEY_ENV: &str = "PROMPTFORGE_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] EngineError),
    #[error("backend setup failed: {0}")]
    Backend(String),
    #[error("no usable reference images in {0}")]
    NoReferences(PathBuf),
    #[error("template file {path}, line {line}: {message}")]
    Template { path: PathBuf, line: usize, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(EngineError::Validation {
        field: field.to_string(),
        message: message.into(),
    })
}

/// Distinguishes an absent field (outer `None`) from an explicit `null`
/// (inner `None`). Plain `Option<Option<T>>` folds both into `None`.
fn present_field<'de, T, D>(deserializer: D) -> Result<Option<Option<T>>, D::Error>
where
    T: Deserialize<'de>,
    D: serde::Deserializer<'de>,
{
    Option::<T>::deserialize(deserializer).map(Some)
}

/// The run document. All engine fields are optional overrides; `backends`
/// is required because a run cannot proceed without one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streams: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_c: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reeval: Option<ReevalPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_engineer_tokens: Option<u32>,
    /// Absent keeps the default cap; an explicit `null` disables clipping.
    #[serde(
        default,
        deserialize_with = "present_field",
        skip_serializing_if = "Option::is_none"
    )]
    pub clip_limit: Option<Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_iteration_failure: Option<FailurePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    /// Flush every ledger append to disk before acknowledging it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<bool>,
    pub backends: BackendSpec,
}

/// Values the command line may force over the document.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub task: Option<TaskKind>,
    pub seed: Option<u64>,
    pub streams: Option<u32>,
    pub iterations: Option<u32>,
    pub top_c: Option<u32>,
    pub deterministic: Option<bool>,
}

impl RunDocument {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = read_file(path)?;
        Self::parse(&text)
    }

    /// Captures a resolved configuration back into a document. Resolving the
    /// result without overrides returns the same configuration.
    pub fn from_config(config: &RunConfig, backends: BackendSpec) -> Self {
        RunDocument {
            task: Some(config.task),
            seed: Some(config.seed),
            streams: Some(config.streams),
            iterations: Some(config.iterations),
            top_c: Some(config.top_c),
            reeval: Some(config.reeval),
            retry_limit: Some(config.retry_limit),
            max_engineer_tokens: Some(config.max_engineer_tokens),
            clip_limit: Some(config.clip_limit),
            history_window: Some(config.history_window),
            prefix_index: Some(config.prefix_index),
            on_iteration_failure: Some(config.on_iteration_failure),
            deterministic: Some(config.deterministic),
            sync: None,
            backends,
        }
    }

    /// Merges overrides, document values and task defaults, in that order,
    /// into a validated configuration.
    pub fn resolve(&self, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
        let task = overrides
            .task
            .or(self.task)
            .unwrap_or(TaskKind::DirectInversion);
        let seed = overrides.seed.or(self.seed).unwrap_or(0);
        let mut config = RunConfig::for_task(task, seed);
        if let Some(v) = overrides.streams.or(self.streams) {
            config.streams = v;
        }
        if let Some(v) = overrides.iterations.or(self.iterations) {
            config.iterations = v;
        }
        if let Some(v) = overrides.top_c.or(self.top_c) {
            config.top_c = v;
        }
        if let Some(v) = self.reeval {
            config.reeval = v;
        }
        if let Some(v) = self.retry_limit {
            config.retry_limit = v;
        }
        if let Some(v) = self.max_engineer_tokens {
            config.max_engineer_tokens = v;
        }
        if let Some(v) = self.clip_limit {
            config.clip_limit = v;
        }
        if let Some(v) = self.history_window {
            config.history_window = v;
        }
        if let Some(v) = self.prefix_index {
            config.prefix_index = v;
        }
        if let Some(v) = self.on_iteration_failure {
            config.on_iteration_failure = v;
        }
        if let Some(v) = overrides.deterministic.or(self.deterministic) {
            config.deterministic = v;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Which implementations stand behind the three roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// The deterministic attribute-set world; no network access.
    Simworld {
        /// Path to the codebook file, relative to the config file.
        codebook: PathBuf,
        engineer: EngineerSpec,
        #[serde(default)]
        world_seed: u64,
        /// Probability that a rendered attribute is dropped.
        #[serde(default)]
        dropout: f64,
        /// Probability that an unrelated attribute is added.
        #[serde(default)]
        spurious: f64,
    },
    /// Live chat-completions and image endpoints.
    Http {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        engineer_url: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        generator_url: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        judge_url: Option<String>,
        engineer_model: String,
        generator_model: String,
        judge_model: String,
        /// Fallback only; the environment variable always wins.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_request_interval_ms: Option<u64>,
        #[serde(default = "default_media_type")]
        generated_media_type: MediaType,
    },
}

impl BackendSpec {
    /// Copy with credentials removed, safe to persist.
    pub fn sanitized(&self) -> BackendSpec {
        match self {
            BackendSpec::Http { api_key: Some(_), .. } => {
                let mut spec = self.clone();
                if let BackendSpec::Http { api_key, .. } = &mut spec {
                    *api_key = None;
                }
                spec
            }
            other => other.clone(),
        }
    }

    /// Copy with file paths resolved against `base`, so the spec stays
    /// usable after it is persisted away from the config file.
    pub fn absolutized(&self, base: &Path) -> BackendSpec {
        match self {
            BackendSpec::Simworld { codebook, .. } if codebook.is_relative() => {
                let mut spec = self.clone();
                if let BackendSpec::Simworld { codebook, .. } = &mut spec {
                    *codebook = base.join(&*codebook);
                }
                spec
            }
            other => other.clone(),
        }
    }
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_media_type() -> MediaType {
    MediaType::Png
}

/// Scripted engineer behavior for simworld runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineerSpec {
    GreedyAddRemove { vocabulary: Vec<String> },
    FixedScript { prompts: Vec<String> },
}

/// Instantiates the three backends described by `spec`. Relative paths are
/// resolved against `base_dir`, normally the config file's directory.
pub fn build_bundle(spec: &BackendSpec, base_dir: &Path) -> Result<BackendBundle, ConfigError> {
    match spec {
        BackendSpec::Simworld { codebook, engineer, world_seed, dropout, spurious } => {
            for (field, value) in [("dropout", *dropout), ("spurious", *spurious)] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(invalid(field, format!("{value} is outside 0.0..=1.0")));
                }
            }
            let policy = match engineer {
                EngineerSpec::GreedyAddRemove { vocabulary } => {
                    if vocabulary.is_empty() {
                        return Err(invalid("engineer.vocabulary", "must not be empty"));
                    }
                    if let Some(bad) = vocabulary.iter().find(|t| t.split_whitespace().count() != 1)
                    {
                        return Err(invalid(
                            "engineer.vocabulary",
                            format!("entry {bad:?} is not a single token"),
                        ));
                    }
                    ScriptedPolicy::GreedyAddRemove { vocabulary: vocabulary.clone() }
                }
                EngineerSpec::FixedScript { prompts } => {
                    if prompts.is_empty() || prompts.iter().any(|p| p.trim().is_empty()) {
                        return Err(invalid("engineer.prompts", "needs non-empty prompts"));
                    }
                    ScriptedPolicy::FixedScript { prompts: prompts.clone() }
                }
            };
            let path = base_dir.join(codebook);
            let codebook = Arc::new(
                Codebook::from_file(&path)
                    .map_err(|e| ConfigError::Backend(format!("codebook {}: {e}", path.display())))?,
            );
            let generator = if *dropout == 0.0 && *spurious == 0.0 {
                SimGenerator::exact(Arc::clone(&codebook))
            } else {
                SimGenerator::noisy(Arc::clone(&codebook), *world_seed, *dropout, *spurious)
            };
            Ok(BackendBundle {
                engineer: Arc::new(SimEngineer::new(policy)),
                generator: Arc::new(generator),
                judge: Arc::new(SimJudge),
            })
        }
        BackendSpec::Http {
            engineer_url,
            generator_url,
            judge_url,
            engineer_model,
            generator_model,
            judge_model,
            api_key,
            timeout_secs,
            min_request_interval_ms,
            generated_media_type,
        } => {
            let api_key = env_value(API_KEY_ENV).or_else(|| api_key.clone());
            let timeout = Duration::from_secs(*timeout_secs);
            let interval = min_request_interval_ms.map(Duration::from_millis);
            let endpoint = |url: &Option<String>, env_key: &str, model: &str, field: &str| {
                let url = url
                    .clone()
                    .or_else(|| env_value(env_key))
                    .ok_or_else(|| invalid(field, format!("set it in the config or via {env_key}")))?;
                Ok::<_, ConfigError>(HttpEndpoint {
                    url,
                    model: model.to_string(),
                    api_key: api_key.clone(),
                    timeout,
                    min_request_interval: interval,
                })
            };
            let engineer = HttpChatBackend::new(endpoint(
                engineer_url,
                ENGINEER_URL_ENV,
                engineer_model,
                "engineer_url",
            )?)
            .map_err(|e| ConfigError::Backend(e.to_string()))?;
            let judge = HttpChatBackend::new(endpoint(judge_url, JUDGE_URL_ENV, judge_model, "judge_url")?)
                .map_err(|e| ConfigError::Backend(e.to_string()))?;
            let generator = HttpImageBackend::new(
                endpoint(generator_url, GENERATOR_URL_ENV, generator_model, "generator_url")?,
                *generated_media_type,
            )
            .map_err(|e| ConfigError::Backend(e.to_string()))?;
            Ok(BackendBundle {
                engineer: Arc::new(engineer),
                generator: Arc::new(generator),
                judge: Arc::new(judge),
            })
        }
    }
}

fn env_value(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads references from a directory, sorted by file name. Raster files
/// (`.png`, `.jpg`, `.jpeg`, `.webp`) load as-is; `.attrs` and `.txt` files
/// load as attribute images, one attribute per line. Other entries are
/// ignored. The file name becomes the reference's origin id.
pub fn load_reference_set(dir: &Path) -> Result<ReferenceSet, ConfigError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ConfigError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut images = Vec::new();
    for path in paths {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let media_type = match ext.as_deref() {
            Some("png") => Some(MediaType::Png),
            Some("jpg") | Some("jpeg") => Some(MediaType::Jpeg),
            Some("webp") => Some(MediaType::Webp),
            _ => None,
        };
        if let Some(media_type) = media_type {
            let bytes = std::fs::read(&path).map_err(|e| ConfigError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let image = ImageHandle::new(bytes, media_type, Provenance::Reference, name)
                .map_err(|e| ConfigError::Backend(format!("{name}: {e}")))?;
            images.push(image);
            continue;
        }
        if matches!(ext.as_deref(), Some("attrs") | Some("txt")) {
            let text = read_file(&path)?;
            let attrs = text
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty());
            let image = AttributeImage::new(attrs).to_handle(Provenance::Reference, name);
            images.push(image);
        }
    }

    ReferenceSet::new(images).map_err(|_| ConfigError::NoReferences(dir.to_path_buf()))
}

/// Loads evaluation templates, one per line, each with exactly one `{}`
/// slot. Blank lines are skipped.
pub fn load_templates(path: &Path) -> Result<Vec<String>, ConfigError> {
    let text = read_file(path)?;
    let mut templates = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let slots = line.matches("{}").count();
        if slots != 1 {
            return Err(ConfigError::Template {
                path: path.to_path_buf(),
                line: index + 1,
                message: format!("expected exactly one {{}} slot, found {slots}"),
            });
        }
        templates.push(line.to_string());
    }
    if templates.is_empty() {
        return Err(ConfigError::Template {
            path: path.to_path_buf(),
            line: 0,
            message: "no templates found".to_string(),
        });
    }
    Ok(templates)
}
