//! Shared fixtures for the integration suites: a small attribute world,
//! reference builders, backend bundles and instrumented backend wrappers.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;

use promptforge::backends::{
    load_prompt_assets, BackendBundle, BackendError, CallContext, CallPurpose, ChatBackend,
    ChatMessage, ImageGenerator,
};
use promptforge::domain::{ImageHandle, Provenance, ReferenceSet};
use promptforge::engine::{EventSink, RunConfig, SinkError};
use promptforge::simworld::{Codebook, ScriptedPolicy, SimEngineer, SimGenerator, SimJudge};
use promptforge::simworld::AttributeImage;
use promptforge::store::{
    sha256_hex, BackendSpec, EngineerSpec, EventBody, RunManifest, RunWriter, LEDGER_FILE,
};

/// Eleven tokens over four attribute families. Large enough for interesting
/// prompts, small enough to reason about scores by hand.
pub const WORLD: &str = "red: color-red\n\
blue: color-blue\n\
green: color-green\n\
cube: shape-cube\n\
sphere: shape-sphere\n\
cone: shape-cone\n\
metallic: finish-metallic\n\
matte: finish-matte\n\
glossy: finish-glossy\n\
wooden: material-wood\n\
glass: material-glass\n";

pub fn codebook() -> Arc<Codebook> {
    Arc::new(Codebook::parse(WORLD).expect("fixture codebook parses"))
}

/// A reference image holding exactly these attributes.
pub fn attr_reference(attrs: &[&str], origin: &str) -> ImageHandle {
    AttributeImage::new(attrs.iter().map(|s| s.to_string()))
        .to_handle(Provenance::Reference, origin)
}

pub fn single_reference(attrs: &[&str]) -> ReferenceSet {
    ReferenceSet::new(vec![attr_reference(attrs, "ref-0")]).expect("one reference is valid")
}

pub fn reference_set(groups: &[&[&str]]) -> ReferenceSet {
    let images = groups
        .iter()
        .enumerate()
        .map(|(i, attrs)| attr_reference(attrs, format!("ref-{i}").as_str()))
        .collect();
    ReferenceSet::new(images).expect("fixture references are valid")
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

/// Noise-free bundle with a greedy add/remove engineer over `vocabulary`.
pub fn greedy_bundle(vocabulary: &[&str]) -> BackendBundle {
    BackendBundle {
        engineer: Arc::new(SimEngineer::new(ScriptedPolicy::GreedyAddRemove {
            vocabulary: owned(vocabulary),
        })),
        generator: Arc::new(SimGenerator::exact(codebook())),
        judge: Arc::new(SimJudge),
    }
}

/// Noise-free bundle with an engineer that replays `prompts` verbatim.
pub fn script_bundle(prompts: &[&str]) -> BackendBundle {
    BackendBundle {
        engineer: Arc::new(SimEngineer::new(ScriptedPolicy::FixedScript {
            prompts: owned(prompts),
        })),
        generator: Arc::new(SimGenerator::exact(codebook())),
        judge: Arc::new(SimJudge),
    }
}

/// In-memory sink that keeps every event body and hashes images like the
/// real object store would.
#[derive(Default)]
pub struct RecordingSink {
    pub events: Vec<EventBody>,
}

impl RecordingSink {
    pub fn count(&self, pred: impl Fn(&EventBody) -> bool) -> usize {
        self.events.iter().filter(|e| pred(e)).count()
    }
}

impl EventSink for RecordingSink {
    fn emit(&mut self, body: &EventBody) -> Result<(), SinkError> {
        self.events.push(body.clone());
        Ok(())
    }

    fn put_image(&mut self, image: &ImageHandle) -> Result<String, SinkError> {
        Ok(sha256_hex(image.bytes()))
    }
}

/// Counts generator calls by purpose while delegating to the inner backend.
pub struct CountingGenerator<G> {
    inner: G,
    refine: AtomicU32,
    reeval: AtomicU32,
    eval: AtomicU32,
}

impl<G> CountingGenerator<G> {
    pub fn new(inner: G) -> Self {
        CountingGenerator {
            inner,
            refine: AtomicU32::new(0),
            reeval: AtomicU32::new(0),
            eval: AtomicU32::new(0),
        }
    }

    pub fn refine_calls(&self) -> u32 {
        self.refine.load(Ordering::SeqCst)
    }

    pub fn reeval_calls(&self) -> u32 {
        self.reeval.load(Ordering::SeqCst)
    }

    pub fn eval_calls(&self) -> u32 {
        self.eval.load(Ordering::SeqCst)
    }
}

impl<G: ImageGenerator> ImageGenerator for CountingGenerator<G> {
    fn generate(&self, ctx: &CallContext, request_text: &str) -> Result<ImageHandle, BackendError> {
        match ctx.purpose {
            CallPurpose::Refine => self.refine.fetch_add(1, Ordering::SeqCst),
            CallPurpose::Reevaluate { .. } => self.reeval.fetch_add(1, Ordering::SeqCst),
            CallPurpose::Eval { .. } | CallPurpose::Distill => {
                self.eval.fetch_add(1, Ordering::SeqCst)
            }
        };
        self.inner.generate(ctx, request_text)
    }
}

/// Records the largest refinement request seen, in messages, while delegating.
pub struct SpyEngineer<B> {
    inner: B,
    max_refine_messages: AtomicUsize,
    calls: AtomicU32,
}

impl<B> SpyEngineer<B> {
    pub fn new(inner: B) -> Self {
        SpyEngineer {
            inner,
            max_refine_messages: AtomicUsize::new(0),
            calls: AtomicU32::new(0),
        }
    }

    pub fn max_refine_messages(&self) -> usize {
        self.max_refine_messages.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for SpyEngineer<B> {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        max_tokens: u32,
    ) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if ctx.purpose == CallPurpose::Refine {
            self.max_refine_messages.fetch_max(messages.len(), Ordering::SeqCst);
        }
        self.inner.complete(ctx, messages, max_tokens)
    }
}

/// A chat backend that always fails with a transport error.
pub struct DeadChat;

impl ChatBackend for DeadChat {
    fn complete(
        &self,
        _ctx: &CallContext,
        _messages: &[ChatMessage],
        _max_tokens: u32,
    ) -> Result<String, BackendError> {
        Err(BackendError::Transport("connection refused".to_string()))
    }
}

/// Backend description recorded in test manifests. The integration tests
/// construct their bundles directly, so resume paths in these suites never
/// rebuild from this spec; it only has to be valid.
pub fn stub_backend_spec() -> BackendSpec {
    BackendSpec::Simworld {
        codebook: PathBuf::from("world.codebook"),
        engineer: EngineerSpec::FixedScript {
            prompts: vec!["red cube".to_string()],
        },
        world_seed: 0,
        dropout: 0.0,
        spurious: 0.0,
    }
}

/// Opens a ledger-backed writer for `config` in `dir` and returns it.
pub fn writer_for(dir: &Path, config: &RunConfig, refs: &ReferenceSet) -> RunWriter {
    let asset = load_prompt_assets(config.task).expect("assets load");
    let manifest = RunManifest::new(config.clone(), refs, &asset, stub_backend_spec(), false);
    RunWriter::create(dir, &manifest, refs, false).expect("writer opens")
}

pub fn ledger_bytes(run_dir: &Path) -> Vec<u8> {
    std::fs::read(run_dir.join(LEDGER_FILE)).expect("ledger file exists")
}
