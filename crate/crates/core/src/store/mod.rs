//! Durable run state: an append-only event ledger plus a content-addressed
//! object store, with replay for exact resumption and reporting.

pub mod config;
pub mod events;
pub mod ledger;
pub mod manifest;
pub mod objects;
pub mod replay;
pub mod report;
pub mod writer;

pub use config::{
    build_bundle, load_reference_set, load_templates, BackendSpec, ConfigError, EngineerSpec,
    Overrides, RunDocument,
};
pub use events::{EventBody, EventKind, PhaseKind};
pub use ledger::{read_ledger, sha256_hex, Ledger, StoreError, LEDGER_FILE, OBJECTS_DIR};
pub use manifest::{AssetDigests, ReferenceEntry, RunManifest};
pub use objects::ObjectStore;
pub use replay::{replay, Replayed};
pub use report::{build_report, RunReport};
pub use writer::RunWriter;
