//! The event sink that persists a run: ledger plus object store.

use std::path::{Path, PathBuf};

use crate::domain::{ImageHandle, ReferenceSet};
use crate::engine::{EventSink, SinkError};
use crate::store::events::{EventBody, RunStartedBody};
use crate::store::ledger::{Ledger, StoreError, LEDGER_FILE, OBJECTS_DIR};
use crate::store::manifest::RunManifest;
use crate::store::objects::ObjectStore;

impl From<StoreError> for SinkError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(io) => SinkError::Io(io),
            StoreError::Json(json) => SinkError::Serialize(json),
            StoreError::SequenceGap { expected, got, .. } => {
                SinkError::SequenceGap { expected, got }
            }
            StoreError::CorruptObject { digest } => SinkError::CorruptObject { digest },
            other => SinkError::Io(std::io::Error::other(other.to_string())),
        }
    }
}

/// Writes a run to disk. The run directory is self-contained: the manifest
/// is the first ledger event and the reference payloads live in the object
/// store, so resuming needs nothing but the directory.
pub struct RunWriter {
    run_dir: PathBuf,
    ledger: Ledger,
    objects: ObjectStore,
}

impl RunWriter {
    /// Creates the run directory layout, stores the reference payloads and
    /// writes the manifest as the first event.
    pub fn create(
        run_dir: impl Into<PathBuf>,
        manifest: &RunManifest,
        refs: &ReferenceSet,
        sync: bool,
    ) -> Result<Self, StoreError> {
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir)?;
        let objects = ObjectStore::open(run_dir.join(OBJECTS_DIR))?;
        for reference in refs.iter() {
            objects.put(reference.bytes())?;
        }
        let mut ledger = Ledger::create(&run_dir.join(LEDGER_FILE), sync)?;
        ledger.append(&EventBody::RunStarted(RunStartedBody {
            manifest: manifest.clone(),
        }))?;
        Ok(RunWriter { run_dir, ledger, objects })
    }

    /// Reopens an interrupted run for appending. `valid_len` and `next_seq`
    /// come from replaying the ledger.
    pub fn resume(
        run_dir: impl Into<PathBuf>,
        valid_len: u64,
        next_seq: u64,
        sync: bool,
    ) -> Result<Self, StoreError> {
        let run_dir = run_dir.into();
        let ledger = Ledger::reopen(&run_dir.join(LEDGER_FILE), valid_len, next_seq, sync)?;
        let objects = ObjectStore::open(run_dir.join(OBJECTS_DIR))?;
        Ok(RunWriter { run_dir, ledger, objects })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn next_seq(&self) -> u64 {
        self.ledger.next_seq()
    }
}

impl EventSink for RunWriter {
    fn emit(&mut self, body: &EventBody) -> Result<(), SinkError> {
        self.ledger.append(body)?;
        Ok(())
    }

    fn put_image(&mut self, image: &ImageHandle) -> Result<String, SinkError> {
        Ok(self.objects.put(image.bytes())?)
    }
}
