//! Append-only newline-delimited JSON ledger.
//!
//! One event per line: a fixed envelope of sequence number, logical
//! timestamp, kind tag, inline payload and a payload checksum. Sequence
//! numbers start at 1 and increase without gaps; the timestamp equals the
//! sequence number so that resumed runs produce byte-identical files. A
//! trailing line without a newline is an interrupted write and is ignored
//! (and truncated away before appending resumes).

use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::store::events::{EventBody, EventKind};

pub const LEDGER_FILE: &str = "events.ndjson";
pub const OBJECTS_DIR: &str = "objects";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("event serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("run directory {0} already holds a ledger")]
    AlreadyExists(PathBuf),
    #[error("ledger line {line} is corrupt: {detail}")]
    CorruptLine { line: usize, detail: String },
    #[error("ledger line {line} fails its checksum")]
    ChecksumMismatch { line: usize },
    #[error("ledger sequence gap at line {line}: expected {expected}, got {got}")]
    SequenceGap { line: usize, expected: u64, got: u64 },
    #[error("ledger holds no events")]
    EmptyLedger,
    #[error("ledger does not begin with a run manifest")]
    MissingManifest,
    #[error("ledger does not match this engine or its inputs: {0}")]
    ManifestMismatch(String),
    #[error("object {digest} is missing from the store")]
    MissingObject { digest: String },
    #[error("object {digest} fails its checksum")]
    CorruptObject { digest: String },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    seq: u64,
    timestamp: u64,
    kind: EventKind,
    payload: &'a RawValue,
    checksum: &'a str,
}

/// One parsed ledger line, payload kept verbatim.
#[derive(Debug, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub timestamp: u64,
    pub kind: EventKind,
    pub payload: Box<RawValue>,
    pub checksum: String,
}

/// The single writer of a ledger file.
pub struct Ledger {
    file: File,
    next_seq: u64,
    sync: bool,
}

impl Ledger {
    /// Creates a new empty ledger. Fails if the file already exists.
    pub fn create(path: &Path, sync: bool) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    StoreError::AlreadyExists(path.to_path_buf())
                }
                _ => StoreError::Io(e),
            })?;
        Ok(Ledger { file, next_seq: 1, sync })
    }

    /// Reopens an existing ledger for appending. `valid_len` is the byte
    /// length of the verified prefix (an interrupted trailing line beyond it
    /// is cut off) and `next_seq` the sequence number to continue with.
    pub fn reopen(path: &Path, valid_len: u64, next_seq: u64, sync: bool) -> Result<Self, StoreError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        file.set_len(valid_len)?;
        let mut file = file;
        file.seek(SeekFrom::End(0))?;
        Ok(Ledger { file, next_seq, sync })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Appends one event and returns its sequence number.
    pub fn append(&mut self, body: &EventBody) -> Result<u64, StoreError> {
        let payload = body.payload_json()?;
        let checksum = sha256_hex(payload.as_bytes());
        let raw = RawValue::from_string(payload)?;
        let seq = self.next_seq;
        let line = serde_json::to_string(&EnvelopeOut {
            seq,
            timestamp: seq,
            kind: body.kind(),
            payload: &raw,
            checksum: &checksum,
        })?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.next_seq += 1;
        Ok(seq)
    }
}

/// The verified contents of a ledger file.
pub struct LedgerContents {
    /// Typed events with their sequence numbers, in file order.
    pub events: Vec<(u64, EventBody)>,
    /// Byte length of the verified prefix of the file.
    pub valid_len: u64,
    /// True when a trailing interrupted line was ignored.
    pub dropped_partial_line: bool,
}

/// Reads and verifies a ledger: checksums, gapless sequence from 1, one
/// parseable line per event. Only the final line may be incomplete.
pub fn read_ledger(path: &Path) -> Result<LedgerContents, StoreError> {
    let bytes = std::fs::read(path)?;
    let mut events = Vec::new();
    let mut offset: usize = 0;
    let mut valid_len: usize = 0;
    let mut line_number: usize = 0;
    let mut dropped_partial_line = false;

    while offset < bytes.len() {
        line_number += 1;
        let rest = &bytes[offset..];
        let (line, consumed, terminated) = match rest.iter().position(|&b| b == b'\n') {
            Some(pos) => (&rest[..pos], pos + 1, true),
            None => (rest, rest.len(), false),
        };
        if !terminated {
            // A final line without its newline is an interrupted append,
            // regardless of whether the fragment happens to parse.
            dropped_partial_line = true;
            break;
        }
        let envelope: Envelope = serde_json::from_slice(line).map_err(|e| {
            StoreError::CorruptLine { line: line_number, detail: e.to_string() }
        })?;
        let expected_seq = events.len() as u64 + 1;
        if envelope.seq != expected_seq {
            return Err(StoreError::SequenceGap {
                line: line_number,
                expected: expected_seq,
                got: envelope.seq,
            });
        }
        let payload_text = envelope.payload.get();
        if sha256_hex(payload_text.as_bytes()) != envelope.checksum {
            return Err(StoreError::ChecksumMismatch { line: line_number });
        }
        let body = EventBody::from_payload(envelope.kind, payload_text).map_err(|e| {
            StoreError::CorruptLine { line: line_number, detail: e.to_string() }
        })?;
        events.push((envelope.seq, body));
        offset += consumed;
        valid_len = offset;
    }

    Ok(LedgerContents {
        events,
        valid_len: valid_len as u64,
        dropped_partial_line,
    })
}
