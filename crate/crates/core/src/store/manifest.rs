//! Run identity: the manifest written as the first ledger event.
//!
//! A run is identified by a digest over everything that determines its
//! behavior: the validated configuration, the reference images and the
//! instruction texts. Two runs with the same manifest and the same backends
//! produce the same ledger.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::SystemPromptAsset;
use crate::domain::{MediaType, ReferenceSet};
use crate::engine::RunConfig;
use crate::store::config::BackendSpec;

/// One reference image as recorded in the manifest. The payload itself lives
/// in the object store under `digest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub origin_id: String,
    pub digest: String,
    pub media_type: MediaType,
}

/// Digests of the instruction texts the run was started with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetDigests {
    pub engineer: String,
    pub judge: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub engine_version: String,
    pub config: RunConfig,
    pub references: Vec<ReferenceEntry>,
    pub assets: AssetDigests,
    /// Enough to rebuild the backends at resume time. Credentials are
    /// stripped before the manifest is written; keys come from the
    /// environment on every start.
    pub backends: BackendSpec,
    /// Whether appends are flushed to disk; a resumed run keeps the policy.
    pub sync: bool,
}

impl RunManifest {
    pub fn new(
        config: RunConfig,
        refs: &ReferenceSet,
        asset: &SystemPromptAsset,
        backends: BackendSpec,
        sync: bool,
    ) -> Self {
        let backends = backends.sanitized();
        let references: Vec<ReferenceEntry> = refs
            .iter()
            .map(|img| ReferenceEntry {
                origin_id: img.origin_id().to_string(),
                digest: img.digest(),
                media_type: img.media_type(),
            })
            .collect();
        let assets = AssetDigests {
            engineer: asset.engineer_digest(),
            judge: asset.judge_digest(),
        };
        let run_id = derive_run_id(&config, &references, &assets, &backends);
        RunManifest {
            run_id,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            references,
            assets,
            backends,
            sync,
            config,
        }
    }
}

/// First sixteen hex digits of a digest over the run's inputs. Stable across
/// engine versions so a resumed run keeps its directory name.
fn derive_run_id(
    config: &RunConfig,
    references: &[ReferenceEntry],
    assets: &AssetDigests,
    backends: &BackendSpec,
) -> String {
    #[derive(Serialize)]
    struct Fingerprint<'a> {
        config: &'a RunConfig,
        references: &'a [ReferenceEntry],
        assets: &'a AssetDigests,
        backends: &'a BackendSpec,
    }
    let json = serde_json::to_string(&Fingerprint { config, references, assets, backends })
        .expect("manifest fingerprint serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{:02x}", byte));
    }
    out
}
