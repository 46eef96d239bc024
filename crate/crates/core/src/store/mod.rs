//! The artifact store (transformation components, schemas) and the
//! configuration store (built packages, golden configurations, snapshots).
//! They are separate components with separate namespaces and may share one
//! backend directory.

mod artifact;
mod backend;
mod configuration;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use artifact::ArtifactStore;
pub use backend::{check_key, Backend, DiskBackend, MemoryBackend, Namespace};
pub use configuration::{ConfigurationStore, PackageMeta, StoredPackage, DEFAULT_PACKAGE_CAPACITY};

use crate::commission::PriorState;
use crate::model::DeviceState;
use crate::value::{FieldPath, Tick, Value};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{what} {key} is corrupt: {detail}")]
    Corrupt { what: String, key: String, detail: String },
    #[error("{what} {key} not found{}", .hint.as_ref().map(|h| format!("; nearest: {h}")).unwrap_or_default())]
    NotFound {
        what: String,
        key: String,
        hint: Option<String>,
    },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("state of {0} is stale; snapshot refused")]
    Stale(String),
}

impl StoreError {
    pub fn category(&self) -> &'static str {
        match self {
            StoreError::Io(_) => "io",
            StoreError::Corrupt { .. } => "corruption",
            StoreError::NotFound { .. } => "not-found",
            StoreError::Conflict(_) => "conflict",
            StoreError::Invalid(_) => "invalid",
            StoreError::Stale(_) => "stale",
        }
    }

    pub(crate) fn not_found(what: &str, key: &str) -> Self {
        StoreError::NotFound {
            what: what.into(),
            key: key.into(),
            hint: None,
        }
    }
}

/// Immutable copy of a device's configurable values (and service levels) at
/// one tick.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub snapshot_id: String,
    pub device_id: String,
    pub values: BTreeMap<FieldPath, Value>,
    #[serde(default)]
    pub services: BTreeMap<String, u8>,
    pub taken_at: Tick,
}

impl Snapshot {
    /// Captures a state; the id is derived from the content, so the same
    /// capture always gets the same id.
    pub fn capture(state: &DeviceState, now: Tick) -> Snapshot {
        let mut h = Sha256::new();
        h.update(state.device_id.as_bytes());
        h.update([0]);
        h.update(now.to_be_bytes());
        for (p, v) in &state.current_values {
            h.update(p.as_str().as_bytes());
            h.update([0]);
            h.update(v.to_string().as_bytes());
            h.update([0]);
        }
        for (s, l) in &state.provided_services {
            h.update(s.as_bytes());
            h.update([0, *l]);
        }
        let digest = hex::encode(h.finalize());
        Snapshot {
            snapshot_id: format!("snap-{}", &digest[..16]),
            device_id: state.device_id.clone(),
            values: state.current_values.clone(),
            services: state.provided_services.clone(),
            taken_at: now,
        }
    }

    pub fn prior_state(&self) -> PriorState {
        PriorState {
            values: self.values.clone(),
            services: self.services.clone(),
        }
    }
}
