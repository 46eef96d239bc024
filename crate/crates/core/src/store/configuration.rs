use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::backend::{Backend, Namespace};
use super::{Snapshot, StoreError};
use crate::package::ConfigurationPackage;
use crate::registry::Registry;
use crate::value::Tick;

pub const DEFAULT_PACKAGE_CAPACITY: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageMeta {
    pub golden: bool,
    pub stored_at: Tick,
    /// Logical access counter driving LRU eviction.
    pub last_access: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredPackage {
    pub package: ConfigurationPackage,
    pub golden: bool,
    pub stored_at: Tick,
}

/// Built packages (with golden pinning and LRU eviction) and rollback
/// snapshots.
pub struct ConfigurationStore {
    backend: Box<dyn Backend>,
    capacity: usize,
    clock: u64,
}

fn corrupt(what: &str, key: &str, detail: impl ToString) -> StoreError {
    StoreError::Corrupt {
        what: what.into(),
        key: key.into(),
        detail: detail.to_string(),
    }
}

impl ConfigurationStore {
    pub fn open(backend: Box<dyn Backend>, capacity: usize) -> Result<Self, StoreError> {
        let mut store = ConfigurationStore {
            backend,
            capacity: capacity.max(1),
            clock: 0,
        };
        for id in store.package_ids()? {
            store.clock = store.clock.max(store.meta(&id)?.last_access);
        }
        Ok(store)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn tick_clock(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn meta(&self, id: &str) -> Result<PackageMeta, StoreError> {
        let bytes = self
            .backend
            .get(Namespace::PackageMeta, id)?
            .ok_or_else(|| StoreError::not_found("package", id))?;
        serde_json::from_slice(&bytes).map_err(|e| corrupt("package metadata", id, e))
    }

    fn put_meta(&mut self, id: &str, meta: &PackageMeta) -> Result<(), StoreError> {
        let doc = crate::doc::to_canonical_string(meta).map_err(|e| StoreError::Invalid(e.to_string()))?;
        self.backend.put(Namespace::PackageMeta, id, doc.as_bytes())
    }

    pub fn package_ids(&self) -> Result<Vec<String>, StoreError> {
        self.backend.keys(Namespace::PackageMeta)
    }

    /// Stores a checksum-valid package and returns the ids evicted to stay
    /// within capacity. Storing the same package twice is a no-op.
    pub fn store_package(&mut self, pkg: &ConfigurationPackage, now: Tick) -> Result<Vec<String>, StoreError> {
        pkg.verify_checksum().map_err(|e| corrupt("package", &pkg.package_id, e))?;
        let bytes = pkg.encode();
        if let Some(existing) = self.backend.get(Namespace::Packages, &pkg.package_id)? {
            if existing == bytes {
                return Ok(Vec::new());
            }
            return Err(StoreError::Conflict(format!("package id {} already stored with other content", pkg.package_id)));
        }
        self.backend.put(Namespace::Packages, &pkg.package_id, &bytes)?;
        let meta = PackageMeta {
            golden: false,
            stored_at: now,
            last_access: self.tick_clock(),
        };
        self.put_meta(&pkg.package_id, &meta)?;
        self.evict()
    }

    fn load(&self, id: &str) -> Result<ConfigurationPackage, StoreError> {
        let bytes = self
            .backend
            .get(Namespace::Packages, id)?
            .ok_or_else(|| StoreError::not_found("package", id))?;
        ConfigurationPackage::decode(&bytes).map_err(|e| corrupt("package", id, e))
    }

    /// Fetches and verifies a package, counting as a use for LRU.
    pub fn get_package(&mut self, id: &str) -> Result<StoredPackage, StoreError> {
        let package = self.load(id)?;
        let mut meta = self.meta(id)?;
        meta.last_access = self.tick_clock();
        self.put_meta(id, &meta)?;
        Ok(StoredPackage {
            package,
            golden: meta.golden,
            stored_at: meta.stored_at,
        })
    }

    /// Verified read without touching LRU order (for inspection).
    pub fn peek_package(&self, id: &str) -> Result<StoredPackage, StoreError> {
        let package = self.load(id)?;
        let meta = self.meta(id)?;
        Ok(StoredPackage {
            package,
            golden: meta.golden,
            stored_at: meta.stored_at,
        })
    }

    pub fn package_meta(&self, id: &str) -> Result<PackageMeta, StoreError> {
        self.meta(id)
    }

    pub fn mark_golden(&mut self, id: &str) -> Result<(), StoreError> {
        let mut meta = self.meta(id)?;
        meta.golden = true;
        self.put_meta(id, &meta)
    }

    /// Evicts least-recently-used non-golden packages beyond capacity.
    pub fn evict(&mut self) -> Result<Vec<String>, StoreError> {
        let ids = self.package_ids()?;
        if ids.len() <= self.capacity {
            return Ok(Vec::new());
        }
        let mut candidates = Vec::new();
        for id in ids.iter() {
            let meta = self.meta(id)?;
            if !meta.golden {
                candidates.push((meta.last_access, id.clone()));
            }
        }
        candidates.sort();
        let excess = ids.len() - self.capacity;
        let mut evicted = Vec::new();
        for (_, id) in candidates.into_iter().take(excess) {
            self.backend.delete(Namespace::Packages, &id)?;
            self.backend.delete(Namespace::PackageMeta, &id)?;
            evicted.push(id);
        }
        Ok(evicted)
    }

    pub fn put_snapshot(&mut self, snap: &Snapshot) -> Result<(), StoreError> {
        let doc = crate::doc::to_canonical_string(snap).map_err(|e| StoreError::Invalid(e.to_string()))?;
        if let Some(existing) = self.backend.get(Namespace::Snapshots, &snap.snapshot_id)? {
            if existing == doc.as_bytes() {
                return Ok(());
            }
            return Err(StoreError::Conflict(format!("snapshot {} already stored with other content", snap.snapshot_id)));
        }
        self.backend.put(Namespace::Snapshots, &snap.snapshot_id, doc.as_bytes())
    }

    /// Captures the registry's current values for a device; refused when the
    /// registry's copy is stale.
    pub fn snapshot_device(&mut self, registry: &Registry, device_id: &str, now: Tick) -> Result<String, StoreError> {
        let view = registry
            .get_state(device_id, now)
            .map_err(|_| StoreError::not_found("device", device_id))?;
        if !view.fresh {
            return Err(StoreError::Stale(device_id.to_string()));
        }
        let snap = Snapshot::capture(view.state, now);
        self.put_snapshot(&snap)?;
        Ok(snap.snapshot_id)
    }

    pub fn get_snapshot(&self, id: &str) -> Result<Snapshot, StoreError> {
        let bytes = self
            .backend
            .get(Namespace::Snapshots, id)?
            .ok_or_else(|| StoreError::not_found("snapshot", id))?;
        serde_json::from_slice(&bytes).map_err(|e| corrupt("snapshot", id, e))
    }

    pub fn snapshot_ids(&self) -> Result<Vec<String>, StoreError> {
        self.backend.keys(Namespace::Snapshots)
    }

    pub fn delete_snapshot(&mut self, id: &str) -> Result<bool, StoreError> {
        self.backend.delete(Namespace::Snapshots, id)
    }

    /// Deletes every snapshot not in `protected`; returns the removed ids.
    pub fn gc_snapshots(&mut self, protected: &BTreeSet<String>) -> Result<Vec<String>, StoreError> {
        let mut removed = Vec::new();
        for id in self.snapshot_ids()? {
            if !protected.contains(&id) {
                self.backend.delete(Namespace::Snapshots, &id)?;
                removed.push(id);
            }
        }
        Ok(removed)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::description::fixtures::rpi_description;
    use crate::model::ofm::fixtures::plant_ofm;
    use crate::model::state::fixtures::rpi_state;
    use crate::model::DeviceState;
    use crate::package::fixtures::sample_package;
    use crate::package::{UnsealedPackage, DEFAULT_SHARED_SECRET};
    use crate::store::MemoryBackend;
    use crate::value::{FieldPath, Value};

    fn mem(capacity: usize) -> ConfigurationStore {
        ConfigurationStore::open(Box::new(MemoryBackend::new()), capacity).unwrap()
    }

    fn numbered(n: usize) -> ConfigurationPackage {
        let base = sample_package();
        UnsealedPackage {
            package_id: format!("pkg-{n:04}"),
            commission_id: base.commission_id,
            device_id: base.device_id,
            built_at: base.built_at,
            artifact: base.artifact,
            metadata: base.metadata,
            pre_snapshot_ref: base.pre_snapshot_ref,
        }
        .seal(DEFAULT_SHARED_SECRET)
    }

    #[test]
    fn store_get_round_trip() {
        let mut s = mem(4);
        let pkg = sample_package();
        s.store_package(&pkg, 3).unwrap();
        let got = s.get_package(&pkg.package_id).unwrap();
        assert_eq!(got.package.checksum, pkg.checksum);
        assert_eq!(got.package.encode(), pkg.encode());
        assert!(matches!(s.get_package("pkg-none"), Err(StoreError::NotFound { .. })));
    }

    #[test]
    fn tampered_bytes_raise_corruption() {
        let pkg = sample_package();
        let mut backend = MemoryBackend::new();
        backend.put(Namespace::Packages, &pkg.package_id, &pkg.encode()).unwrap();
        backend
            .put(Namespace::PackageMeta, &pkg.package_id, br#"{"golden":false,"last_access":1,"stored_at":0}"#)
            .unwrap();
        let raw = backend.raw_mut(Namespace::Packages, &pkg.package_id).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0x01;
        let mut s = ConfigurationStore::open(Box::new(backend), 4).unwrap();
        match s.get_package(&pkg.package_id) {
            Err(e @ StoreError::Corrupt { .. }) => assert_eq!(e.category(), "corruption"),
            other => panic!("tampering not detected: {other:?}"),
        }
    }

    #[test]
    fn golden_packages_survive_eviction() {
        let mut s = mem(2);
        s.store_package(&numbered(0), 0).unwrap();
        s.mark_golden("pkg-0000").unwrap();
        s.store_package(&numbered(1), 1).unwrap();
        s.store_package(&numbered(2), 2).unwrap();
        let evicted = s.store_package(&numbered(3), 3).unwrap();
        assert_eq!(evicted, vec!["pkg-0002"]);
        let ids = s.package_ids().unwrap();
        assert!(ids.contains(&"pkg-0000".to_string()));
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn eviction_is_least_recently_used() {
        let mut s = mem(2);
        s.store_package(&numbered(0), 0).unwrap();
        s.store_package(&numbered(1), 1).unwrap();
        s.get_package("pkg-0000").unwrap();
        assert_eq!(s.store_package(&numbered(2), 2).unwrap(), vec!["pkg-0001"]);
    }

    fn registry_with_rpi() -> Registry {
        let ofm = plant_ofm();
        let mut r = Registry::new(ofm.clone(), 30).unwrap();
        let desc = rpi_description();
        let state = DeviceState::from_description(&desc, &ofm, BTreeMap::new(), 0);
        r.register_device(desc, state, 0).unwrap();
        r
    }

    #[test]
    fn snapshots_are_immutable_copies() {
        let mut r = registry_with_rpi();
        let mut s = mem(4);
        let id0 = s.snapshot_device(&r, "RPI3_B_ARM_01", 0).unwrap();
        let before = s.get_snapshot(&id0).unwrap();
        let rate = FieldPath::parse("sensing/temperature/polling_rate").unwrap();
        assert_eq!(before.values[&rate], Value::Int(50));
        assert_eq!(before.values[&FieldPath::parse("sensing/temperature/mode").unwrap()], Value::Text("eco".into()));

        let mut next = r.get_state("RPI3_B_ARM_01", 5).unwrap().state.clone();
        next.current_values.insert(rate.clone(), Value::Int(10));
        next.last_updated = 5;
        r.update_state("RPI3_B_ARM_01", next).unwrap();
        let id5 = s.snapshot_device(&r, "RPI3_B_ARM_01", 5).unwrap();
        assert_ne!(id0, id5);
        assert_eq!(s.get_snapshot(&id0).unwrap(), before);
        assert_eq!(s.get_snapshot(&id5).unwrap().values[&rate], Value::Int(10));
        assert!(matches!(s.snapshot_device(&r, "RPI3_B_ARM_01", 100), Err(StoreError::Stale(_))));
    }

    #[test]
    fn snapshot_gc_keeps_protected() {
        let mut s = mem(4);
        let a = Snapshot::capture(&rpi_state(), 1);
        let b = Snapshot::capture(&rpi_state(), 2);
        s.put_snapshot(&a).unwrap();
        s.put_snapshot(&b).unwrap();
        let removed = s.gc_snapshots(&BTreeSet::from([a.snapshot_id.clone()])).unwrap();
        assert_eq!(removed, vec![b.snapshot_id]);
        assert!(s.get_snapshot(&a.snapshot_id).is_ok());
    }
}
