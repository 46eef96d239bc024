//! Storage engines behind both stores: an in-memory map for tests and an
//! append-only journal plus object files on local disk.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::StoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Namespace {
    Components,
    Schemas,
    Packages,
    PackageMeta,
    Snapshots,
}

impl Namespace {
    pub const ALL: [Namespace; 5] = [
        Namespace::Components,
        Namespace::Schemas,
        Namespace::Packages,
        Namespace::PackageMeta,
        Namespace::Snapshots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Namespace::Components => "components",
            Namespace::Schemas => "schemas",
            Namespace::Packages => "packages",
            Namespace::PackageMeta => "package-meta",
            Namespace::Snapshots => "snapshots",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Namespace::ALL.into_iter().find(|n| n.name() == name)
    }

    fn dir(self) -> &'static str {
        match self {
            Namespace::PackageMeta => "packages",
            other => other.name(),
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Namespace::Packages => "pkg",
            Namespace::PackageMeta => "meta.json",
            _ => "json",
        }
    }
}

/// Keys become file names, so they are restricted to a portable alphabet.
pub fn check_key(key: &str) -> Result<(), StoreError> {
    let ok = !key.is_empty()
        && !key.starts_with('.')
        && key.len() <= 128
        && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::Invalid(format!("key {key:?} must match [A-Za-z0-9._-]+")))
    }
}

pub trait Backend: Send {
    fn put(&mut self, ns: Namespace, key: &str, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, ns: Namespace, key: &str) -> Result<Option<Vec<u8>>, StoreError>;
    fn delete(&mut self, ns: Namespace, key: &str) -> Result<bool, StoreError>;
    /// Keys in lexicographic order.
    fn keys(&self, ns: Namespace) -> Result<Vec<String>, StoreError>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryBackend {
    objects: BTreeMap<(Namespace, String), Vec<u8>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Direct access to stored bytes, for fault-injection tests.
    pub fn raw_mut(&mut self, ns: Namespace, key: &str) -> Option<&mut Vec<u8>> {
        self.objects.get_mut(&(ns, key.to_string()))
    }
}

impl Backend for MemoryBackend {
    fn put(&mut self, ns: Namespace, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        check_key(key)?;
        self.objects.insert((ns, key.to_string()), bytes.to_vec());
        Ok(())
    }

    fn get(&self, ns: Namespace, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        Ok(self.objects.get(&(ns, key.to_string())).cloned())
    }

    fn delete(&mut self, ns: Namespace, key: &str) -> Result<bool, StoreError> {
        Ok(self.objects.remove(&(ns, key.to_string())).is_some())
    }

    fn keys(&self, ns: Namespace) -> Result<Vec<String>, StoreError> {
        Ok(self
            .objects
            .keys()
            .filter(|(n, _)| *n == ns)
            .map(|(_, k)| k.clone())
            .collect())
    }
}

/// On-disk layout under the root:
///
/// ```text
/// journal.log                 one line per put/delete: "put <ns> <key> <sha256>" | "del <ns> <key>"
/// components/<name>.json
/// schemas/<id>.json
/// packages/<id>.pkg           canonical package bytes
/// packages/<id>.meta.json     golden flag, stored_at, last access
/// snapshots/<id>.json
/// ```
///
/// The index (key → digest) is rebuilt by replaying the journal on open;
/// object bytes are checked against it on every read.
pub struct DiskBackend {
    root: PathBuf,
    journal: File,
    index: BTreeMap<(Namespace, String), String>,
}

impl DiskBackend {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root)?;
        for ns in Namespace::ALL {
            fs::create_dir_all(root.join(ns.dir()))?;
        }
        let journal_path = root.join("journal.log");
        let mut index = BTreeMap::new();
        if journal_path.exists() {
            let reader = BufReader::new(File::open(&journal_path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                let parts: Vec<&str> = line.split(' ').collect();
                let bad = || StoreError::Corrupt {
                    what: "journal".into(),
                    key: format!("line {}", n + 1),
                    detail: format!("unparseable entry {line:?}"),
                };
                match parts.as_slice() {
                    ["put", ns, key, digest] => {
                        let ns = Namespace::from_name(ns).ok_or_else(bad)?;
                        index.insert((ns, key.to_string()), digest.to_string());
                    }
                    ["del", ns, key] => {
                        let ns = Namespace::from_name(ns).ok_or_else(bad)?;
                        index.remove(&(ns, key.to_string()));
                    }
                    [""] => {}
                    _ => return Err(bad()),
                }
            }
        }
        let journal = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        Ok(DiskBackend {
            root: root.to_path_buf(),
            journal,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, ns: Namespace, key: &str) -> PathBuf {
        self.root.join(ns.dir()).join(format!("{key}.{}", ns.extension()))
    }

    fn append(&mut self, line: &str) -> Result<(), StoreError> {
        self.journal.write_all(line.as_bytes())?;
        self.journal.write_all(b"\n")?;
        self.journal.flush()?;
        Ok(())
    }
}

impl Backend for DiskBackend {
    fn put(&mut self, ns: Namespace, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        check_key(key)?;
        let digest = hex::encode(Sha256::digest(bytes));
        crate::doc::write_atomic(&self.object_path(ns, key), bytes)?;
        self.append(&format!("put {} {key} {digest}", ns.name()))?;
        self.index.insert((ns, key.to_string()), digest);
        Ok(())
    }

    fn get(&self, ns: Namespace, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        let Some(expected) = self.index.get(&(ns, key.to_string())) else {
            return Ok(None);
        };
        let bytes = fs::read(self.object_path(ns, key)).map_err(|e| StoreError::Corrupt {
            what: ns.name().into(),
            key: key.into(),
            detail: format!("object unreadable: {e}"),
        })?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if &actual != expected {
            return Err(StoreError::Corrupt {
                what: ns.name().into(),
                key: key.into(),
                detail: format!("digest {actual} does not match journal {expected}"),
            });
        }
        Ok(Some(bytes))
    }

    fn delete(&mut self, ns: Namespace, key: &str) -> Result<bool, StoreError> {
        if self.index.remove(&(ns, key.to_string())).is_none() {
            return Ok(false);
        }
        self.append(&format!("del {} {key}", ns.name()))?;
        match fs::remove_file(self.object_path(ns, key)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
            Err(e) => Err(e.into()),
        }
    }

    fn keys(&self, ns: Namespace) -> Result<Vec<String>, StoreError> {
        Ok(self
            .index
            .keys()
            .filter(|(n, _)| *n == ns)
            .map(|(_, k)| k.clone())
            .collect())
    }
}
