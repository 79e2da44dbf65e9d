use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Provenance, SafetyItemSpec, SceneId, SceneSafetySpec};

/// One cached spec. The file maps scene name to entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub template_version: String,
    pub items: Vec<SafetyItemSpec>,
    pub provenance: Provenance,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// Scene-spec cache, optionally backed by a JSON file.
///
/// Readers share a lock; each write replaces the file atomically through a
/// temporary file in the same directory.
#[derive(Debug, Default)]
pub struct PromptCache {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, CacheEntry>>,
}

impl PromptCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a file-backed cache. A missing file is an empty cache.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let entries = match fs::read_to_string(&path) {
            Ok(text) if text.trim().is_empty() => BTreeMap::new(),
            Ok(text) => serde_json::from_str(&text)?,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(err) => return Err(Error::io(&path, err)),
        };
        Ok(PromptCache {
            path: Some(path),
            entries: RwLock::new(entries),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Returns the cached spec for `scene` if it was produced with
    /// `template_version`.
    pub fn get(&self, scene: &SceneId, template_version: &str) -> Option<SceneSafetySpec> {
        let entries = self.entries.read().expect("prompt cache lock poisoned");
        let entry = entries.get(scene.as_str())?;
        if entry.template_version != template_version {
            return None;
        }
        SceneSafetySpec::new(
            scene.clone(),
            entry.items.clone(),
            Provenance::Cache,
            entry.template_version.clone(),
        )
        .ok()
    }

    pub fn put(&self, spec: &SceneSafetySpec) -> Result<()> {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        let mut entries = self.entries.write().expect("prompt cache lock poisoned");
        entries.insert(
            spec.scene.as_str().to_owned(),
            CacheEntry {
                template_version: spec.spec_version.clone(),
                items: spec.items().to_vec(),
                provenance: spec.provenance,
                created_at,
            },
        );
        if let Some(path) = &self.path {
            persist(path, &entries)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("prompt cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn persist(path: &Path, entries: &BTreeMap<String, CacheEntry>) -> Result<()> {
    let dir = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    serde_json::to_writer_pretty(&mut tmp, entries)?;
    tmp.write_all(b"\n").map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
