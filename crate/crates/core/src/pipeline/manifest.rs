//! Dataset manifests: a JSON file listing images (paths relative to the
//! manifest) with optional scene, person, worn-item and attribute
//! annotations.
//!
//! ```json
//! {
//!   "schema_version": "1",
//!   "images": [{
//!     "id": "img-001",
//!     "path": "images/img-001.png",
//!     "scene": "seafood factory",
//!     "persons": [{
//!       "box": {"x": 4, "y": 8, "w": 40, "h": 90},
//!       "items": [{"name": "boots", "box": {"x": 6, "y": 80, "w": 30, "h": 16},
//!                  "attributes": {"do": "black", "so": "rubber", "io": "waterproof"}}]
//!     }]
//!   }]
//! }
//! ```
//!
//! Items listed under a person are the items that person wears.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::safety_spec::{normalize_phrase, ObservabilityClass};

pub const MANIFEST_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub images: Vec<ManifestImage>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persons: Option<Vec<AnnotatedPerson>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedPerson {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub items: Vec<AnnotatedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedItem {
    pub name: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<AttributeLabels>,
}

/// True attribute phrase per observability class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeLabels {
    #[serde(rename = "do")]
    pub do_: String,
    pub so: String,
    pub io: String,
}

impl AttributeLabels {
    pub fn get(&self, class: ObservabilityClass) -> &str {
        match class {
            ObservabilityClass::Do => &self.do_,
            ObservabilityClass::So => &self.so,
            ObservabilityClass::Io => &self.io,
        }
    }
}

impl AnnotatedPerson {
    pub fn wears(&self, item: &str) -> Option<&AnnotatedItem> {
        self.items.iter().find(|i| i.name == item)
    }
}

impl ManifestImage {
    pub fn is_annotated(&self) -> bool {
        self.persons.is_some()
    }
}

impl DatasetManifest {
    pub fn resolve(&self, image: &ManifestImage) -> PathBuf {
        self.base_dir.join(&image.path)
    }

    pub fn is_annotated(&self) -> bool {
        self.images.iter().all(ManifestImage::is_annotated)
    }

    pub fn image(&self, id: &str) -> Option<&ManifestImage> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Person annotations per image id, as replayed by the mock backends.
    pub fn truth_index(&self) -> HashMap<String, Vec<AnnotatedPerson>> {
        self.images
            .iter()
            .map(|img| (img.id.clone(), img.persons.clone().unwrap_or_default()))
            .collect()
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Validation {
                record: 0,
                message: "missing schema_version".into(),
            })?;
        if version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Validation {
                record: 0,
                message: format!("unsupported manifest schema_version `{version}`"),
            });
        }
        let records = raw
            .get("images")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Validation {
                record: 0,
                message: "missing `images` array".into(),
            })?;
        let mut images = Vec::with_capacity(records.len());
        for (index, record) in records.iter().enumerate() {
            let image: ManifestImage =
                serde_json::from_value(record.clone()).map_err(|e| Error::Validation {
                    record: index,
                    message: e.to_string(),
                })?;
            images.push(image);
        }
        let manifest = DatasetManifest {
            schema_version: version.to_owned(),
            images,
            base_dir: base_dir.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for (record, image) in self.images.iter().enumerate() {
            let fail = |message: String| Error::Validation { record, message };
            if image.id.trim().is_empty() {
                return Err(fail("image id is empty".into()));
            }
            if !ids.insert(image.id.as_str()) {
                return Err(fail(format!("duplicate image id `{}`", image.id)));
            }
            let path = self.resolve(image);
            if !path.is_file() {
                return Err(fail(format!("image file {} does not exist", path.display())));
            }
            if let Some(scene) = &image.scene {
                if scene.trim().is_empty() {
                    return Err(fail("scene label is empty".into()));
                }
            }
            for (p, person) in image.persons.iter().flatten().enumerate() {
                person
                    .bbox
                    .validate()
                    .map_err(|e| fail(format!("person {p}: {e}")))?;
                let mut names = HashSet::new();
                for item in &person.items {
                    if normalize_phrase(&item.name) != item.name || item.name.is_empty() {
                        return Err(fail(format!(
                            "person {p}: item name `{}` must be non-empty lowercase",
                            item.name
                        )));
                    }
                    if !names.insert(item.name.as_str()) {
                        return Err(fail(format!("person {p}: item `{}` listed twice", item.name)));
                    }
                    if let Some(bbox) = &item.bbox {
                        bbox.validate()
                            .map_err(|e| fail(format!("person {p}, item `{}`: {e}", item.name)))?;
                    }
                    if let Some(attrs) = &item.attributes {
                        for class in ObservabilityClass::ALL {
                            if normalize_phrase(attrs.get(class)).is_empty() {
                                return Err(fail(format!(
                                    "person {p}, item `{}`: empty {class} attribute",
                                    item.name
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_json(&text, base)
}
