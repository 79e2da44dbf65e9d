//! Conversion from COCO-style box annotations to a dataset manifest.
//!
//! Expected input: `images` (`id`, `file_name`, optional `scene`),
//! `categories` (`id`, `name`) and `annotations` (`image_id`,
//! `category_id`, `bbox` as `[x, y, w, h]`, optional `attributes` with
//! `do`/`so`/`io`). Category `person` marks people; every other annotation
//! is an item and is assigned to the person box covering the largest share
//! of it.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::detection::{BoundingBox, PERSON_LABEL};
use crate::error::{Error, Result};

use super::manifest::{
    AnnotatedItem, AnnotatedPerson, AttributeLabels, DatasetManifest, ManifestImage, MANIFEST_SCHEMA_VERSION,
};

/// Minimum fraction of an item box that must lie inside a person box.
pub const ITEM_COVERAGE: f64 = 0.5;

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    #[serde(default)]
    scene: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    attributes: Option<AttributeLabels>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug)]
pub struct Conversion {
    pub manifest: DatasetManifest,
    /// Annotations that could not be placed, with the reason.
    pub dropped: Vec<String>,
}

fn coverage(item: &BoundingBox, person: &BoundingBox) -> f64 {
    let w = (item.x + item.w).min(person.x + person.w) - item.x.max(person.x);
    let h = (item.y + item.h).min(person.y + person.h) - item.y.max(person.y);
    if w <= 0.0 || h <= 0.0 || item.area() <= 0.0 {
        0.0
    } else {
        w * h / item.area()
    }
}

/// Converts COCO JSON text. Image paths are `image_dir/file_name`, relative
/// to the manifest location `base_dir`.
pub fn convert_coco(text: &str, image_dir: &Path, base_dir: &Path) -> Result<Conversion> {
    let coco: CocoFile = serde_json::from_str(text)?;
    let categories: HashMap<u64, String> = coco
        .categories
        .into_iter()
        .map(|c| (c.id, c.name.trim().to_lowercase()))
        .collect();
    let mut dropped = Vec::new();
    let mut persons: HashMap<u64, Vec<AnnotatedPerson>> = HashMap::new();
    let mut items: HashMap<u64, Vec<(String, BoundingBox, Option<AttributeLabels>)>> = HashMap::new();
    for (n, ann) in coco.annotations.into_iter().enumerate() {
        let Some(name) = categories.get(&ann.category_id) else {
            return Err(Error::Validation {
                record: n,
                message: format!("unknown category id {}", ann.category_id),
            });
        };
        let [x, y, w, h] = ann.bbox;
        let bbox = BoundingBox::new(x, y, w, h, 1.0, "");
        if let Err(e) = bbox.validate() {
            return Err(Error::Validation {
                record: n,
                message: e.to_string(),
            });
        }
        if name == PERSON_LABEL {
            persons.entry(ann.image_id).or_default().push(AnnotatedPerson {
                bbox,
                items: Vec::new(),
            });
        } else {
            items.entry(ann.image_id).or_default().push((name.clone(), bbox, ann.attributes));
        }
    }

    let mut images = Vec::with_capacity(coco.images.len());
    for image in coco.images {
        let mut people = persons.remove(&image.id).unwrap_or_default();
        for (name, bbox, attributes) in items.remove(&image.id).unwrap_or_default() {
            let owner = people
                .iter()
                .enumerate()
                .map(|(i, p)| (i, coverage(&bbox, &p.bbox)))
                .filter(|(_, c)| *c >= ITEM_COVERAGE)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match owner {
                Some((i, _)) if people[i].wears(&name).is_none() => people[i].items.push(AnnotatedItem {
                    name,
                    bbox: Some(bbox),
                    attributes,
                }),
                Some(_) => dropped.push(format!("image {}: second `{name}` on one person", image.id)),
                None => dropped.push(format!("image {}: `{name}` is not on any person", image.id)),
            }
        }
        images.push(ManifestImage {
            id: image.id.to_string(),
            path: image_dir.join(&image.file_name),
            scene: image.scene,
            persons: Some(people),
        });
    }
    Ok(Conversion {
        manifest: DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION.to_owned(),
            images,
            base_dir: base_dir.to_owned(),
        },
        dropped,
    })
}
