//! A small annotated dataset whose mock backends agree with its labels, for
//! offline end-to-end runs.
//!
//! Three seafood-factory images with six persons between them. Every worn
//! item has a box and true attributes; a few true attributes differ from the
//! required ones so that both step-2 outcomes occur.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::safety_spec::{render_attributes_prompt, render_items_prompt, SafetyItemSpec};

use super::config::{Clock, LlmConfig, PipelineConfig};
use super::manifest::{
    AnnotatedItem, AnnotatedPerson, AttributeLabels, DatasetManifest, ManifestImage, MANIFEST_SCHEMA_VERSION,
};
use crate::detection::BoundingBox;

pub const SEAFOOD_FACTORY: &str = "seafood factory";

/// Item-list reply for the seafood-factory prompt.
pub const SEAFOOD_ITEMS_RESPONSE: &str =
    "Workers in a seafood factory should wear: \"hairnet\", \"face mask\", \"gloves\", \"aprons\", and \"boots\".";

/// Attribute reply for the seafood-factory items, mixing keyed lines and
/// free-form bullets.
pub const SEAFOOD_ATTRIBUTES_RESPONSE: &str = "\
1. Hairnet:
   - color: white
   - material: fabric
   - functionality: breathable
2. Face mask:
   - color: light blue
   - material: fabric
   - functionality: splash-proof
3. Gloves:
   - color: blue
   - material: nitrile
   - functionality: cut-resistant
4. Aprons:
   - color: white
   - material: plastic
   - functionality: waterproof
5. Boots:
   - High-visibility color
   - Rubber material
   - Waterproof
";

/// The spec the two replies above parse to.
pub fn seafood_spec_items() -> Vec<SafetyItemSpec> {
    [
        ("hairnet", "white", "fabric", "breathable"),
        ("face mask", "light blue", "fabric", "splash-proof"),
        ("gloves", "blue", "nitrile", "cut-resistant"),
        ("aprons", "white", "plastic", "waterproof"),
        ("boots", "high-visibility", "rubber", "waterproof"),
    ]
    .iter()
    .map(|(n, c, m, f)| SafetyItemSpec::new(n, c, m, f).expect("valid fixture item"))
    .collect()
}

type ItemDef = (&'static str, [u32; 4], [&'static str; 3]);

struct PersonDef {
    bbox: [u32; 4],
    items: &'static [ItemDef],
}

const WIDTH: u32 = 192;
const HEIGHT: u32 = 128;

const IMAGES: &[&[PersonDef]] = &[
    &[
        PersonDef {
            bbox: [8, 8, 48, 112],
            items: &[
                ("hairnet", [16, 8, 32, 12], ["white", "fabric", "breathable"]),
                ("face mask", [20, 24, 24, 10], ["light blue", "fabric", "splash-proof"]),
                ("gloves", [8, 60, 12, 12], ["black", "nitrile", "cut-resistant"]),
                ("aprons", [16, 40, 32, 48], ["white", "plastic", "waterproof"]),
                ("boots", [12, 100, 40, 20], ["high-visibility", "rubber", "waterproof"]),
            ],
        },
        PersonDef {
            bbox: [96, 10, 50, 108],
            items: &[
                ("hairnet", [106, 10, 30, 12], ["blue", "fabric", "breathable"]),
                ("boots", [100, 100, 42, 18], ["black", "leather", "anti-slip"]),
            ],
        },
    ],
    &[PersonDef {
        bbox: [60, 6, 56, 116],
        items: &[
            ("face mask", [74, 26, 28, 10], ["white", "fabric", "splash-proof"]),
            ("gloves", [60, 64, 14, 14], ["blue", "latex", "cut-resistant"]),
            ("aprons", [68, 44, 40, 50], ["white", "plastic", "waterproof"]),
        ],
    }],
    &[
        PersonDef {
            bbox: [4, 12, 40, 104],
            items: &[],
        },
        PersonDef {
            bbox: [64, 12, 44, 108],
            items: &[
                ("gloves", [64, 70, 12, 12], ["blue", "nitrile", "cut-resistant"]),
                ("boots", [68, 104, 36, 16], ["high-visibility", "rubber", "waterproof"]),
            ],
        },
        PersonDef {
            bbox: [132, 10, 48, 110],
            items: &[
                ("hairnet", [142, 10, 28, 12], ["white", "fabric", "breathable"]),
                ("face mask", [144, 26, 24, 10], ["light blue", "fabric", "splash-proof"]),
                ("gloves", [132, 66, 12, 12], ["blue", "nitrile", "cut-resistant"]),
                ("aprons", [140, 42, 34, 50], ["yellow", "rubber", "waterproof"]),
                ("boots", [136, 102, 40, 18], ["high-visibility", "rubber", "waterproof"]),
            ],
        },
    ],
];

fn bbox([x, y, w, h]: [u32; 4]) -> BoundingBox {
    BoundingBox::new(f64::from(x), f64::from(y), f64::from(w), f64::from(h), 1.0, "")
}

fn fill(img: &mut RgbImage, [x, y, w, h]: [u32; 4], colour: Rgb<u8>) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.put_pixel(px, py, colour);
        }
    }
}

/// Writes the images and `manifest.json` into `dir`; returns the manifest
/// path.
pub fn write_oracle_dataset(dir: &Path) -> Result<PathBuf> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut images = Vec::new();
    for (n, persons) in IMAGES.iter().enumerate() {
        let id = format!("seafood-{}", n + 1);
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([40, 40, 48]));
        let mut annotated = Vec::new();
        for person in persons.iter() {
            fill(&mut img, person.bbox, Rgb([200, 160, 120]));
            let mut items = Vec::new();
            for (k, (name, b, [d, s, i])) in person.items.iter().enumerate() {
                let shade = 60 + 30 * k as u8;
                fill(&mut img, *b, Rgb([shade, 220 - shade, 90]));
                items.push(AnnotatedItem {
                    name: (*name).to_owned(),
                    bbox: Some(bbox(*b)),
                    attributes: Some(AttributeLabels {
                        do_: (*d).to_owned(),
                        so: (*s).to_owned(),
                        io: (*i).to_owned(),
                    }),
                });
            }
            annotated.push(AnnotatedPerson {
                bbox: bbox(person.bbox),
                items,
            });
        }
        let path = dir.join(&rel);
        img.save(&path)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
        images.push(ManifestImage {
            id,
            path: rel,
            scene: Some(SEAFOOD_FACTORY.to_owned()),
            persons: Some(annotated),
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION.to_owned(),
        images,
        base_dir: dir.to_owned(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// All-mock config for the oracle dataset: the spec comes from the mock LLM
/// replaying the canned seafood-factory replies, and timings are frozen.
pub fn oracle_config() -> PipelineConfig {
    let item_names = ["hairnet", "face mask", "gloves", "aprons", "boots"];
    let mut responses = BTreeMap::new();
    responses.insert(
        render_items_prompt(SEAFOOD_FACTORY).expect("valid scene"),
        SEAFOOD_ITEMS_RESPONSE.to_owned(),
    );
    responses.insert(
        render_attributes_prompt(SEAFOOD_FACTORY, &item_names).expect("valid items"),
        SEAFOOD_ATTRIBUTES_RESPONSE.to_owned(),
    );
    let mut config = PipelineConfig::mock();
    config.backends.llm = Some(LlmConfig::Mock {
        id: "mock-llm".into(),
        decision_threshold: Some(crate::compliance::DEFAULT_THRESHOLD),
        scene_specs: IndexMap::new(),
        responses,
    });
    config.clock = Clock::Frozen;
    config.workers = 2;
    config
}
