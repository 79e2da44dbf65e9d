//! Scene safety specifications: which items people must wear in a scene and
//! the colour / material / functionality each item must have.
//!
//! Specs are produced by prompting a language model twice (items, then
//! attributes), parsed into [`SceneSafetySpec`], and cached on disk keyed by
//! scene and prompt template version.

mod build;
mod cache;
mod parse;
mod prompts;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{build_scene_spec, SpecRequest};
pub use cache::{CacheEntry, PromptCache};
pub use parse::{
    classify_by_lexicon, parse_attributes_response, parse_items_response, COLOR_VOCABULARY,
    FUNCTIONALITY_VOCABULARY, MATERIAL_VOCABULARY,
};
pub use prompts::{
    render_attribute_prompt, render_attributes_prompt, render_items_prompt, render_wearing_prompt,
    SPEC_SYSTEM_PREAMBLE, TEMPLATE_VERSION,
};

/// Trim, lowercase and collapse internal whitespace.
pub fn normalize_phrase(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical lowercase scene name, e.g. `seafood factory`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SceneId(String);

impl SceneId {
    pub fn new(name: &str) -> Result<Self> {
        let name = normalize_phrase(name);
        if name.is_empty() {
            return Err(Error::InvalidArgument("scene name is empty".into()));
        }
        Ok(SceneId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SceneId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        SceneId::new(&value)
    }
}

impl From<SceneId> for String {
    fn from(value: SceneId) -> Self {
        value.0
    }
}

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// How much context is needed to observe an attribute. Each class maps to
/// exactly one attribute kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservabilityClass {
    /// Directly observable: colour.
    Do,
    /// Situationally observable: material.
    So,
    /// Inferentially observable: functionality.
    Io,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Color,
    Material,
    Functionality,
}

impl ObservabilityClass {
    pub const ALL: [ObservabilityClass; 3] = [
        ObservabilityClass::Do,
        ObservabilityClass::So,
        ObservabilityClass::Io,
    ];

    pub fn kind(self) -> AttributeKind {
        match self {
            ObservabilityClass::Do => AttributeKind::Color,
            ObservabilityClass::So => AttributeKind::Material,
            ObservabilityClass::Io => AttributeKind::Functionality,
        }
    }

    pub fn from_kind(kind: AttributeKind) -> Self {
        match kind {
            AttributeKind::Color => ObservabilityClass::Do,
            AttributeKind::Material => ObservabilityClass::So,
            AttributeKind::Functionality => ObservabilityClass::Io,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObservabilityClass::Do => "do",
            ObservabilityClass::So => "so",
            ObservabilityClass::Io => "io",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ObservabilityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl std::str::FromStr for ObservabilityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "do" => Ok(ObservabilityClass::Do),
            "so" => Ok(ObservabilityClass::So),
            "io" => Ok(ObservabilityClass::Io),
            other => Err(Error::InvalidArgument(format!(
                "unknown observability class `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub phrase: String,
    pub class: ObservabilityClass,
}

impl AttributeSpec {
    pub fn new(phrase: &str, class: ObservabilityClass) -> Result<Self> {
        let phrase = normalize_phrase(phrase);
        if phrase.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty {class} attribute phrase"
            )));
        }
        Ok(AttributeSpec { phrase, class })
    }
}

/// One required item with exactly one attribute per observability class.
///
/// Serialized as `{name, do, so, io}`, the item schema shared by the prompt
/// cache and config overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawItem", into = "RawItem")]
pub struct SafetyItemSpec {
    name: String,
    attributes: [AttributeSpec; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    name: String,
    #[serde(rename = "do")]
    do_: String,
    so: String,
    io: String,
}

impl TryFrom<RawItem> for SafetyItemSpec {
    type Error = Error;

    fn try_from(raw: RawItem) -> Result<Self> {
        SafetyItemSpec::new(&raw.name, &raw.do_, &raw.so, &raw.io)
    }
}

impl From<SafetyItemSpec> for RawItem {
    fn from(item: SafetyItemSpec) -> Self {
        let [d, s, i] = item.attributes;
        RawItem {
            name: item.name,
            do_: d.phrase,
            so: s.phrase,
            io: i.phrase,
        }
    }
}

impl SafetyItemSpec {
    pub fn new(name: &str, color: &str, material: &str, functionality: &str) -> Result<Self> {
        let name = normalize_phrase(name);
        if name.is_empty() {
            return Err(Error::InvalidArgument("item name is empty".into()));
        }
        Ok(SafetyItemSpec {
            name,
            attributes: [
                AttributeSpec::new(color, ObservabilityClass::Do)?,
                AttributeSpec::new(material, ObservabilityClass::So)?,
                AttributeSpec::new(functionality, ObservabilityClass::Io)?,
            ],
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attribute(&self, class: ObservabilityClass) -> &AttributeSpec {
        &self.attributes[class.index()]
    }

    /// Attributes in DO, SO, IO order.
    pub fn attributes(&self) -> &[AttributeSpec; 3] {
        &self.attributes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    LlmGenerated,
    ConfigOverride,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSafetySpec {
    pub scene: SceneId,
    items: Vec<SafetyItemSpec>,
    pub provenance: Provenance,
    pub spec_version: String,
}

impl SceneSafetySpec {
    pub fn new(
        scene: SceneId,
        items: Vec<SafetyItemSpec>,
        provenance: Provenance,
        spec_version: impl Into<String>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "scene `{scene}` has no required items"
            )));
        }
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.name()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate item `{}` in scene `{scene}`",
                    item.name()
                )));
            }
        }
        Ok(SceneSafetySpec {
            scene,
            items,
            provenance,
            spec_version: spec_version.into(),
        })
    }

    pub fn items(&self) -> &[SafetyItemSpec] {
        &self.items
    }

    pub fn item(&self, name: &str) -> Option<&SafetyItemSpec> {
        self.items.iter().find(|item| item.name() == name)
    }

    pub fn item_names(&self) -> Vec<String> {
        self.items.iter().map(|item| item.name().to_owned()).collect()
    }
}

/// Scene names listed alongside the prompt examples.
pub const FIVE_SCENE_PRESET: [&str; 5] = [
    "hospital",
    "construction site",
    "chemical factory",
    "seafood factory",
    "manufacturing zone",
];

/// Scene names covered by the evaluation images.
pub const SIX_SCENE_PRESET: [&str; 6] = [
    "construction site",
    "chemical factory",
    "seafood factory",
    "hospital",
    "baking factory",
    "mechanical factory",
];
