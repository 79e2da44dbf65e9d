use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compliance::{AffinityMatrix, AttributeDecision, Thresholds, WearDecision};
use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::evaluation::TimingRecord;
use crate::safety_spec::{SceneId, SceneSafetySpec};
use crate::scene::Caption;

use super::config::DecisionEngine;

pub const REPORT_SCHEMA_VERSION: &str = "1";

/// JSON Schema for [`ComplianceReport`], shipped alongside the crate.
pub const REPORT_JSON_SCHEMA: &str = include_str!("../../schema/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceReport {
    pub schema_version: String,
    pub config_fingerprint: String,
    pub backends: BackendIds,
    pub engine: DecisionEngine,
    pub thresholds: Thresholds,
    pub images: Vec<ImageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendIds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captioner: Option<String>,
    pub detector: String,
    pub embedder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageReport {
    pub image_id: String,
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<Caption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SceneSafetySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<AffinityMatrix>,
    #[serde(default)]
    pub persons: Vec<PersonReport>,
    #[serde(default)]
    pub timings: Vec<TimingRecord>,
}

impl ImageReport {
    pub(crate) fn new(image_id: &str) -> Self {
        ImageReport {
            image_id: image_id.to_owned(),
            status: ImageStatus::Ok,
            reason: None,
            caption: None,
            scene: None,
            spec: None,
            affinity: None,
            persons: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn person(&self, person_id: &str) -> Option<&PersonReport> {
        self.persons.iter().find(|p| p.person_id == person_id)
    }

    pub fn wear_decisions(&self) -> impl Iterator<Item = &WearDecision> {
        self.persons.iter().flat_map(|p| &p.wear)
    }

    pub fn attribute_decisions(&self) -> impl Iterator<Item = &AttributeDecision> {
        self.persons
            .iter()
            .flat_map(|p| &p.items)
            .flat_map(|i| &i.attributes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonReport {
    pub person_id: String,
    /// Parent-image coordinates.
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// One decision per required item, in spec order.
    pub wear: Vec<WearDecision>,
    /// Step-2 results for the items decided as worn.
    pub items: Vec<ItemReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemReport {
    pub item: String,
    /// Localized box in parent-image coordinates; absent when the detector
    /// found nothing and the whole person patch was used.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub attributes: Vec<AttributeDecision>,
}

impl ComplianceReport {
    pub fn image(&self, image_id: &str) -> Option<&ImageReport> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: ComplianceReport = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "report schema version `{}` (expected `{REPORT_SCHEMA_VERSION}`)",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
