use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compliance::Thresholds;
use crate::error::{Error, Result};
use crate::evaluation::MetricMode;
use crate::safety_spec::{SafetyItemSpec, SceneId};
use crate::scene::SceneLexicon;

pub const DEFAULT_FLOOR: f64 = 0.25;

/// Everything a run depends on. Two runs with equal configs (and mock
/// backends) produce byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub backends: BackendsConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub engine: DecisionEngine,
    /// Fixed specs per scene; these win over the cache and the LLM.
    #[serde(default)]
    pub scene_overrides: IndexMap<SceneId, Vec<SafetyItemSpec>>,
    /// Use this scene for every image instead of captioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_scene: Option<SceneId>,
    #[serde(default)]
    pub lexicon: LexiconConfig,
    #[serde(default)]
    pub floors: Floors,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Spec cache file; in-memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub metric_mode: MetricMode,
    #[serde(default = "default_max_items")]
    pub max_items: usize,
    #[serde(default)]
    pub clock: Clock,
}

fn default_workers() -> usize {
    1
}

fn default_max_items() -> usize {
    5
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionEngine {
    #[default]
    Threshold,
    Llm,
}

/// `frozen` records every duration as zero so that reports are
/// reproducible byte for byte.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    #[default]
    Wall,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Floors {
    #[serde(default = "default_floor")]
    pub person: f64,
    #[serde(default = "default_floor")]
    pub item: f64,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl Default for Floors {
    fn default() -> Self {
        Floors {
            person: DEFAULT_FLOOR,
            item: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconPreset {
    Five,
    Six,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LexiconConfig {
    Preset { preset: LexiconPreset },
    Path { path: PathBuf },
    Inline { scenes: SceneLexicon },
}

impl Default for LexiconConfig {
    fn default() -> Self {
        LexiconConfig::Preset {
            preset: LexiconPreset::Six,
        }
    }
}

impl LexiconConfig {
    pub fn load(&self) -> Result<SceneLexicon> {
        match self {
            LexiconConfig::Preset { preset: LexiconPreset::Five } => Ok(SceneLexicon::five_scene_preset()),
            LexiconConfig::Preset { preset: LexiconPreset::Six } => Ok(SceneLexicon::six_scene_preset()),
            LexiconConfig::Path { path } => SceneLexicon::load(path),
            LexiconConfig::Inline { scenes } => Ok(scenes.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    /// Not needed when `force_scene` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captioner: Option<CaptionerConfig>,
    pub detector: DetectorConfig,
    pub embedder: EmbedderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmConfig>,
}

/// A child process speaking the stdio protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdioConfig {
    pub id: String,
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CaptionerConfig {
    /// Captions by image id; images without one are captioned from their
    /// manifest scene label.
    Mock {
        id: String,
        #[serde(default)]
        captions: BTreeMap<String, String>,
    },
    Stdio(StdioConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorConfig {
    /// Replays manifest boxes with a fixed score. Images listed in
    /// `fail_on` return a backend error.
    Mock {
        id: String,
        #[serde(default = "default_mock_score")]
        score: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        fail_on: Vec<String>,
    },
    Stdio(StdioConfig),
}

fn default_mock_score() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    /// Embeds regions from the manifest annotations. `noise` adds seeded
    /// Gaussian noise to image embeddings.
    Mock {
        id: String,
        #[serde(default = "default_mock_dim")]
        dim: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Stdio {
        id: String,
        command: Vec<String>,
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_concurrency: Option<usize>,
    },
}

fn default_mock_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LlmConfig {
    /// Answers spec prompts from `scene_specs` and `responses`, and decision
    /// prompts by `score >= decision_threshold`.
    Mock {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decision_threshold: Option<f64>,
        #[serde(default)]
        scene_specs: IndexMap<SceneId, Vec<SafetyItemSpec>>,
        #[serde(default)]
        responses: BTreeMap<String, String>,
    },
    Stdio(StdioConfig),
    /// OpenAI-compatible chat completions; the key is read from `api_key_env`.
    Openai {
        base_url: String,
        model: String,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_http_concurrency")]
        max_concurrency: usize,
    },
}

fn default_api_key_env() -> String {
    crate::backends::openai::DEFAULT_API_KEY_ENV.to_owned()
}

fn default_timeout() -> u64 {
    60
}

fn default_http_concurrency() -> usize {
    4
}

impl PipelineConfig {
    /// A config with mock detector and embedder and default settings.
    pub fn mock() -> Self {
        PipelineConfig {
            backends: BackendsConfig {
                captioner: Some(CaptionerConfig::Mock {
                    id: "mock-captioner".into(),
                    captions: BTreeMap::new(),
                }),
                detector: DetectorConfig::Mock {
                    id: "mock-a".into(),
                    score: default_mock_score(),
                    fail_on: Vec::new(),
                },
                embedder: EmbedderConfig::Mock {
                    id: "mock-embedder".into(),
                    dim: default_mock_dim(),
                    noise: 0.0,
                    seed: 0,
                },
                llm: None,
            },
            thresholds: Thresholds::default(),
            engine: DecisionEngine::Threshold,
            scene_overrides: IndexMap::new(),
            force_scene: None,
            lexicon: LexiconConfig::default(),
            floors: Floors::default(),
            workers: 1,
            cache_path: None,
            metric_mode: MetricMode::Pairs,
            max_items: 5,
            clock: Clock::Wall,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        for (name, floor) in [("person", self.floors.person), ("item", self.floors.item)] {
            if !floor.is_finite() {
                return Err(Error::Config(format!("{name} floor {floor} is not finite")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.max_items == 0 {
            return Err(Error::Config("max_items must be at least 1".into()));
        }
        if self.engine == DecisionEngine::Llm && self.backends.llm.is_none() {
            return Err(Error::Config("engine `llm` needs an llm backend".into()));
        }
        if self.force_scene.is_none() && self.backends.captioner.is_none() {
            return Err(Error::Config("a captioner is required unless force_scene is set".into()));
        }
        if let EmbedderConfig::Mock { dim, noise, .. } = &self.backends.embedder {
            if *dim < 2 {
                return Err(Error::Config("mock embedder dim must be at least 2".into()));
            }
            if !(noise.is_finite() && *noise >= 0.0) {
                return Err(Error::Config(format!("mock embedder noise {noise} is invalid")));
            }
        }
        for (scene, items) in &self.scene_overrides {
            if items.is_empty() {
                return Err(Error::Config(format!("override for `{scene}` has no items")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
