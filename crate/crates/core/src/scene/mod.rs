//! Scene recognition: caption an image, then match the caption against a
//! lexicon of scene phrases. The captioner's low-rank adapter maths lives in
//! [`lora`].

pub mod lora;

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::detection::ImageView;
use crate::error::{Error, Result};
use crate::safety_spec::{SceneId, FIVE_SCENE_PRESET, SIX_SCENE_PRESET};

pub use lora::{
    lora_apply, lora_init, lora_init_with_sigma, lora_train_step, nll_loss, train, FineTuneBatch,
    LoraAdapter, LoraGradients, ToyAttentionModel, DEFAULT_INIT_SIGMA,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: String,
}

impl Caption {
    pub fn new(text: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("caption is empty".into()));
        }
        Ok(Caption {
            text,
            source: source.into(),
        })
    }
}

pub trait CaptionerBackend: Send + Sync {
    fn id(&self) -> &str;

    fn max_concurrency(&self) -> usize {
        1
    }

    fn caption(&self, view: &ImageView<'_>) -> Result<String>;
}

pub fn caption_image(view: &ImageView<'_>, backend: &dyn CaptionerBackend) -> Result<Caption> {
    let text = backend.caption(view)?;
    Caption::new(text, backend.id())
        .map_err(|_| Error::backend(backend.id(), "captioner returned empty text"))
}

/// Ordered map from scene to the phrases that identify it in a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexMap<String, Vec<String>>", into = "IndexMap<String, Vec<String>>")]
pub struct SceneLexicon {
    scenes: IndexMap<SceneId, Vec<String>>,
}

impl SceneLexicon {
    pub fn new(scenes: IndexMap<SceneId, Vec<String>>) -> Result<Self> {
        let mut normalized = IndexMap::with_capacity(scenes.len());
        for (scene, phrases) in scenes {
            let phrases: Vec<String> = phrases
                .iter()
                .map(|p| normalize_for_match(p))
                .filter(|p| !p.is_empty())
                .collect();
            if phrases.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "scene `{scene}` has no matcher phrases"
                )));
            }
            normalized.insert(scene, phrases);
        }
        Ok(SceneLexicon { scenes: normalized })
    }

    /// Each scene matched by its own name.
    pub fn from_names(names: &[&str]) -> Result<Self> {
        let scenes = names
            .iter()
            .map(|name| Ok((SceneId::new(name)?, vec![(*name).to_owned()])))
            .collect::<Result<IndexMap<_, _>>>()?;
        Self::new(scenes)
    }

    pub fn five_scene_preset() -> Self {
        Self::from_names(&FIVE_SCENE_PRESET).expect("preset is valid")
    }

    pub fn six_scene_preset() -> Self {
        Self::from_names(&SIX_SCENE_PRESET).expect("preset is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn scenes(&self) -> impl Iterator<Item = (&SceneId, &[String])> {
        self.scenes.iter().map(|(s, p)| (s, p.as_slice()))
    }
}

impl TryFrom<IndexMap<String, Vec<String>>> for SceneLexicon {
    type Error = Error;

    fn try_from(raw: IndexMap<String, Vec<String>>) -> Result<Self> {
        let scenes = raw
            .into_iter()
            .map(|(scene, phrases)| Ok((SceneId::new(&scene)?, phrases)))
            .collect::<Result<IndexMap<_, _>>>()?;
        SceneLexicon::new(scenes)
    }
}

impl From<SceneLexicon> for IndexMap<String, Vec<String>> {
    fn from(lexicon: SceneLexicon) -> Self {
        lexicon
            .scenes
            .into_iter()
            .map(|(scene, phrases)| (scene.into(), phrases))
            .collect()
    }
}

fn normalize_for_match(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scene whose phrase has the longest whole-word match in the caption; ties
/// go to the scene listed first. `None` when nothing matches.
pub fn extract_scene(caption: &str, lexicon: &SceneLexicon) -> Option<SceneId> {
    let haystack = format!(" {} ", normalize_for_match(caption));
    let mut best: Option<(&SceneId, usize)> = None;
    for (scene, phrases) in &lexicon.scenes {
        for phrase in phrases {
            let len = phrase.chars().count();
            if haystack.contains(&format!(" {phrase} ")) && best.is_none_or(|(_, b)| len > b) {
                best = Some((scene, len));
            }
        }
    }
    best.map(|(scene, _)| scene.clone())
}
