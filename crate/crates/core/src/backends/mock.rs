//! Deterministic offline backends.
//!
//! The ground-truth mocks replay manifest annotations, so a run over an
//! annotated manifest with all mocks reproduces the annotations exactly.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::compliance::llm::{read_attribute_prompt, read_wear_prompt, ATTRIBUTE_HEADER, WEAR_HEADER};
use crate::compliance::EmbedderBackend;
use crate::detection::{BoundingBox, DetectorBackend, ImageView, PERSON_LABEL};
use crate::error::{Error, Result};
use crate::pipeline::manifest::AnnotatedPerson;
use crate::safety_spec::{
    render_attribute_prompt, render_attributes_prompt, render_items_prompt, render_wearing_prompt,
    AttributeSpec, ObservabilityClass, SafetyItemSpec,
};
use crate::scene::CaptionerBackend;

use super::LlmBackend;

/// Never produced by a prompt template.
const NOTHING: &str = "\0";

pub type TruthIndex = HashMap<String, Vec<AnnotatedPerson>>;

/// Captions looked up by image id.
#[derive(Debug, Clone)]
pub struct MockCaptioner {
    id: String,
    captions: HashMap<String, String>,
}

impl MockCaptioner {
    pub fn new(id: impl Into<String>, captions: HashMap<String, String>) -> Self {
        MockCaptioner {
            id: id.into(),
            captions,
        }
    }
}

impl CaptionerBackend for MockCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn caption(&self, view: &ImageView<'_>) -> Result<String> {
        self.captions
            .get(view.image_id)
            .cloned()
            .ok_or_else(|| Error::backend(&self.id, format!("no caption for image `{}`", view.image_id)))
    }
}

/// Replays annotated person and item boxes with a fixed score.
#[derive(Debug, Clone)]
pub struct PassthroughDetector {
    id: String,
    score: f64,
    truth: Arc<TruthIndex>,
}

impl PassthroughDetector {
    pub fn new(id: impl Into<String>, score: f64, truth: Arc<TruthIndex>) -> Self {
        PassthroughDetector {
            id: id.into(),
            score,
            truth,
        }
    }
}

impl DetectorBackend for PassthroughDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn detect(&self, view: &ImageView<'_>, vocabulary: &[String], floor: f64) -> Result<Vec<BoundingBox>> {
        if self.score < floor {
            return Ok(Vec::new());
        }
        let persons = self.truth.get(view.image_id).map(Vec::as_slice).unwrap_or_default();
        let (dx, dy) = (-f64::from(view.origin.0), -f64::from(view.origin.1));
        let mut out = Vec::new();
        let mut emit = |bbox: &BoundingBox, label: &str| {
            let local = BoundingBox::new(bbox.x + dx, bbox.y + dy, bbox.w, bbox.h, self.score, label);
            if let Some(clamped) = local.clamp(view.width(), view.height()) {
                out.push(clamped);
            }
        };
        for person in persons {
            if vocabulary.iter().any(|v| v == PERSON_LABEL) {
                emit(&person.bbox, PERSON_LABEL);
            }
            for item in &person.items {
                if let (Some(bbox), true) = (&item.bbox, vocabulary.contains(&item.name)) {
                    emit(bbox, &item.name);
                }
            }
        }
        Ok(out)
    }
}

/// Embedder whose image vectors are built from the annotations so that
/// prompts describing the annotated truth score high and all others low.
///
/// Every text prompt `t` gets its own basis direction `e_t` and embeds as
/// `text_shared * e_0 + e_t`. An annotated region described by the prompts
/// `T` embeds as `image_shared * e_0 + beta * sum(e_t for t in T)` with
/// `beta = sqrt((1 - image_shared^2) / |T|)`. With the defaults (2.0, 0.6) a
/// described prompt scores at least 0.65 for `|T| <= 10` and any other
/// prompt scores 0.537.
///
/// A person region is described by `a person wearing {item}` for its worn
/// items; an item region by `a {feature} {item}` for its three true
/// attributes. Regions are matched to annotations by best IoU; a region
/// matching nothing, or a person wearing nothing, gets a direction of its
/// own that no prompt shares.
#[derive(Debug)]
pub struct OracleEmbedder {
    id: String,
    dim: usize,
    image_shared: f64,
    text_shared: f64,
    truth: Arc<TruthIndex>,
    noise: f64,
    seed: u64,
    directions: Mutex<HashMap<String, usize>>,
}

impl OracleEmbedder {
    pub fn new(id: impl Into<String>, dim: usize, truth: Arc<TruthIndex>) -> Self {
        Self::with_weights(id, dim, 0.6, 2.0, truth)
    }

    pub fn with_weights(
        id: impl Into<String>,
        dim: usize,
        image_shared: f64,
        text_shared: f64,
        truth: Arc<TruthIndex>,
    ) -> Self {
        OracleEmbedder {
            id: id.into(),
            dim,
            image_shared,
            text_shared,
            truth,
            noise: 0.0,
            seed: 0,
            directions: Mutex::new(HashMap::new()),
        }
    }

    /// Perturbs the shared and per-prompt coefficients of image embeddings
    /// with Gaussian noise of standard deviation `sigma`. Each draw depends
    /// only on `seed`, the region and the prompt, never on call order.
    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise = sigma;
        self.seed = seed;
        self
    }

    fn noise(&self, view: &ImageView<'_>, key: &str) -> f64 {
        if self.noise <= 0.0 {
            return 0.0;
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(view.image_id.as_bytes());
        for n in [view.origin.0, view.origin.1, view.width(), view.height()] {
            hasher.update(n.to_le_bytes());
        }
        hasher.update(key.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        Normal::new(0.0, self.noise).expect("finite non-negative sigma").sample(&mut rng)
    }

    fn direction(&self, text: &str) -> Result<usize> {
        let mut directions = self.directions.lock().expect("oracle embedder lock poisoned");
        if let Some(&i) = directions.get(text) {
            return Ok(i);
        }
        let next = directions.len() + 1;
        if next >= self.dim {
            return Err(Error::backend(&self.id, format!("more than {} distinct prompts", self.dim - 1)));
        }
        directions.insert(text.to_owned(), next);
        Ok(next)
    }

    fn describe(&self, view: &ImageView<'_>) -> Vec<String> {
        let Some(persons) = self.truth.get(view.image_id) else {
            return Vec::new();
        };
        let region = view.region();
        let mut best: Option<(f64, Vec<String>)> = None;
        let mut consider = |iou: f64, prompts: Vec<String>| {
            if iou >= 0.5 && best.as_ref().is_none_or(|(b, _)| iou > *b) {
                best = Some((iou, prompts));
            }
        };
        for person in persons {
            let prompts = person.items.iter().map(|i| render_wearing_prompt(&i.name)).collect();
            consider(region.iou(&person.bbox), prompts);
        }
        for item in persons.iter().flat_map(|p| &p.items) {
            let (Some(bbox), Some(labels)) = (&item.bbox, &item.attributes) else {
                continue;
            };
            let prompts = ObservabilityClass::ALL
                .iter()
                .filter_map(|&class| AttributeSpec::new(labels.get(class), class).ok())
                .map(|attr| render_attribute_prompt(&attr, &item.name))
                .collect();
            consider(region.iou(bbox), prompts);
        }
        best.map(|(_, prompts)| prompts).unwrap_or_default()
    }
}

impl EmbedderBackend for OracleEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn embed_images(&self, views: &[ImageView<'_>]) -> Result<Vec<Vec<f64>>> {
        views
            .iter()
            .map(|view| {
                let mut prompts = self.describe(view);
                if prompts.is_empty() {
                    prompts.push(NOTHING.to_owned());
                }
                let mut v = vec![0.0; self.dim];
                v[0] = self.image_shared + self.noise(view, "");
                let beta = ((1.0 - self.image_shared * self.image_shared) / prompts.len() as f64).sqrt();
                for prompt in &prompts {
                    v[self.direction(prompt)?] += beta + self.noise(view, prompt);
                }
                Ok(v)
            })
            .collect()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|text| {
                let mut v = vec![0.0; self.dim];
                v[0] = self.text_shared;
                v[self.direction(text)?] = 1.0;
                Ok(v)
            })
            .collect()
    }
}

/// Fixed vectors keyed by prompt text and by `image_id` (or
/// `image_id@x,y` for a patch at that origin).
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    id: String,
    dim: usize,
    images: HashMap<String, Vec<f64>>,
    texts: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        images: HashMap<String, Vec<f64>>,
        texts: HashMap<String, Vec<f64>>,
    ) -> Self {
        TableEmbedder {
            id: id.into(),
            dim,
            images,
            texts,
        }
    }
}

impl EmbedderBackend for TableEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn embed_images(&self, views: &[ImageView<'_>]) -> Result<Vec<Vec<f64>>> {
        views
            .iter()
            .map(|view| {
                let key = format!("{}@{},{}", view.image_id, view.origin.0, view.origin.1);
                self.images
                    .get(&key)
                    .or_else(|| self.images.get(view.image_id))
                    .cloned()
                    .ok_or_else(|| Error::backend(&self.id, format!("no embedding for `{key}`")))
            })
            .collect()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.texts
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::backend(&self.id, format!("no embedding for `{t}`")))
            })
            .collect()
    }
}

/// Canned responses by exact prompt, plus an optional threshold rule for
/// decision prompts. Counts calls.
#[derive(Debug, Default)]
pub struct MockLlm {
    id: String,
    canned: HashMap<String, String>,
    decision_threshold: Option<f64>,
    calls: AtomicUsize,
}

impl MockLlm {
    pub fn new(id: impl Into<String>) -> Self {
        MockLlm {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn with_response(mut self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        self.canned.insert(prompt.into(), response.into());
        self
    }

    /// Answers both spec prompts for `scene` in the structured layout.
    pub fn with_scene_spec(self, scene: &str, items: &[SafetyItemSpec]) -> Result<Self> {
        let names: Vec<&str> = items.iter().map(SafetyItemSpec::name).collect();
        let item_list = names.iter().map(|n| format!("\"{n}\"")).collect::<Vec<_>>().join("\n");
        let mut attrs = String::new();
        for item in items {
            let [d, s, i] = item.attributes();
            attrs.push_str(&format!(
                "{}:\ncolor: {}\nmaterial: {}\nfunctionality: {}\n",
                item.name(),
                d.phrase,
                s.phrase,
                i.phrase
            ));
        }
        Ok(self
            .with_response(render_items_prompt(scene)?, item_list)
            .with_response(render_attributes_prompt(scene, &names)?, attrs))
    }

    /// Decision prompts are answered with `score >= threshold` on the
    /// serialized (four-decimal) scores.
    pub fn with_decision_threshold(mut self, threshold: f64) -> Self {
        self.decision_threshold = Some(threshold);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn decide(&self, prompt: &str, threshold: f64) -> Option<String> {
        let verdict = |ok: bool| if ok { "yes" } else { "no" };
        if prompt.starts_with(WEAR_HEADER) {
            let cells = read_wear_prompt(prompt)?;
            return Some(
                cells
                    .iter()
                    .map(|(p, i, s)| format!("{p} | {i} | {}\n", verdict(*s >= threshold)))
                    .collect(),
            );
        }
        if prompt.starts_with(ATTRIBUTE_HEADER) {
            let rows = read_attribute_prompt(prompt)?;
            return Some(
                rows.iter()
                    .map(|(id, s)| format!("{id} | {}\n", verdict(*s >= threshold)))
                    .collect(),
            );
        }
        None
    }
}

impl LlmBackend for MockLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn complete(&self, _system: &str, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(response) = self.canned.get(prompt) {
            return Ok(response.clone());
        }
        if let Some(answer) = self.decision_threshold.and_then(|t| self.decide(prompt, t)) {
            return Ok(answer);
        }
        Err(Error::backend(&self.id, "no canned response for prompt"))
    }
}
