use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::backends::mock::{MockCaptioner, MockLlm, OracleEmbedder, PassthroughDetector, TruthIndex};
use crate::backends::openai::ChatCompletionsLlm;
use crate::backends::stdio::{StdioCaptioner, StdioDetector, StdioEmbedder, StdioLlm, StdioProcess};
use crate::backends::{Gated, LlmBackend};
use crate::compliance::{
    affinity_labeled, cosine, decide_attribute_threshold, decide_worn_threshold, embed_images,
    embed_texts, llm_decide_attributes, llm_decide_worn, AttributeDecision, AttributeScore,
    EmbedderBackend, EmbeddingRole, Step,
};
use crate::detection::{crop, detect_items, detect_persons, DetectorBackend, Frame, Patch};
use crate::error::{Error, Result};
use crate::evaluation::TimingRecord;
use crate::safety_spec::{
    build_scene_spec, render_attribute_prompt, render_wearing_prompt, ObservabilityClass, PromptCache,
    SceneId, SceneSafetySpec, SpecRequest,
};
use crate::scene::{caption_image, extract_scene, CaptionerBackend, SceneLexicon};

use super::config::{
    CaptionerConfig, Clock, DecisionEngine, DetectorConfig, EmbedderConfig, LlmConfig, PipelineConfig,
};
use super::manifest::DatasetManifest;
use super::report::{
    BackendIds, ComplianceReport, ImageReport, ImageStatus, ItemReport, PersonReport, REPORT_SCHEMA_VERSION,
};

pub const SCENE_UNKNOWN: &str = "scene-unknown";

/// Instantiated backends, each behind a process-wide concurrency gate.
pub struct Backends {
    pub captioner: Option<Gated<dyn CaptionerBackend>>,
    pub detector: Gated<dyn DetectorBackend>,
    pub embedder: Gated<dyn EmbedderBackend>,
    pub llm: Option<Gated<dyn LlmBackend>>,
}

fn gate<T: ?Sized>(inner: Arc<T>, limit: usize, configured: Option<usize>) -> Gated<T> {
    Gated::new(inner, configured.unwrap_or(limit).max(1))
}

/// Detector that fails on selected images and delegates otherwise.
struct FailingDetector {
    inner: PassthroughDetector,
    fail_on: Vec<String>,
}

impl DetectorBackend for FailingDetector {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }

    fn detect(
        &self,
        view: &crate::detection::ImageView<'_>,
        vocabulary: &[String],
        floor: f64,
    ) -> Result<Vec<crate::detection::BoundingBox>> {
        if self.fail_on.iter().any(|id| id == view.image_id) {
            return Err(Error::backend(self.inner.id(), format!("injected failure on `{}`", view.image_id)));
        }
        self.inner.detect(view, vocabulary, floor)
    }
}

impl Backends {
    /// Builds the configured backends. Mock backends replay the manifest's
    /// annotations.
    pub fn from_config(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<Self> {
        let truth: Arc<TruthIndex> = Arc::new(manifest.truth_index());
        let b = &config.backends;

        let captioner: Option<Gated<dyn CaptionerBackend>> = match &b.captioner {
            None => None,
            Some(CaptionerConfig::Mock { id, captions }) => {
                let mut table: HashMap<String, String> = HashMap::new();
                for image in &manifest.images {
                    let text = captions
                        .get(&image.id)
                        .cloned()
                        .or_else(|| image.scene.as_ref().map(|s| format!("people at work in a {s}")));
                    if let Some(text) = text {
                        table.insert(image.id.clone(), text);
                    }
                }
                let mock: Arc<dyn CaptionerBackend> = Arc::new(MockCaptioner::new(id.clone(), table));
                Some(gate(mock.clone(), mock.max_concurrency(), None))
            }
            Some(CaptionerConfig::Stdio(s)) => {
                let backend: Arc<dyn CaptionerBackend> = Arc::new(StdioCaptioner(StdioProcess::spawn(&s.id, &s.command)?));
                Some(gate(backend, 1, s.max_concurrency))
            }
        };

        let detector: Gated<dyn DetectorBackend> = match &b.detector {
            DetectorConfig::Mock { id, score, fail_on } => {
                let inner = PassthroughDetector::new(id.clone(), *score, truth.clone());
                let backend: Arc<dyn DetectorBackend> = Arc::new(FailingDetector {
                    inner,
                    fail_on: fail_on.clone(),
                });
                gate(backend, usize::MAX, None)
            }
            DetectorConfig::Stdio(s) => {
                let backend: Arc<dyn DetectorBackend> = Arc::new(StdioDetector(StdioProcess::spawn(&s.id, &s.command)?));
                gate(backend, 1, s.max_concurrency)
            }
        };

        let embedder: Gated<dyn EmbedderBackend> = match &b.embedder {
            EmbedderConfig::Mock { id, dim, noise, seed } => {
                let backend: Arc<dyn EmbedderBackend> =
                    Arc::new(OracleEmbedder::new(id.clone(), *dim, truth.clone()).with_noise(*noise, *seed));
                gate(backend, usize::MAX, None)
            }
            EmbedderConfig::Stdio {
                id,
                command,
                dim,
                max_concurrency,
            } => {
                let backend: Arc<dyn EmbedderBackend> = Arc::new(StdioEmbedder::new(StdioProcess::spawn(id, command)?, *dim));
                gate(backend, 1, *max_concurrency)
            }
        };

        let llm = build_llm(b.llm.as_ref())?;

        Ok(Backends {
            captioner,
            detector,
            embedder,
            llm,
        })
    }

    pub fn ids(&self) -> BackendIds {
        BackendIds {
            captioner: self.captioner.as_ref().map(|c| c.inner().id().to_owned()),
            detector: self.detector.inner().id().to_owned(),
            embedder: self.embedder.inner().id().to_owned(),
            llm: self.llm.as_ref().map(|l| l.inner().id().to_owned()),
        }
    }
}

/// The configured language model, if any.
pub fn build_llm(config: Option<&LlmConfig>) -> Result<Option<Gated<dyn LlmBackend>>> {
    let llm: Option<Gated<dyn LlmBackend>> = match config {
        None => None,
        Some(LlmConfig::Mock {
            id,
            decision_threshold,
            scene_specs,
            responses,
        }) => {
            let mut mock = MockLlm::new(id.clone());
            for (scene, items) in scene_specs {
                mock = mock.with_scene_spec(scene.as_str(), items)?;
            }
            for (prompt, response) in responses {
                mock = mock.with_response(prompt.clone(), response.clone());
            }
            if let Some(t) = decision_threshold {
                mock = mock.with_decision_threshold(*t);
            }
            let backend: Arc<dyn LlmBackend> = Arc::new(mock);
            Some(gate(backend, usize::MAX, None))
        }
        Some(LlmConfig::Stdio(s)) => {
            let backend: Arc<dyn LlmBackend> = Arc::new(StdioLlm(StdioProcess::spawn(&s.id, &s.command)?));
            Some(gate(backend, 1, s.max_concurrency))
        }
        Some(LlmConfig::Openai {
            base_url,
            model,
            api_key_env,
            timeout_secs,
            max_concurrency,
        }) => {
            let client = ChatCompletionsLlm::new(
                base_url,
                model,
                api_key_env,
                Duration::from_secs(*timeout_secs),
                *max_concurrency,
            )?;
            let backend: Arc<dyn LlmBackend> = Arc::new(client);
            Some(gate(backend, *max_concurrency, None))
        }
    };
    Ok(llm)
}

/// Resolves each scene's spec once per run, however many workers ask.
struct SpecResolver<'a> {
    config: &'a PipelineConfig,
    llm: Option<&'a Gated<dyn LlmBackend>>,
    cache: PromptCache,
    resolved: Mutex<HashMap<SceneId, Arc<OnceLock<std::result::Result<SceneSafetySpec, String>>>>>,
}

impl SpecResolver<'_> {
    fn get(&self, scene: &SceneId) -> std::result::Result<SceneSafetySpec, String> {
        let slot = self
            .resolved
            .lock()
            .expect("spec resolver lock poisoned")
            .entry(scene.clone())
            .or_default()
            .clone();
        slot.get_or_init(|| {
            let request = SpecRequest {
                scene: scene.clone(),
                max_items: self.config.max_items,
                refresh: false,
            };
            let build = |llm: Option<&dyn LlmBackend>| {
                build_scene_spec(&request, llm, &self.cache, &self.config.scene_overrides)
            };
            match self.llm {
                Some(gated) => gated.run(|llm| build(Some(llm))),
                None => build(None),
            }
            .map_err(|e| format!("{}: {e}", e.kind()))
        })
        .clone()
    }
}

struct Stopwatch(Clock);

impl Stopwatch {
    fn seconds(&self, start: Instant) -> f64 {
        match self.0 {
            Clock::Wall => start.elapsed().as_secs_f64(),
            Clock::Frozen => 0.0,
        }
    }
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    manifest: &'a DatasetManifest,
    backends: &'a Backends,
    lexicon: SceneLexicon,
    specs: SpecResolver<'a>,
    clock: Stopwatch,
}

/// Runs every manifest image through the pipeline. Per-image failures are
/// recorded in the report; configuration and setup errors are returned.
pub fn run_pipeline(manifest: &DatasetManifest, config: &PipelineConfig) -> Result<ComplianceReport> {
    config.validate()?;
    let backends = Backends::from_config(config, manifest)?;
    run_with_backends(manifest, config, &backends)
}

/// As [`run_pipeline`] with caller-supplied backends.
pub fn run_with_backends(
    manifest: &DatasetManifest,
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<ComplianceReport> {
    config.validate()?;
    if manifest.images.is_empty() {
        return Err(Error::InvalidArgument("manifest has no images".into()));
    }
    if config.engine == DecisionEngine::Llm && backends.llm.is_none() {
        return Err(Error::Config("engine `llm` needs an llm backend".into()));
    }
    let cache = match &config.cache_path {
        Some(path) => PromptCache::open(path)?,
        None => PromptCache::in_memory(),
    };
    let runner = Runner {
        config,
        manifest,
        backends,
        lexicon: config.lexicon.load()?,
        specs: SpecResolver {
            config,
            llm: backends.llm.as_ref(),
            cache,
            resolved: Mutex::new(HashMap::new()),
        },
        clock: Stopwatch(config.clock),
    };

    let n = manifest.images.len();
    let slots: Vec<Mutex<Option<ImageReport>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let report = runner.image(i);
                *slots[i].lock().expect("result slot poisoned") = Some(report);
            });
        }
    });
    let images = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot poisoned").expect("every image processed"))
        .collect();

    Ok(ComplianceReport {
        schema_version: REPORT_SCHEMA_VERSION.to_owned(),
        config_fingerprint: config.fingerprint(),
        backends: backends.ids(),
        engine: config.engine,
        thresholds: config.thresholds,
        images,
    })
}

impl Runner<'_> {
    fn image(&self, index: usize) -> ImageReport {
        let image = &self.manifest.images[index];
        let mut report = ImageReport::new(&image.id);
        if let Err(e) = self.process(index, &mut report) {
            report.status = ImageStatus::Failed;
            report.reason = Some(format!("{}: {e}", e.kind()));
        }
        report
    }

    fn backend_ids(&self, with_detector: bool) -> Vec<String> {
        let mut ids = Vec::new();
        if with_detector {
            ids.push(self.backends.detector.inner().id().to_owned());
        }
        ids.push(self.backends.embedder.inner().id().to_owned());
        if self.config.engine == DecisionEngine::Llm {
            if let Some(llm) = &self.backends.llm {
                ids.push(llm.inner().id().to_owned());
            }
        }
        ids
    }

    fn timing(&self, report: &mut ImageReport, stage: Step, seconds: f64, with_detector: bool) {
        report.timings.push(TimingRecord {
            stage,
            seconds,
            image_id: report.image_id.clone(),
            backends: self.backend_ids(with_detector),
        });
    }

    fn process(&self, index: usize, report: &mut ImageReport) -> Result<()> {
        let image = &self.manifest.images[index];
        let frame = Frame::load(image.id.clone(), &self.manifest.resolve(image))?;
        let view = frame.view();

        let scene = match &self.config.force_scene {
            Some(scene) => scene.clone(),
            None => {
                let captioner = self
                    .backends
                    .captioner
                    .as_ref()
                    .ok_or_else(|| Error::Config("no captioner configured".into()))?;
                let caption = captioner.run(|c| caption_image(&view, c))?;
                let scene = extract_scene(&caption.text, &self.lexicon);
                report.caption = Some(caption);
                match scene {
                    Some(scene) => scene,
                    None => {
                        report.status = ImageStatus::Skipped;
                        report.reason = Some(SCENE_UNKNOWN.to_owned());
                        return Ok(());
                    }
                }
            }
        };
        report.scene = Some(scene.clone());
        let spec = self.specs.get(&scene).map_err(|message| Error::backend("spec", message))?;
        report.spec = Some(spec.clone());
        let item_names = spec.item_names();

        // Step 1: persons, patch embeddings, affinity, wear decisions.
        let start = Instant::now();
        let persons = self
            .backends
            .detector
            .run(|d| detect_persons(&view, d, self.config.floors.person))?;
        let patches = persons
            .iter()
            .map(|bbox| crop(&view, bbox))
            .collect::<Result<Vec<Patch>>>()?;
        if patches.is_empty() {
            let seconds = self.clock.seconds(start);
            self.timing(report, Step::Step1, seconds, true);
            return Ok(());
        }
        let person_ids: Vec<String> = (0..patches.len()).map(|i| format!("p{i}")).collect();
        let views: Vec<_> = patches.iter().map(Patch::view).collect();
        let person_embeddings = self
            .backends
            .embedder
            .run(|e| embed_images(&views, e, EmbeddingRole::PersonImage))?;
        let prompts: Vec<String> = item_names.iter().map(|n| render_wearing_prompt(n)).collect();
        let item_embeddings = self
            .backends
            .embedder
            .run(|e| embed_texts(&prompts, e, EmbeddingRole::ItemText))?;
        let matrix = affinity_labeled(&person_embeddings, &item_embeddings, person_ids.clone(), item_names.clone())?;
        let decisions = match self.config.engine {
            DecisionEngine::Threshold => decide_worn_threshold(&matrix, self.config.thresholds.for_step(Step::Step1)),
            DecisionEngine::Llm => self.llm()?.run(|llm| llm_decide_worn(&matrix, llm))?,
        };
        let seconds = self.clock.seconds(start);
        self.timing(report, Step::Step1, seconds, true);
        report.affinity = Some(matrix);

        let mut person_reports: Vec<PersonReport> = persons
            .iter()
            .zip(&person_ids)
            .map(|(bbox, id)| PersonReport {
                person_id: id.clone(),
                bbox: bbox.clone(),
                wear: decisions.iter().filter(|d| d.person_id == *id).cloned().collect(),
                items: Vec::new(),
            })
            .collect();

        // Step 2 for worn items: localize inside the person patch, embed the
        // item patches once, then score each class.
        let shared_start = Instant::now();
        let mut targets: Vec<(usize, String, Patch, bool)> = Vec::new();
        for (p, person) in person_reports.iter().enumerate() {
            let worn: Vec<String> = person.wear.iter().filter(|d| d.worn).map(|d| d.item.clone()).collect();
            if worn.is_empty() {
                continue;
            }
            let patch_view = patches[p].view();
            let found = self
                .backends
                .detector
                .run(|d| detect_items(&patch_view, &worn, d, self.config.floors.item))?;
            for item in worn {
                let (patch, localized) = match found.get(&item) {
                    Some(bbox) => (crop(&patch_view, bbox)?, true),
                    None => (patches[p].clone(), false),
                };
                targets.push((p, item, patch, localized));
            }
        }
        if targets.is_empty() {
            report.persons = person_reports;
            return Ok(());
        }
        let target_views: Vec<_> = targets.iter().map(|t| t.2.view()).collect();
        let target_embeddings = self
            .backends
            .embedder
            .run(|e| embed_images(&target_views, e, EmbeddingRole::ItemImage))?;
        let shared = self.clock.seconds(shared_start) / 3.0;

        let mut per_target: Vec<Vec<AttributeDecision>> = vec![Vec::new(); targets.len()];
        for class in ObservabilityClass::ALL {
            let start = Instant::now();
            let mut scores = Vec::with_capacity(targets.len());
            let mut class_prompts = Vec::with_capacity(targets.len());
            for (p, item, _, _) in &targets {
                let attribute = spec
                    .item(item)
                    .expect("worn items come from the spec")
                    .attribute(class)
                    .clone();
                class_prompts.push(render_attribute_prompt(&attribute, item));
                scores.push(AttributeScore {
                    person_id: person_ids[*p].clone(),
                    item: item.clone(),
                    attribute,
                    similarity: 0.0,
                });
            }
            let text_embeddings = self
                .backends
                .embedder
                .run(|e| embed_texts(&class_prompts, e, EmbeddingRole::AttributeText))?;
            for (t, score) in scores.iter_mut().enumerate() {
                score.similarity = cosine(
                    target_embeddings.row(t).values(),
                    text_embeddings.row(t).values(),
                )?;
            }
            let decided = match self.config.engine {
                DecisionEngine::Threshold => {
                    let tau = self.config.thresholds.for_step(Step::from(class));
                    scores.iter().map(|s| decide_attribute_threshold(s, tau)).collect()
                }
                DecisionEngine::Llm => self.llm()?.run(|llm| llm_decide_attributes(&scores, llm))?,
            };
            for (t, decision) in decided.into_iter().enumerate() {
                per_target[t].push(decision);
            }
            let seconds = shared + self.clock.seconds(start);
            self.timing(report, Step::from(class), seconds, false);
        }

        for ((p, item, patch, localized), attributes) in targets.into_iter().zip(per_target) {
            person_reports[p].items.push(ItemReport {
                item,
                bbox: localized.then_some(patch.source),
                attributes,
            });
        }
        report.persons = person_reports;
        Ok(())
    }

    fn llm(&self) -> Result<&Gated<dyn LlmBackend>> {
        self.backends
            .llm
            .as_ref()
            .ok_or_else(|| Error::Config("engine `llm` needs an llm backend".into()))
    }
}
