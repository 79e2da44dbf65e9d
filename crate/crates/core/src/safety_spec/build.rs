use indexmap::IndexMap;

use crate::backends::LlmBackend;
use crate::error::{Error, Result};

use super::{
    parse_attributes_response, parse_items_response, render_attributes_prompt,
    render_items_prompt, PromptCache, Provenance, SafetyItemSpec, SceneId, SceneSafetySpec,
    SPEC_SYSTEM_PREAMBLE, TEMPLATE_VERSION,
};

#[derive(Debug, Clone)]
pub struct SpecRequest {
    pub scene: SceneId,
    /// Upper bound on items kept from the item-list response.
    pub max_items: usize,
    /// Skip the cache lookup and regenerate (overrides still win).
    pub refresh: bool,
}

impl SpecRequest {
    pub fn new(scene: SceneId) -> Self {
        SpecRequest {
            scene,
            max_items: 5,
            refresh: false,
        }
    }
}

/// Resolves the spec for a scene: config override, then cache, then LLM.
/// A freshly generated spec is written to the cache before it is returned.
pub fn build_scene_spec(
    request: &SpecRequest,
    llm: Option<&dyn LlmBackend>,
    cache: &PromptCache,
    overrides: &IndexMap<SceneId, Vec<SafetyItemSpec>>,
) -> Result<SceneSafetySpec> {
    let scene = &request.scene;
    if let Some(items) = overrides.get(scene) {
        return SceneSafetySpec::new(
            scene.clone(),
            items.clone(),
            Provenance::ConfigOverride,
            TEMPLATE_VERSION,
        );
    }
    if !request.refresh {
        if let Some(spec) = cache.get(scene, TEMPLATE_VERSION) {
            return Ok(spec);
        }
    }
    let llm = llm.ok_or_else(|| {
        Error::backend(
            "llm",
            format!("no LLM configured and no cached or override spec for scene `{scene}`"),
        )
    })?;
    if request.max_items == 0 {
        return Err(Error::InvalidArgument("max_items must be at least 1".into()));
    }

    let items_prompt = render_items_prompt(scene.as_str())?;
    let mut names = parse_items_response(&llm.complete(SPEC_SYSTEM_PREAMBLE, &items_prompt)?)?;
    names.truncate(request.max_items);

    let attributes_prompt = render_attributes_prompt(scene.as_str(), &names)?;
    let items = parse_attributes_response(
        &llm.complete(SPEC_SYSTEM_PREAMBLE, &attributes_prompt)?,
        &names,
    )?;

    let spec = SceneSafetySpec::new(scene.clone(), items, Provenance::LlmGenerated, TEMPLATE_VERSION)?;
    cache.put(&spec)?;
    Ok(spec)
}
