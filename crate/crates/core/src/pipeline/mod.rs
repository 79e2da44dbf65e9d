//! End-to-end orchestration: manifests in, compliance reports out, plus
//! evaluation of a report against the manifest annotations.

pub mod coco;
pub mod config;
pub mod evaluate;
pub mod manifest;
pub mod report;
pub mod run;
pub mod synthetic;

pub use coco::{convert_coco, Conversion};
pub use config::{Clock, DecisionEngine, PipelineConfig};
pub use evaluate::{associate, collect_samples, evaluate_run, RunEvaluation};
pub use manifest::{load_manifest, DatasetManifest};
pub use report::{ComplianceReport, ImageReport, ImageStatus, REPORT_JSON_SCHEMA, REPORT_SCHEMA_VERSION};
pub use run::{run_pipeline, run_with_backends, Backends, SCENE_UNKNOWN};
