use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use indexmap::IndexMap;
use serde_json::json;

use ppe_compliance::calibration::{calibrate_steps, roc_curve, roc_to_csv};
use ppe_compliance::compliance::{Step, Thresholds};
use ppe_compliance::evaluation::{accuracies_csv, load_vqa_jsonl, score_vqa, timings_csv, MetricMode};
use ppe_compliance::pipeline::run::build_llm;
use ppe_compliance::pipeline::synthetic::{oracle_config, write_oracle_dataset};
use ppe_compliance::pipeline::{
    collect_samples, convert_coco, evaluate_run, load_manifest, run_pipeline, ComplianceReport, PipelineConfig,
    REPORT_JSON_SCHEMA,
};
use ppe_compliance::safety_spec::{build_scene_spec, PromptCache, SceneId, SpecRequest};
use ppe_compliance::{Error, Result};

#[derive(Parser)]
#[command(name = "ppe-compliance", version, about = "Scene-aware PPE compliance checking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a manifest and write a compliance report.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Threshold block (e.g. the output of `calibrate`) replacing the config's.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Score a report against the manifest annotations.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "pairs", value_parser = ["pairs", "items-present"])]
        mode: String,
        /// Metrics file; a `.csv` extension writes the accuracy table, anything else JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write the accuracy table here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the timing table here.
        #[arg(long)]
        timings_csv: Option<PathBuf>,
    },
    /// Run on annotated data and pick per-step thresholds by g-means.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the safety spec for a scene, generating and caching it if needed.
    Spec {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        refresh: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export ROC points (threshold,tpr,fpr) for one step.
    Roc {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "step1", value_parser = ["step1", "do", "so", "io"])]
        step: String,
    },
    /// Score free-form answers (JSONL of question, answer, prediction) by EM and Contains.
    Vqa {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert COCO-style annotations into a manifest.
    ConvertCoco {
        #[arg(long)]
        coco: PathBuf,
        /// Directory of the images, relative to the manifest.
        #[arg(long, default_value = "images")]
        images_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic annotated dataset and a matching all-mock config.
    Synthetic {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Print the report JSON schema.
    Schema,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn pretty(value: &impl serde::Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Detect {
            manifest,
            config,
            out,
            thresholds,
        } => {
            let manifest = load_manifest(&manifest)?;
            let mut config = PipelineConfig::load(&config)?;
            if let Some(path) = thresholds {
                config.thresholds =
                    serde_json::from_str::<Thresholds>(&read(&path)?).map_err(|e| Error::Config(e.to_string()))?;
            }
            let report = run_pipeline(&manifest, &config)?;
            write(&out, &report.to_json())
        }
        Command::Evaluate {
            report,
            manifest,
            mode,
            out,
            csv,
            timings_csv: timings_out,
        } => {
            let report = ComplianceReport::load(&report)?;
            let manifest = load_manifest(&manifest)?;
            let mode: MetricMode = mode.parse()?;
            let evaluation = evaluate_run(&report, &manifest, mode)?;
            let table = accuracies_csv(&evaluation.accuracies);
            if out.extension().is_some_and(|e| e == "csv") {
                write(&out, &table)?;
            } else {
                write(&out, &pretty(&evaluation)?)?;
            }
            if let Some(path) = csv {
                write(&path, &table)?;
            }
            if let Some(path) = timings_out {
                let timings = evaluation
                    .timings
                    .ok_or_else(|| Error::InvalidArgument("report has no timings".into()))?;
                write(&path, &timings_csv(&timings))?;
            }
            Ok(())
        }
        Command::Calibrate { manifest, config, out } => {
            let manifest = load_manifest(&manifest)?;
            let config = PipelineConfig::load(&config)?;
            let report = run_pipeline(&manifest, &config)?;
            let samples = collect_samples(&report, &manifest)?;
            let result = calibrate_steps(&samples, &config.thresholds);
            write(&out, &pretty(&result)?)
        }
        Command::Spec { scene, refresh, config } => {
            let config = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => PipelineConfig::mock(),
            };
            let llm = build_llm(config.backends.llm.as_ref())?;
            let cache = match &config.cache_path {
                Some(path) => PromptCache::open(path)?,
                None => PromptCache::in_memory(),
            };
            let request = SpecRequest {
                scene: SceneId::new(&scene)?,
                max_items: config.max_items,
                refresh,
            };
            let overrides: &IndexMap<_, _> = &config.scene_overrides;
            let spec = match &llm {
                Some(gated) => gated.run(|l| build_scene_spec(&request, Some(l), &cache, overrides))?,
                None => build_scene_spec(&request, None, &cache, overrides)?,
            };
            print!("{}", pretty(&spec)?);
            Ok(())
        }
        Command::Roc {
            report,
            manifest,
            out,
            step,
        } => {
            let report = ComplianceReport::load(&report)?;
            let manifest = load_manifest(&manifest)?;
            let step: Step = step.parse()?;
            let samples = collect_samples(&report, &manifest)?;
            let points = roc_curve(samples.get(&step).map(Vec::as_slice).unwrap_or_default())?;
            write(&out, &roc_to_csv(&points))
        }
        Command::Vqa { input, out } => {
            let scores = score_vqa(&load_vqa_jsonl(&input)?)?;
            let text = pretty(&scores)?;
            match out {
                Some(path) => write(&path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::ConvertCoco { coco, images_dir, out } => {
            let base = out.parent().map(Path::to_owned).unwrap_or_default();
            let conversion = convert_coco(&read(&coco)?, &images_dir, &base)?;
            for message in &conversion.dropped {
                eprintln!("dropped: {message}");
            }
            write(&out, &pretty(&conversion.manifest)?)
        }
        Command::Synthetic { dir } => {
            let manifest = write_oracle_dataset(&dir)?;
            let config = dir.join("config.json");
            write(&config, &oracle_config().to_json())?;
            println!("{}", json!({"manifest": manifest, "config": config}));
            Ok(())
        }
        Command::Schema => {
            print!("{REPORT_JSON_SCHEMA}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
