use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::ScoredSample;
use crate::compliance::{Step, WearDecision};
use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_timings, step1_accuracy, step2_accuracy, MetricMode, PersonTruth, StepAccuracies, Tally,
    TimingRecord, TimingTable,
};
use crate::safety_spec::{normalize_phrase, ObservabilityClass};

use super::manifest::{AnnotatedPerson, DatasetManifest};
use super::report::{ComplianceReport, ImageReport, ImageStatus};

/// Minimum IoU for a detected person to count as an annotated person.
pub const ASSOCIATION_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub mode: MetricMode,
    pub accuracies: StepAccuracies,
    pub tallies: BTreeMap<Step, Tally>,
    /// Absent when no image produced timings.
    pub timings: Option<TimingTable>,
    pub images_scored: usize,
    /// Images skipped or failed during the run; they do not enter any metric.
    pub images_excluded: Vec<String>,
}

/// Greedy one-to-one matching by descending IoU. Returns, per detected
/// person, the index of its annotated person.
pub fn associate(detected: &[BoundingBox], annotated: &[AnnotatedPerson]) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (d, det) in detected.iter().enumerate() {
        for (a, ann) in annotated.iter().enumerate() {
            let iou = det.iou(&ann.bbox);
            if iou >= ASSOCIATION_IOU {
                pairs.push((iou, d, a));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut matched = vec![None; detected.len()];
    let mut taken = vec![false; annotated.len()];
    for (_, d, a) in pairs {
        if matched[d].is_none() && !taken[a] {
            matched[d] = Some(a);
            taken[a] = true;
        }
    }
    matched
}

fn person_truth(person_id: &str, annotated: Option<&AnnotatedPerson>) -> PersonTruth {
    let mut truth = PersonTruth::new(person_id);
    for item in annotated.map(|a| a.items.as_slice()).unwrap_or_default() {
        let labels = item
            .attributes
            .as_ref()
            .map(|l| ObservabilityClass::ALL.map(|c| normalize_phrase(l.get(c))));
        truth.worn.insert(item.name.clone(), labels);
    }
    truth
}

/// Ground truth aligned to one image's detected persons. Detected persons
/// without a match wear nothing; annotated persons nobody detected get
/// synthetic ids and not-worn decisions for every required item.
struct Aligned {
    truth: Vec<PersonTruth>,
    decisions: Vec<WearDecision>,
}

fn align(image: &ImageReport, annotated: &[AnnotatedPerson], required: &[String]) -> Aligned {
    let boxes: Vec<BoundingBox> = image.persons.iter().map(|p| p.bbox.clone()).collect();
    let matched = associate(&boxes, annotated);
    let mut truth: Vec<PersonTruth> = image
        .persons
        .iter()
        .zip(&matched)
        .map(|(p, m)| person_truth(&p.person_id, m.map(|a| &annotated[a])))
        .collect();
    let mut decisions: Vec<WearDecision> = image.wear_decisions().cloned().collect();
    for (a, ann) in annotated.iter().enumerate() {
        if matched.contains(&Some(a)) {
            continue;
        }
        let id = format!("missed-{a}");
        truth.push(person_truth(&id, Some(ann)));
        decisions.extend(required.iter().map(|item| WearDecision {
            person_id: id.clone(),
            item: item.clone(),
            score: f64::NAN,
            worn: false,
            engine: "unmatched".into(),
        }));
    }
    Aligned { truth, decisions }
}

fn annotated_persons<'a>(manifest: &'a DatasetManifest, image_id: &str) -> Result<&'a [AnnotatedPerson]> {
    manifest
        .image(image_id)
        .and_then(|i| i.persons.as_deref())
        .ok_or_else(|| Error::InvalidArgument(format!("image `{image_id}` has no annotations in the manifest")))
}

fn scored_images<'a>(report: &'a ComplianceReport, excluded: &mut Vec<String>) -> Vec<(&'a ImageReport, Vec<String>)> {
    let mut out = Vec::new();
    for image in &report.images {
        match (&image.status, &image.spec) {
            (ImageStatus::Ok, Some(spec)) => out.push((image, spec.item_names())),
            _ => excluded.push(image.image_id.clone()),
        }
    }
    out
}

/// Step accuracies (and mean stage timings) of a run against the manifest
/// annotations.
pub fn evaluate_run(report: &ComplianceReport, manifest: &DatasetManifest, mode: MetricMode) -> Result<RunEvaluation> {
    if !manifest.is_annotated() {
        return Err(Error::InvalidArgument("manifest has unannotated images".into()));
    }
    let mut excluded = Vec::new();
    let images = scored_images(report, &mut excluded);
    let mut tallies: BTreeMap<Step, Tally> = Step::ALL.iter().map(|&s| (s, Tally::default())).collect();
    let mut timings: Vec<TimingRecord> = Vec::new();
    for (image, required) in &images {
        let annotated = annotated_persons(manifest, &image.image_id)?;
        let aligned = align(image, annotated, required);
        let step1 = step1_accuracy(&aligned.decisions, &aligned.truth, required, mode)?;
        let slot = tallies.get_mut(&Step::Step1).expect("all steps present");
        *slot = slot.merge(step1);
        let attributes: Vec<_> = image.attribute_decisions().cloned().collect();
        for class in ObservabilityClass::ALL {
            let t = step2_accuracy(&attributes, &aligned.decisions, &aligned.truth, required, class)?;
            let slot = tallies.get_mut(&Step::from(class)).expect("all steps present");
            *slot = slot.merge(t);
        }
        timings.extend(image.timings.iter().cloned());
    }
    Ok(RunEvaluation {
        mode,
        accuracies: StepAccuracies::from_tallies(&tallies),
        tallies,
        timings: if timings.is_empty() { None } else { Some(aggregate_timings(&timings)?) },
        images_scored: images.len(),
        images_excluded: excluded,
    })
}

/// Labelled scores per step: affinity entries labelled by whether the
/// person wears the item, and similarities labelled by whether the required
/// phrase is the item's true phrase.
pub fn collect_samples(
    report: &ComplianceReport,
    manifest: &DatasetManifest,
) -> Result<BTreeMap<Step, Vec<ScoredSample>>> {
    if !manifest.is_annotated() {
        return Err(Error::InvalidArgument("manifest has unannotated images".into()));
    }
    let mut samples: BTreeMap<Step, Vec<ScoredSample>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for (image, required) in scored_images(report, &mut excluded) {
        let annotated = annotated_persons(manifest, &image.image_id)?;
        let aligned = align(image, annotated, &required);
        for person in &image.persons {
            let truth = aligned
                .truth
                .iter()
                .find(|t| t.person_id == person.person_id)
                .expect("every detected person is aligned");
            for d in &person.wear {
                samples
                    .entry(Step::Step1)
                    .or_default()
                    .push(ScoredSample::new(d.score, truth.wears(&d.item)));
            }
            for a in person.items.iter().flat_map(|i| &i.attributes) {
                if let Some(phrase) = truth.attribute(&a.item, a.attribute.class) {
                    samples
                        .entry(Step::from(a.attribute.class))
                        .or_default()
                        .push(ScoredSample::new(a.similarity, normalize_phrase(&a.attribute.phrase) == phrase));
                }
            }
        }
    }
    Ok(samples)
}
