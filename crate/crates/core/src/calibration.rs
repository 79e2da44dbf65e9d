//! ROC analysis and per-step threshold selection by g-means.
//!
//! Every curve uses the same inclusive rule as inference: a sample is
//! predicted positive iff `score >= threshold`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::compliance::{Step, Thresholds};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredSample { score, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

struct Counts {
    /// Scores sorted descending.
    sorted: Vec<ScoredSample>,
    positives: usize,
    negatives: usize,
}

fn counts(samples: &[ScoredSample]) -> Result<Counts> {
    if let Some(bad) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument(format!("score {} is not finite", bad.score)));
    }
    let positives = samples.iter().filter(|s| s.label).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(format!(
            "ROC needs both classes, got {positives} positive and {negatives} negative samples"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(Counts {
        sorted,
        positives,
        negatives,
    })
}

/// One point per distinct score in descending threshold order, preceded by
/// a `+inf` point at (0, 0). The lowest score always lands on (1, 1).
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<RocPoint>> {
    let c = counts(samples)?;
    let (p, n) = (c.positives as f64, c.negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < c.sorted.len() {
        let threshold = c.sorted[i].score;
        while i < c.sorted.len() && c.sorted[i].score == threshold {
            if c.sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            tpr: tp as f64 / p,
            fpr: fp as f64 / n,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the curve, integrating over fpr.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

pub fn gmeans(tpr: f64, fpr: f64) -> f64 {
    (tpr * (1.0 - fpr)).max(0.0).sqrt()
}

/// The point maximizing `sqrt(tpr * (1 - fpr))`; ties go to the larger
/// threshold. The `+inf` sentinel is only returned when the curve has no
/// other point. Returns `(threshold, g)`.
pub fn gmeans_threshold(points: &[RocPoint]) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    let finite = points.iter().any(|p| p.threshold.is_finite());
    for point in points.iter().filter(|p| !finite || p.threshold.is_finite()) {
        let g = gmeans(point.tpr, point.fpr);
        let better = match g.total_cmp(&best.1) {
            Ordering::Greater => true,
            Ordering::Equal => point.threshold > best.0,
            Ordering::Less => false,
        };
        if better {
            best = (point.threshold, g);
        }
    }
    best
}

/// Outcome of calibrating one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCalibration {
    pub calibrated: bool,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmeans: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Selected thresholds in the shape of the config threshold block, plus the
/// per-step details. The serialized form can be read back as [`Thresholds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(flatten)]
    pub thresholds: Thresholds,
    pub steps: BTreeMap<Step, StepCalibration>,
}

/// Distinct scores plus the midpoints between neighbours, descending.
fn candidates(sorted_desc: &[ScoredSample]) -> Vec<f64> {
    let mut distinct: Vec<f64> = sorted_desc.iter().map(|s| s.score).collect();
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() * 2);
    for (i, &score) in distinct.iter().enumerate() {
        out.push(score);
        if let Some(&next) = distinct.get(i + 1) {
            out.push(score + (next - score) / 2.0);
        }
    }
    out
}

/// g-means argmax over the candidate set of one sample set.
fn select(samples: &[ScoredSample]) -> Result<(f64, f64, f64)> {
    let c = counts(samples)?;
    let mut pos: Vec<f64> = c.sorted.iter().filter(|s| s.label).map(|s| s.score).collect();
    let mut neg: Vec<f64> = c.sorted.iter().filter(|s| !s.label).map(|s| s.score).collect();
    pos.reverse();
    neg.reverse();
    let at_least = |ascending: &[f64], t: f64| ascending.len() - ascending.partition_point(|&s| s < t);
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    // Candidates are visited in descending order, so a strict comparison
    // keeps the larger threshold on ties.
    for t in candidates(&c.sorted) {
        let tpr = at_least(&pos, t) as f64 / c.positives as f64;
        let fpr = at_least(&neg, t) as f64 / c.negatives as f64;
        let g = gmeans(tpr, fpr);
        if g > best.1 {
            best = (t, g);
        }
    }
    let area = auc(&roc_curve(samples)?);
    Ok((best.0, best.1, area))
}

/// Independent g-means selection for each step. Steps without both classes
/// (or absent from `samples`) keep the threshold from `base`.
pub fn calibrate_steps(samples: &BTreeMap<Step, Vec<ScoredSample>>, base: &Thresholds) -> CalibrationResult {
    let mut thresholds = *base;
    let mut steps = BTreeMap::new();
    for step in Step::ALL {
        let set = samples.get(&step).map(Vec::as_slice).unwrap_or_default();
        let positives = set.iter().filter(|s| s.label).count();
        let negatives = set.len() - positives;
        let outcome = match select(set) {
            Ok((threshold, g, area)) => {
                thresholds.per_step.set(step, Some(threshold));
                StepCalibration {
                    calibrated: true,
                    threshold,
                    gmeans: Some(g),
                    auc: Some(area),
                    positives,
                    negatives,
                    reason: None,
                }
            }
            Err(e) => StepCalibration {
                calibrated: false,
                threshold: base.for_step(step),
                gmeans: None,
                auc: None,
                positives,
                negatives,
                reason: Some(e.to_string()),
            },
        };
        steps.insert(step, outcome);
    }
    CalibrationResult { thresholds, steps }
}

/// `threshold,tpr,fpr` rows; the leading sentinel is written as `inf`.
pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,tpr,fpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.tpr, p.fpr);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> Vec<ScoredSample> {
        vec![
            ScoredSample::new(0.9, true),
            ScoredSample::new(0.8, true),
            ScoredSample::new(0.2, false),
            ScoredSample::new(0.1, false),
        ]
    }

    #[test]
    fn separable_curve() {
        let roc = roc_curve(&separable()).unwrap();
        assert_eq!(roc.len(), 5);
        let at_08 = roc.iter().find(|p| p.threshold == 0.8).unwrap();
        assert_eq!((at_08.tpr, at_08.fpr), (1.0, 0.0));
        assert_eq!(auc(&roc), 1.0);
        assert_eq!(gmeans_threshold(&roc), (0.8, 1.0));
    }

    #[test]
    fn all_equal_scores() {
        let samples = [ScoredSample::new(0.5, true), ScoredSample::new(0.5, false)];
        let roc = roc_curve(&samples).unwrap();
        let pairs: Vec<_> = roc.iter().map(|p| (p.tpr, p.fpr)).collect();
        assert_eq!(pairs, vec![(0.0, 0.0), (1.0, 1.0)]);
        let (t, g) = gmeans_threshold(&roc);
        assert_eq!((t, g), (0.5, 0.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let samples = [ScoredSample::new(0.5, true)];
        assert!(matches!(roc_curve(&samples), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_class_step_keeps_default() {
        let mut samples = BTreeMap::new();
        samples.insert(Step::Step1, separable());
        samples.insert(Step::Do, vec![ScoredSample::new(0.7, true)]);
        let result = calibrate_steps(&samples, &Thresholds::default());
        assert_eq!(result.steps[&Step::Step1].threshold, 0.8);
        assert!(!result.steps[&Step::Do].calibrated);
        assert_eq!(result.thresholds.for_step(Step::Do), 0.6);
        assert_eq!(result.thresholds.for_step(Step::Step1), 0.8);
    }

    #[test]
    fn result_reads_back_as_thresholds() {
        let mut samples = BTreeMap::new();
        samples.insert(Step::So, separable());
        let result = calibrate_steps(&samples, &Thresholds::default());
        let json = serde_json::to_string(&result).unwrap();
        let back: Thresholds = serde_json::from_str(&json).unwrap();
        assert_eq!(back, result.thresholds);
        assert_eq!(back.for_step(Step::So), 0.8);
    }

    #[test]
    fn csv_layout() {
        let csv = roc_to_csv(&roc_curve(&separable()).unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("threshold,tpr,fpr"));
        assert_eq!(lines.next(), Some("inf,0,0"));
        assert_eq!(lines.next(), Some("0.9,0.5,0"));
    }
}
