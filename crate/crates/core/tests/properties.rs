use std::collections::BTreeMap;

use proptest::prelude::*;

use ppe_compliance::calibration::{auc, calibrate_steps, gmeans_threshold, roc_curve, ScoredSample};
use ppe_compliance::compliance::{Step, Thresholds};
use ppe_compliance::evaluation::{contains_match, exact_match, format_table_value, preprocess_answer};

fn labelled() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((-1.0f64..1.0, any::<bool>()), 2..80)
        .prop_filter("both classes", |v| v.iter().any(|s| s.1) && v.iter().any(|s| !s.1))
        .prop_map(|v| v.into_iter().map(|(s, l)| ScoredSample::new(s, l)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn roc_is_monotone_and_anchored(samples in labelled()) {
        let roc = roc_curve(&samples).unwrap();
        prop_assert_eq!((roc[0].tpr, roc[0].fpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        prop_assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].threshold < w[0].threshold);
            prop_assert!(w[1].tpr >= w[0].tpr && w[1].fpr >= w[0].fpr);
        }
        let area = auc(&roc);
        prop_assert!((0.0..=1.0).contains(&area));
    }

    #[test]
    fn flipping_labels_mirrors_auc(samples in labelled()) {
        let flipped: Vec<ScoredSample> = samples.iter().map(|s| ScoredSample::new(s.score, !s.label)).collect();
        let negated: Vec<ScoredSample> = flipped.iter().map(|s| ScoredSample::new(-s.score, s.label)).collect();
        let a = auc(&roc_curve(&samples).unwrap());
        let b = auc(&roc_curve(&flipped).unwrap());
        prop_assert!((a + b - 1.0).abs() <= 1e-9);
        prop_assert!((auc(&roc_curve(&negated).unwrap()) - a).abs() <= 1e-9);
    }

    #[test]
    fn gmeans_threshold_is_an_observed_score(samples in labelled()) {
        let roc = roc_curve(&samples).unwrap();
        let (t, g) = gmeans_threshold(&roc);
        prop_assert!(samples.iter().any(|s| s.score == t));
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn calibrated_thresholds_are_used_per_step(samples in labelled(), lonely in -1.0f64..1.0) {
        let mut per_step = BTreeMap::new();
        per_step.insert(Step::Step1, samples.clone());
        per_step.insert(Step::So, vec![ScoredSample::new(lonely, true)]);
        let base = Thresholds::default();
        let result = calibrate_steps(&per_step, &base);
        prop_assert!(result.steps[&Step::Step1].calibrated);
        prop_assert!(!result.steps[&Step::So].calibrated);
        prop_assert_eq!(result.thresholds.for_step(Step::So), base.for_step(Step::So));
        prop_assert_eq!(result.thresholds.for_step(Step::Step1), result.steps[&Step::Step1].threshold);
        let json = serde_json::to_string(&result).unwrap();
        let back: Thresholds = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.for_step(Step::Step1), result.thresholds.for_step(Step::Step1));
    }

    #[test]
    fn exact_match_implies_contains(prediction in "[a-zA-Z .,!?'-]{0,16}", answer in "[a-zA-Z .,!?'-]{0,16}") {
        if exact_match(&prediction, &answer) {
            prop_assert!(contains_match(&prediction, &answer));
        }
        prop_assert!(!exact_match(&prediction, &answer) || !preprocess_answer(&answer).is_empty());
    }

    #[test]
    fn preprocessing_is_idempotent(text in "\\PC{0,24}") {
        let once = preprocess_answer(&text);
        prop_assert_eq!(preprocess_answer(&once), once.clone());
        prop_assert!(exact_match(&text, &once) || once.is_empty());
    }

    #[test]
    fn table_values_round_half_up(tenths in 0u32..100_000) {
        // k/10 + 0.05 sits on the rounding boundary.
        let value = f64::from(tenths) / 10.0 + 0.05;
        let want = format!("{:.1}", f64::from(tenths + 1) / 10.0);
        prop_assert_eq!(format_table_value(value, 1), want);
    }
}
