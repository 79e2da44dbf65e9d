//! Acceptance checks, one line per criterion. Run with
//! `cargo test --test acceptance`. The live check runs only when
//! `PPE_LIVE_CONFIG` and `PPE_LIVE_MANIFEST` point at a real-backend config
//! and a manifest.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ppe_compliance::calibration::{auc, calibrate_steps, gmeans, gmeans_threshold, roc_curve, ScoredSample};
use ppe_compliance::compliance::{
    affinity, cosine, decide_attribute_threshold, decide_worn_threshold, AffinityMatrix, AttributeScore,
    EmbeddingMatrix, EmbeddingRole, Step, Thresholds,
};
use ppe_compliance::evaluation::{contains_match, exact_match, format_table_value, preprocess_answer};
use ppe_compliance::pipeline::config::{DecisionEngine, DetectorConfig};
use ppe_compliance::pipeline::synthetic::{
    oracle_config, seafood_spec_items, write_oracle_dataset, SEAFOOD_ATTRIBUTES_RESPONSE, SEAFOOD_FACTORY,
    SEAFOOD_ITEMS_RESPONSE,
};
use ppe_compliance::pipeline::{load_manifest, run_pipeline, Backends, PipelineConfig, REPORT_JSON_SCHEMA};
use ppe_compliance::safety_spec::{
    parse_attributes_response, parse_items_response, render_attribute_prompt, render_attributes_prompt,
    render_items_prompt, render_wearing_prompt, AttributeSpec, ObservabilityClass,
};
use ppe_compliance::scene::{lora_apply, lora_init, train, FineTuneBatch, LoraAdapter, ToyAttentionModel};

type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if row.iter().any(|v| v.abs() > 1e-3) {
                break row;
            }
        })
        .collect()
}

// Double-double arithmetic for the cosine reference.

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn dd_add((ah, al): (f64, f64), (bh, bl): (f64, f64)) -> (f64, f64) {
    let (s, e) = two_sum(ah, bh);
    let e = e + al + bl;
    two_sum(s, e)
}

fn dd_mul((ah, al): (f64, f64), (bh, bl): (f64, f64)) -> (f64, f64) {
    let (p, e) = two_prod(ah, bh);
    two_sum(p, e + ah * bl + al * bh)
}

fn dd_div(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let q1 = a.0 / b.0;
    let r = dd_add(a, dd_mul((-q1, 0.0), b));
    let q2 = r.0 / b.0;
    let r = dd_add(r, dd_mul((-q2, 0.0), b));
    let q3 = r.0 / b.0;
    dd_add(dd_add((q1, 0.0), (q2, 0.0)), (q3, 0.0))
}

fn dd_sqrt(a: (f64, f64)) -> (f64, f64) {
    let x = a.0.sqrt();
    // One Newton step: x + (a - x^2) / 2x.
    let residual = dd_add(a, dd_mul((-x, 0.0), (x, 0.0)));
    dd_add((x, 0.0), dd_div(residual, (2.0 * x, 0.0)))
}

fn dd_dot(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0), |acc, (x, y)| dd_add(acc, two_prod(*x, *y)))
}

fn reference_cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = dd_mul(dd_sqrt(dd_dot(a, a)), dd_sqrt(dd_dot(b, b)));
    dd_div(dd_dot(a, b), denom).0
}

fn decision_core() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let (p, i, d) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(2..17));
        let persons = random_rows(&mut rng, p, d);
        let items = random_rows(&mut rng, i, d);
        let pm = EmbeddingMatrix::from_rows(&persons, EmbeddingRole::PersonImage).map_err(|e| e.to_string())?;
        let im = EmbeddingMatrix::from_rows(&items, EmbeddingRole::ItemText).map_err(|e| e.to_string())?;
        let a = affinity(&pm, &im).map_err(|e| e.to_string())?;
        ensure!(a.shape() == (p, i), "case {case}: shape {:?}", a.shape());
        let unit = |v: &Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        for r in 0..p {
            for c in 0..i {
                let (u, w) = (unit(&persons[r]), unit(&items[c]));
                let mut naive = 0.0;
                for k in 0..d {
                    naive += u[k] * w[k];
                }
                let got = a.get(r, c);
                ensure!((got - naive).abs() <= 1e-6, "case {case}: A[{r},{c}] = {got}, naive {naive}");
            }
        }
    }
    for case in 0..200 {
        let d = rng.random_range(2..64);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let rows = random_rows(&mut rng, 2, d);
        let a: Vec<f64> = rows[0].iter().map(|x| x * scale).collect();
        let b = &rows[1];
        let got = cosine(&a, b).map_err(|e| e.to_string())?;
        let want = reference_cosine(&a, b);
        ensure!((got - want).abs() <= 1e-9, "case {case}: cosine {got} vs reference {want}");
    }
    Ok(())
}

fn matrix(values: &[f64], rows: usize, cols: usize) -> AffinityMatrix {
    AffinityMatrix::new(
        DMatrix::from_row_slice(rows, cols, values),
        (0..rows).map(|r| format!("p{r}")).collect(),
        (0..cols).map(|c| format!("i{c}")).collect(),
    )
    .expect("valid matrix")
}

fn threshold_rules() -> Result<(), String> {
    // Inclusive at the boundary, for both steps.
    let delta: f64 = 0.6;
    let below = f64::from_bits(delta.to_bits() - 1);
    let decisions = decide_worn_threshold(&matrix(&[delta, below], 1, 2), delta);
    ensure!(decisions[0].worn && !decisions[1].worn, "step-1 boundary: {decisions:?}");
    let score = |similarity| AttributeScore {
        person_id: "p0".into(),
        item: "boots".into(),
        attribute: AttributeSpec::new("rubber", ObservabilityClass::So).unwrap(),
        similarity,
    };
    ensure!(decide_attribute_threshold(&score(delta), delta).satisfied, "step-2 equality must satisfy");
    ensure!(!decide_attribute_threshold(&score(below), delta).satisfied, "step-2 below must fail");

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..200 {
        let (p, i, d) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(2..12));
        let persons = random_rows(&mut rng, p, d);
        let items = random_rows(&mut rng, i, d);
        let role = EmbeddingRole::PersonImage;
        let a = affinity(
            &EmbeddingMatrix::from_rows(&persons, role).unwrap(),
            &EmbeddingMatrix::from_rows(&items, EmbeddingRole::ItemText).unwrap(),
        )
        .unwrap();

        // Monotone in delta: raising it never adds a worn verdict.
        let (lo, hi) = {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(-1.0..1.0);
            (x.min(y), x.max(y))
        };
        let at_lo = decide_worn_threshold(&a, lo);
        let at_hi = decide_worn_threshold(&a, hi);
        for (l, h) in at_lo.iter().zip(&at_hi) {
            ensure!(!h.worn || l.worn, "case {case}: worn at {hi} but not at {lo}");
        }
        for s in [lo, hi] {
            let sc = score(s);
            ensure!(
                !decide_attribute_threshold(&sc, hi).satisfied || decide_attribute_threshold(&sc, lo).satisfied,
                "case {case}: step-2 monotonicity"
            );
        }

        // Positive rescaling of embeddings changes no decision.
        let scaled: Vec<Vec<f64>> = persons
            .iter()
            .map(|r| {
                let c = 10f64.powf(rng.random_range(-3.0..3.0));
                r.iter().map(|x| x * c).collect()
            })
            .collect();
        let b = affinity(
            &EmbeddingMatrix::from_rows(&scaled, role).unwrap(),
            &EmbeddingMatrix::from_rows(&items, EmbeddingRole::ItemText).unwrap(),
        )
        .unwrap();
        let delta = rng.random_range(-0.9..0.9);
        for (x, y) in decide_worn_threshold(&a, delta).iter().zip(decide_worn_threshold(&b, delta)) {
            if (x.score - delta).abs() > 1e-9 {
                ensure!(x.worn == y.worn, "case {case}: rescaling flipped ({}, {})", x.person_id, x.item);
            }
        }
        let c = rng.random_range(0.01..100.0);
        let v: Vec<f64> = items[0].iter().map(|x| x * c).collect();
        let (c1, c2) = (cosine(&persons[0], &items[0]).unwrap(), cosine(&persons[0], &v).unwrap());
        ensure!((c1 - c2).abs() <= 1e-12, "case {case}: cosine not scale invariant");

        // Permuting persons permutes the decisions.
        let mut order: Vec<usize> = (0..p).collect();
        for k in (1..p).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        let permuted: Vec<Vec<f64>> = order.iter().map(|&k| persons[k].clone()).collect();
        let pa = affinity(
            &EmbeddingMatrix::from_rows(&permuted, role).unwrap(),
            &EmbeddingMatrix::from_rows(&items, EmbeddingRole::ItemText).unwrap(),
        )
        .unwrap();
        let base = decide_worn_threshold(&a, delta);
        let moved = decide_worn_threshold(&pa, delta);
        for (row, &src) in order.iter().enumerate() {
            for col in 0..i {
                let (m, o) = (&moved[row * i + col], &base[src * i + col]);
                ensure!(m.worn == o.worn && m.score == o.score, "case {case}: permutation mismatch");
            }
        }
    }
    Ok(())
}

fn lora_suite() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rand_matrix = |rng: &mut ChaCha8Rng, r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));

    for (d, k, r) in [(4, 6, 2), (8, 8, 3), (3, 5, 1), (7, 4, 3)] {
        let w = rand_matrix(&mut rng, d, k);
        let fresh = lora_init(d, k, r, 8.0, 5).map_err(|e| e.to_string())?;
        let same = lora_apply(&w, &fresh).map_err(|e| e.to_string())?;
        let identical = w.iter().zip(same.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(identical, "zero-init adapter changed W ({d}x{k}, r={r})");

        let a = rand_matrix(&mut rng, r, k);
        let b = rand_matrix(&mut rng, d, r);
        let alpha = 3.0;
        let adapter = LoraAdapter::new(a.clone(), b.clone(), alpha).map_err(|e| e.to_string())?;
        let got = lora_apply(&w, &adapter).map_err(|e| e.to_string())?;
        for i in 0..d {
            for j in 0..k {
                let mut ba = 0.0;
                for t in 0..r {
                    ba += b[(i, t)] * a[(t, j)];
                }
                let naive = w[(i, j)] + alpha / r as f64 * ba;
                ensure!((got[(i, j)] - naive).abs() <= 1e-9, "W'[{i},{j}] = {}, naive {naive}", got[(i, j)]);
            }
        }
    }

    // Analytic gradients against central differences, with non-zero B so
    // that every block has signal.
    for seed in 0..4u64 {
        let (d, k, r) = (6, 8, 2);
        let mut model = ToyAttentionModel::seeded(d, k, r, 4.0, 5, seed).map_err(|e| e.to_string())?;
        *model.q_adapter.b_mut() = rand_matrix(&mut rng, d, r) * 0.5;
        *model.k_adapter.b_mut() = rand_matrix(&mut rng, d, r) * 0.5;
        *model.q_adapter.a_mut() = rand_matrix(&mut rng, r, k) * 0.5;
        *model.k_adapter.a_mut() = rand_matrix(&mut rng, r, k) * 0.5;
        let samples: Vec<(DVector<f64>, usize)> =
            (0..4).map(|s| (DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)), s % 5)).collect();
        let grads = model.gradients(&samples).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let blocks: [(&str, &DMatrix<f64>, fn(&mut ToyAttentionModel) -> &mut DMatrix<f64>); 4] = [
            ("q.A", &grads.q_a, |m| m.q_adapter.a_mut()),
            ("q.B", &grads.q_b, |m| m.q_adapter.b_mut()),
            ("k.A", &grads.k_a, |m| m.k_adapter.a_mut()),
            ("k.B", &grads.k_b, |m| m.k_adapter.b_mut()),
        ];
        for (name, analytic, slot) in blocks {
            for idx in 0..analytic.len() {
                let mut plus = model.clone();
                slot(&mut plus)[idx] += h;
                let mut minus = model.clone();
                slot(&mut minus)[idx] -= h;
                let fd = (plus.loss(&samples).unwrap() - minus.loss(&samples).unwrap()) / (2.0 * h);
                let an = analytic[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                ensure!(rel <= 1e-4, "seed {seed} {name}[{idx}]: analytic {an}, finite difference {fd}");
            }
        }
    }

    // Training moves only the adapters, and the loss goes down.
    let (mut model, batch) = toy_task();
    let (wq, wk) = (model.w_q().clone(), model.w_k().clone());
    let curve = train(&mut model, &batch).map_err(|e| e.to_string())?;
    let frozen = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(frozen(&wq, model.w_q()) && frozen(&wk, model.w_k()), "base weights changed during training");
    for (step, pair) in curve.windows(2).enumerate() {
        ensure!(pair[1] < pair[0], "loss rose at step {step}: {} -> {}", pair[0], pair[1]);
    }
    let (first, last) = (curve[0], *curve.last().unwrap());
    ensure!(last < 0.5 * first, "loss only fell from {first} to {last}");
    Ok(())
}

/// Fixed-seed caption-selection task shared with the LoRA regression test.
fn toy_task() -> (ToyAttentionModel, FineTuneBatch) {
    let model = ToyAttentionModel::seeded(8, 8, 2, 8.0, 4, 2024).expect("valid toy model");
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let samples = (0..12)
        .map(|s| (DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0)), s % 4))
        .collect();
    (model, FineTuneBatch::new(samples, 0.01, 300).expect("valid batch"))
}

fn brute_roc(samples: &[ScoredSample]) -> Vec<(f64, f64, f64)> {
    let p = samples.iter().filter(|s| s.label).count() as f64;
    let n = samples.len() as f64 - p;
    let mut thresholds: Vec<f64> = samples.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    thresholds
        .into_iter()
        .map(|t| {
            let tp = samples.iter().filter(|s| s.label && s.score >= t).count() as f64;
            let fp = samples.iter().filter(|s| !s.label && s.score >= t).count() as f64;
            (t, tp / p, fp / n)
        })
        .collect()
}

fn mann_whitney(samples: &[ScoredSample]) -> f64 {
    let pos: Vec<f64> = samples.iter().filter(|s| s.label).map(|s| s.score).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| !s.label).map(|s| s.score).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<ScoredSample> {
    loop {
        let samples: Vec<ScoredSample> = (0..n)
            .map(|_| {
                let label = rng.random_bool(0.5);
                let base = f64::from(rng.random_range(0..levels)) / f64::from(levels);
                ScoredSample::new(base + if label { 0.1 } else { 0.0 }, label)
            })
            .collect();
        if samples.iter().any(|s| s.label) && samples.iter().any(|s| !s.label) {
            return samples;
        }
    }
}

fn calibration_suite() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..150 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..30);
        let samples = random_samples(&mut rng, n, levels);
        let roc = roc_curve(&samples).map_err(|e| e.to_string())?;
        let brute = brute_roc(&samples);
        ensure!(roc.len() == brute.len(), "case {case}: {} points vs {}", roc.len(), brute.len());
        for (pt, (t, tpr, fpr)) in roc.iter().zip(&brute) {
            ensure!(
                pt.threshold == *t && pt.tpr == *tpr && pt.fpr == *fpr,
                "case {case}: point {pt:?} vs ({t}, {tpr}, {fpr})"
            );
        }
        let area = auc(&roc);
        let mw = mann_whitney(&samples);
        ensure!((area - mw).abs() <= 1e-9, "case {case}: auc {area} vs pair count {mw}");
        let warped: Vec<ScoredSample> = samples.iter().map(|s| ScoredSample::new((3.0 * s.score).exp(), s.label)).collect();
        ensure!((auc(&roc_curve(&warped).unwrap()) - area).abs() <= 1e-12, "case {case}: auc not rank invariant");

        let (t, g) = gmeans_threshold(&roc);
        let observed: Vec<&(f64, f64, f64)> = brute.iter().filter(|(t, _, _)| t.is_finite()).collect();
        let best = observed.iter().map(|(_, tpr, fpr)| gmeans(*tpr, *fpr)).fold(f64::NEG_INFINITY, f64::max);
        let larger = observed
            .iter()
            .filter(|(_, tpr, fpr)| gmeans(*tpr, *fpr) == best)
            .map(|(t, _, _)| *t)
            .fold(f64::NEG_INFINITY, f64::max);
        ensure!(g == best && t == larger, "case {case}: g-means ({t}, {g}) vs scan ({larger}, {best})");
    }

    // Per-step calibration against a brute-force scan over scores and midpoints.
    let mut per_step = BTreeMap::new();
    for step in Step::ALL {
        per_step.insert(step, random_samples(&mut rng, 40, 17));
    }
    let result = calibrate_steps(&per_step, &Thresholds::default());
    for (step, samples) in &per_step {
        let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let mut candidates = scores.clone();
        candidates.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        let p = samples.iter().filter(|s| s.label).count() as f64;
        let n = samples.len() as f64 - p;
        let g_at = |t: f64| {
            let tp = samples.iter().filter(|s| s.label && s.score >= t).count() as f64;
            let fp = samples.iter().filter(|s| !s.label && s.score >= t).count() as f64;
            gmeans(tp / p, fp / n)
        };
        let best = candidates.iter().map(|&t| g_at(t)).fold(f64::NEG_INFINITY, f64::max);
        let want = candidates.iter().copied().filter(|&t| g_at(t) == best).fold(f64::NEG_INFINITY, f64::max);
        let got = &result.steps[step];
        ensure!(got.calibrated && got.threshold == want, "{step}: threshold {} vs scan {want}", got.threshold);
        ensure!(
            got.threshold >= scores[0] && got.threshold <= *scores.last().unwrap(),
            "{step}: threshold outside observed range"
        );
    }
    let again = calibrate_steps(&per_step, &Thresholds::default());
    ensure!(
        serde_json::to_string(&again).unwrap() == serde_json::to_string(&result).unwrap(),
        "calibration is not deterministic"
    );

    let separable: Vec<ScoredSample> = (0..50).map(|i| ScoredSample::new(f64::from(i), i >= 25)).collect();
    ensure!(auc(&roc_curve(&separable).unwrap()) == 1.0, "separable AUC is not 1");
    let chance: Vec<ScoredSample> =
        (0..2000).map(|_| ScoredSample::new(rng.random::<f64>(), rng.random_bool(0.5))).collect();
    let area = auc(&roc_curve(&chance).unwrap());
    ensure!((area - 0.5).abs() <= 0.1, "chance AUC {area}");
    Ok(())
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'B', 'c', ' ', ' ', '-', '.', '!', '1', 'É', '\t', ',', 'x'];
    let len = rng.random_range(0..10);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn metric_suite() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut exact = 0;
    for case in 0..5000 {
        let answer = random_text(&mut rng);
        // Half the predictions are respellings of the answer, so matches occur.
        let prediction = if rng.random_bool(0.5) {
            answer.to_uppercase().replace(' ', " -").replace('.', "!")
        } else {
            random_text(&mut rng)
        };
        if exact_match(&prediction, &answer) {
            exact += 1;
            ensure!(contains_match(&prediction, &answer), "case {case}: EM without Contains: {prediction:?} / {answer:?}");
        }
        let once = preprocess_answer(&prediction);
        ensure!(preprocess_answer(&once) == once, "case {case}: preprocess not idempotent on {prediction:?}");
    }
    ensure!(exact > 100, "fuzz produced only {exact} exact matches");

    let mask = "The mask can prevent airborne particles, bacteria, and viruses.";
    ensure!(contains_match(mask, "prevent airborne particles"), "mask example not Contains-correct");
    ensure!(!exact_match(mask, "prevent airborne particles"), "mask example should not be an exact match");

    let row = [76.8, 76.9, 61.4, 65.8];
    let mean = row.iter().sum::<f64>() / 4.0;
    ensure!(format_table_value(mean, 1) == "70.2", "row mean renders as {}", format_table_value(mean, 1));
    let timing = (0.4 + 2.8 + 2.1 + 2.9) / 4.0;
    ensure!(format_table_value(timing, 1) == "2.1", "timing mean renders as {}", format_table_value(timing, 1));
    Ok(())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ppe-compliance"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn end_to_end() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let manifest = write_oracle_dataset(root).map_err(|e| e.to_string())?;
    let config = root.join("config.json");
    std::fs::write(&config, oracle_config().to_json()).map_err(|e| e.to_string())?;
    let p = |name: &str| root.join(name).to_str().unwrap().to_owned();
    let (m, c) = (manifest.to_str().unwrap(), config.to_str().unwrap());
    cli(&["detect", "--manifest", m, "--config", c, "--out", &p("run1.json")])?;
    cli(&["detect", "--manifest", m, "--config", c, "--out", &p("run2.json")])?;
    let (first, second) = (read(&root.join("run1.json"))?, read(&root.join("run2.json"))?);
    ensure!(first == second, "reports of two identical runs differ");

    cli(&["evaluate", "--report", &p("run1.json"), "--manifest", m, "--out", &p("metrics.json"), "--csv", &p("metrics.csv")])?;
    let metrics: Value = serde_json::from_str(&read(&root.join("metrics.json"))?).map_err(|e| e.to_string())?;
    for key in ["step1", "do", "so", "io", "mean"] {
        ensure!(metrics["accuracies"][key] == 1.0, "{key} accuracy is {}", metrics["accuracies"][key]);
    }
    let csv = read(&root.join("metrics.csv"))?;
    ensure!(csv.lines().nth(1) == Some("100.0,100.0,100.0,100.0,100.0"), "metrics row {csv:?}");

    let report: Value = serde_json::from_str(&first).map_err(|e| e.to_string())?;
    let mut attribute_decisions = 0;
    for image in report["images"].as_array().unwrap() {
        for person in image["persons"].as_array().unwrap() {
            for item in person["items"].as_array().unwrap() {
                let name = &item["item"];
                let wear = person["wear"].as_array().unwrap().iter().find(|w| &w["item"] == name).unwrap();
                ensure!(wear["worn"] == true, "attribute decisions for a not-worn pair ({}, {name})", person["person_id"]);
                attribute_decisions += item["attributes"].as_array().unwrap().len();
            }
        }
    }
    ensure!(attribute_decisions > 0, "no attribute decisions at all");
    Ok(())
}

fn prompt_protocol() -> Result<(), String> {
    let names = ["hairnet", "face mask", "gloves", "aprons", "boots"];
    ensure!(
        render_items_prompt(SEAFOOD_FACTORY).unwrap() == "List the items people should wear in a seafood factory.",
        "item prompt differs"
    );
    ensure!(
        render_attributes_prompt(SEAFOOD_FACTORY, &names).unwrap()
            == r#"Summarize the required visual features of the ["hairnet", "face mask", "gloves", "aprons", "boots"] in a seafood factory."#,
        "attribute prompt differs"
    );
    ensure!(render_wearing_prompt("boots") == "a person wearing boots", "wearing prompt differs");
    let attr = AttributeSpec::new("waterproof", ObservabilityClass::Io).unwrap();
    ensure!(render_attribute_prompt(&attr, "boots") == "a waterproof boots", "attribute template differs");

    let parsed_names = parse_items_response(SEAFOOD_ITEMS_RESPONSE).map_err(|e| e.to_string())?;
    ensure!(parsed_names == names, "parsed items {parsed_names:?}");
    let items = parse_attributes_response(SEAFOOD_ATTRIBUTES_RESPONSE, &parsed_names).map_err(|e| e.to_string())?;
    ensure!(items.len() == 5, "{} items parsed", items.len());
    for item in &items {
        for class in ObservabilityClass::ALL {
            ensure!(item.attribute(class).class == class, "{}: wrong class slot", item.name());
        }
    }
    ensure!(items == seafood_spec_items(), "parsed spec differs from the expected five items");
    Ok(())
}

/// Decision fields of a report: everything but engine and backend ids.
fn decision_values(report: &ppe_compliance::pipeline::ComplianceReport) -> Vec<String> {
    let mut out = Vec::new();
    for image in &report.images {
        for d in image.wear_decisions() {
            out.push(format!("{}/{}/{}/{}/{}", image.image_id, d.person_id, d.item, d.score, d.worn));
        }
        for a in image.attribute_decisions() {
            out.push(format!(
                "{}/{}/{}/{}/{}/{}",
                image.image_id, a.person_id, a.item, a.attribute.phrase, a.similarity, a.satisfied
            ));
        }
    }
    out
}

fn keys(value: &Value) -> Vec<String> {
    value.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
}

fn ablation_by_config() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = load_manifest(&write_oracle_dataset(dir.path()).unwrap()).map_err(|e| e.to_string())?;
    let base = oracle_config();
    let mut swapped = base.clone();
    swapped.backends.detector = DetectorConfig::Mock {
        id: "mock-b".into(),
        score: 0.9,
        fail_on: Vec::new(),
    };
    let mut llm_engine = base.clone();
    llm_engine.engine = DecisionEngine::Llm;
    let runs: Vec<(&str, PipelineConfig)> = vec![("mock-a", base), ("mock-b", swapped), ("llm", llm_engine)];
    let mut reference: Option<(Vec<String>, Value)> = None;
    for (name, config) in runs {
        let report = run_pipeline(&manifest, &config).map_err(|e| e.to_string())?;
        let values = decision_values(&report);
        let json: Value = serde_json::to_value(&report).unwrap();
        match &reference {
            None => reference = Some((values, json)),
            Some((want, want_json)) => {
                ensure!(&values == want, "{name}: decisions differ from the reference run");
                ensure!(keys(&json) == keys(want_json), "{name}: report layout differs");
                ensure!(
                    keys(&json["images"][0]["persons"][0]) == keys(&want_json["images"][0]["persons"][0]),
                    "{name}: person layout differs"
                );
            }
        }
        if name == "llm" {
            let engines: Vec<&str> = report.images.iter().flat_map(|i| i.wear_decisions()).map(|d| d.engine.as_str()).collect();
            ensure!(engines.iter().all(|e| e.starts_with("llm:")), "llm run used engines {engines:?}");
        }
    }
    Ok(())
}

fn live_smoke() -> Result<Option<()>, String> {
    let (Ok(config), Ok(manifest)) = (std::env::var("PPE_LIVE_CONFIG"), std::env::var("PPE_LIVE_MANIFEST")) else {
        return Ok(None);
    };
    let config = PipelineConfig::load(Path::new(&config)).map_err(|e| e.to_string())?;
    let mut manifest = load_manifest(Path::new(&manifest)).map_err(|e| e.to_string())?;
    manifest.images.truncate(1);
    let report = run_pipeline(&manifest, &config).map_err(|e| e.to_string())?;
    let json = serde_json::to_value(&report).unwrap();
    let schema: Value = serde_json::from_str(REPORT_JSON_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator.iter_errors(&json).map(|e| e.to_string()).collect();
    ensure!(errors.is_empty(), "schema errors: {errors:?}");
    for image in &report.images {
        for d in image.wear_decisions() {
            ensure!((-1.0..=1.0).contains(&d.score), "score {} out of range", d.score);
        }
        for a in image.attribute_decisions() {
            ensure!((-1.0..=1.0).contains(&a.similarity), "similarity {} out of range", a.similarity);
        }
    }
    let backends = Backends::from_config(&config, &manifest).map_err(|e| e.to_string())?;
    let image = &manifest.images[0];
    let frame = ppe_compliance::detection::Frame::load(image.id.clone(), &manifest.resolve(image)).map_err(|e| e.to_string())?;
    let views = [frame.view()];
    let embedded = backends
        .embedder
        .run(|e| ppe_compliance::compliance::embed_images(&views, e, EmbeddingRole::PersonImage))
        .map_err(|e| e.to_string())?;
    let norm = embedded.row(0).norm();
    ensure!((norm - 1.0).abs() <= 1e-4, "embedding norm {norm}");
    Ok(Some(()))
}

fn main() {
    let criteria: [(&str, Duration, Check); 8] = [
        ("decision core matches naive and high-precision oracles", Duration::from_secs(5), decision_core),
        ("inclusive threshold rules, monotone, scale and permutation safe", Duration::from_secs(5), threshold_rules),
        ("low-rank adapter identity, product, gradients, frozen base, training", Duration::from_secs(30), lora_suite),
        ("ROC, AUC and g-means agree with brute-force oracles", Duration::from_secs(30), calibration_suite),
        ("answer metrics and table arithmetic", Duration::from_secs(5), metric_suite),
        ("end-to-end mock run is perfect, reproducible and gated", Duration::from_secs(10), end_to_end),
        ("prompt templates and canned replies", Duration::from_secs(1), prompt_protocol),
        ("backend and engine swaps leave decisions unchanged", Duration::from_secs(10), ablation_by_config),
    ];
    let mut failed = 0;
    for (n, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed <= *limit {
                Ok(())
            } else {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(()) => println!("criterion {}: PASS  {name} ({elapsed:.2?})", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({elapsed:.2?}): {why}", n + 1);
            }
        }
    }
    let start = Instant::now();
    match live_smoke() {
        Ok(None) => println!("criterion 9: SKIP  live backends (set PPE_LIVE_CONFIG and PPE_LIVE_MANIFEST)"),
        Ok(Some(())) => println!("criterion 9: PASS  live backends ({:.2?})", start.elapsed()),
        Err(why) => {
            failed += 1;
            println!("criterion 9: FAIL  live backends: {why}");
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
