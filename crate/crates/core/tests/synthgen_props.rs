use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rhd_core::pattern_metrics::{classify_triples, step_attention, PatternConfig, TripleKind};
use rhd_core::rhd_detector::{analyze_trace, boundaries_for, FeatureConfig, FitConfig};
use rhd_core::synthgen::{
    dataset_spec, gen_compact_trace, gen_dataset, gen_full_bundle, write_dataset, DatasetParams, FullDims,
};
use rhd_core::trace_store::TraceLabel;

fn params(n: usize, difficulty: f64, seed: u64) -> DatasetParams {
    DatasetParams {
        n_questions: n,
        traces_per_question: 5,
        hallucination_rate: 0.5,
        difficulty,
        seed,
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn label_count_for_fixed_seed() {
    let ds = gen_dataset(&params(20, 0.2, 7)).unwrap();
    let halluc = ds.truth.iter().filter(|t| t.label == TraceLabel::Hallucinated).count();
    // Recorded for seed 7; binomial(100, 0.5) has sd 5.
    assert_eq!(halluc, 46);
    assert_eq!(ds.bundles.len(), 100);
}

#[test]
fn dataset_writes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&params(3, 0.2, 11)).unwrap();
    write_dataset(&ds, dir.path().join("a")).unwrap();
    write_dataset(&gen_dataset(&params(3, 0.2, 11)).unwrap(), dir.path().join("b")).unwrap();
    assert_eq!(tree_bytes(&dir.path().join("a")), tree_bytes(&dir.path().join("b")));
}

#[test]
fn zero_difficulty_is_separable() {
    let ds = gen_dataset(&params(20, 0.0, 5)).unwrap();
    let cfg = FeatureConfig::default();
    let feats: Vec<_> = ds
        .bundles
        .iter()
        .map(|b| analyze_trace(b, &boundaries_for(b, &cfg.segment), &cfg).unwrap().features)
        .collect();
    let report = rhd_core::rhd_detector::fit_weights(&feats, &FitConfig::default()).unwrap();
    assert_eq!(report.fold_metrics, [1.0, 1.0]);
}

#[test]
fn flat_truthful_trace_has_no_pattern() {
    let mut spec = dataset_spec(&params(4, 0.0, 3), 0);
    spec.label = TraceLabel::Truthful;
    spec.shallow_steps.clear();
    spec.overthink_steps.clear();
    spec.protected_steps.clear();
    spec.backtrack_mass = 0.0;
    spec.drift = 0.0;
    spec.fluctuation = 0.0;
    spec.noise = 0.0;
    let (b, _) = gen_compact_trace(&spec).unwrap();
    let cfg = FeatureConfig::default();
    let a = analyze_trace(&b, &boundaries_for(&b, &cfg.segment), &cfg).unwrap();
    assert!(a.features.cv < 1e-6, "cv {}", a.features.cv);
    assert!(a.features.attn_score <= 1.0);
}

#[test]
fn full_bundles_reproducible() {
    let dims = FullDims::new(9, 5, 11, 2);
    assert_eq!(gen_full_bundle(&dims, 4, false).unwrap(), gen_full_bundle(&dims, 4, false).unwrap());
    assert_ne!(gen_full_bundle(&dims, 4, false).unwrap(), gen_full_bundle(&dims, 5, false).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn planted_ground_truth_is_recoverable(seed in any::<u64>(), difficulty in 0.0f64..1.0, index in 0usize..20) {
        let spec = dataset_spec(&params(4, difficulty, seed), index);
        let (b, truth) = gen_compact_trace(&spec).unwrap();
        b.validate().unwrap();
        let cfg = FeatureConfig::default();
        let bounds = boundaries_for(&b, &cfg.segment);
        let a = analyze_trace(&b, &bounds, &cfg).unwrap();
        prop_assert_eq!(a.scaled_scores.len(), truth.step_scores.len());
        for (got, want) in a.scaled_scores.iter().zip(&truth.step_scores) {
            prop_assert!((got - want).abs() <= 0.01 * want, "{} vs {}", got, want);
        }
        for (got, want) in a.step_ppl.iter().zip(&truth.step_ppl) {
            prop_assert!((got - want).abs() <= 1e-3 * want, "ppl {} vs {}", got, want);
        }

        let m = step_attention(b.attention.as_ref().unwrap(), &bounds, &b.meta.attention_layers).unwrap();
        let bad: Vec<usize> = truth.shallow_steps.iter().chain(&truth.overthink_steps).copied().collect();
        for &(row, mass) in &truth.backtrack_rows {
            let total: f64 = (0..row).map(|j| m.get(row, j)).sum();
            let on_bad: f64 = bad.iter().filter(|&&j| j < row).map(|&j| m.get(row, j)).sum();
            prop_assert!((on_bad / total - mass).abs() <= 1e-6, "row {}: {} vs {}", row, on_bad / total, mass);
        }

        if let Some(at) = truth.rising2_at {
            let pcfg = PatternConfig { tau: spec.tau, ..PatternConfig::default() };
            let triples = classify_triples(&a.scaled_scores, Some(truth.label), &pcfg);
            prop_assert_eq!(triples[at].class, TripleKind::Rising2);
        }
    }

    #[test]
    fn every_dataset_bundle_validates(seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let p = DatasetParams { hallucination_rate: rate, ..params(3, 0.3, seed) };
        let ds = gen_dataset(&p).unwrap();
        for (b, t) in ds.bundles.iter().zip(&ds.truth) {
            prop_assert!(b.validate().is_ok());
            prop_assert_eq!(&b.meta.trace_id, &t.trace_id);
            prop_assert_eq!(b.meta.label, Some(t.label));
            prop_assert!(b.tokens.iter().all(|tok| tok.logprob <= 0.0));
        }
    }
}
