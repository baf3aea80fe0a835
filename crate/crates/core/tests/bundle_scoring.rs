mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rhd_core::reasoning_score::{jsd, logit_lens, step_scores, token_jsds, LensParams};
use rhd_core::rhd_detector::{extract_features, FeatureConfig};
use rhd_core::pattern_metrics::step_attention;
use rhd_core::segmentation::{SegmentConfig, StepBoundaries};
use rhd_core::synthgen::{gen_full_bundle, placeholder_token, FullDims};
use rhd_core::trace_store::{hidden_blob, open_bundle, write_bundle, BundleManifest, DType, Tensor, TraceBundle, MANIFEST_FILE};

fn dims_strategy() -> impl Strategy<Value = (FullDims, u64)> {
    (2usize..=40, 2usize..=16, 2usize..=32, 1usize..=3, any::<u64>())
        .prop_map(|(t, d, v, n, seed)| (FullDims::new(t, d, v, n), seed))
}

fn boundaries_for(n: usize, seed: u64) -> StepBoundaries {
    common::random_boundaries(&mut common::seeded(seed), n)
}

fn bytes_of(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap());
    }
    out
}

#[test]
fn synthgen_bundle_passes_independent_reader() {
    let b = gen_full_bundle(&FullDims::new(6, 8, 13, 2), 3, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&b, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest["num_tokens"], 6);
    assert_eq!(manifest["hidden_dim"], 8);
    assert_eq!(manifest["vocab_size"], 13);
    for (name, entry) in manifest["blobs"].as_object().unwrap() {
        let bytes = std::fs::read(dir.path().join(entry["file"].as_str().unwrap())).unwrap();
        let elems: u64 = entry["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).product();
        let width = match entry["dtype"].as_str().unwrap() {
            "fp16" => 2,
            "fp32" => 4,
            other => panic!("{name}: dtype {other}"),
        };
        assert_eq!(bytes.len() as u64, elems * width, "blob {name}");
        assert_eq!(crc32fast::hash(&bytes), entry["crc32"].as_u64().unwrap() as u32, "blob {name}");
    }
    let reopened = open_bundle(dir.path()).unwrap();
    reopened.validate().unwrap();
    assert_eq!(reopened, b);
}

#[test]
fn fp16_blob_matches_half_encoding() {
    let b = gen_full_bundle(&FullDims::new(5, 4, 7, 1), 9, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&b, dir.path()).unwrap();
    let manifest: BundleManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    let layer = b.meta.final_layer;
    let hidden = &b.activations.as_ref().unwrap().hidden[&layer];
    let entry = &manifest.blobs[&hidden_blob(layer)];
    assert_eq!(entry.dtype, DType::Fp16);
    let bytes = std::fs::read(dir.path().join(&entry.file)).unwrap();
    let encoded: Vec<u8> = hidden.data().iter().flat_map(|&x| half::f16::from_f32(x).to_le_bytes()).collect();
    assert_eq!(encoded, bytes);
    assert_eq!(open_bundle(dir.path()).unwrap().activations.unwrap().hidden[&layer], *hidden);

    let raw = vec![0.1f32, -3.14159, 65504.0, 1e-8, 2.5];
    let t = Tensor::vector(DType::Fp16, raw.clone()).unwrap();
    let oracle: Vec<f32> = raw.iter().map(|&x| half::f16::from_f32(x).to_f32()).collect();
    assert_eq!(t.data(), oracle.as_slice());
}

#[test]
fn hand_tiny_bundle_matches_brute_force() {
    let b = gen_full_bundle(&FullDims::new(6, 8, 13, 2), 21, false).unwrap();
    let bounds = StepBoundaries::from_lengths(&[3, 3]).unwrap();
    let layers = b.meta.reasoning_layers.clone();
    assert_eq!(layers.len(), 2);
    let got = step_scores(&b, &bounds, &layers).unwrap();
    let want = common::brute_step_scores(&b, &bounds, &layers);
    for (g, w) in got.scores.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
    }
}

#[test]
fn jsd_reference_values() {
    let v = jsd(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
    assert!((v - common::jsd_dd(&[0.5, 0.5], &[0.9, 0.1])).abs() <= 1e-12);
    assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), std::f64::consts::LN_2);
}

#[test]
fn four_step_attention_matches_naive_average() {
    let b = gen_full_bundle(&FullDims::new(12, 6, 9, 2), 4, false).unwrap();
    let bounds = StepBoundaries::from_lengths(&[3, 2, 4, 3]).unwrap();
    let m = step_attention(b.attention.as_ref().unwrap(), &bounds, &b.meta.attention_layers).unwrap();
    let oracle = common::brute_step_attention(&b, &bounds);
    for k in 0..4 {
        for j in 0..4 {
            assert!((m.get(k, j) - oracle[k][j]).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_and_byte_determinism((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path().join("a")).unwrap();
        write_bundle(&b, dir.path().join("b")).unwrap();
        prop_assert_eq!(bytes_of(&dir.path().join("a")), bytes_of(&dir.path().join("b")));
        let back = open_bundle(dir.path().join("a")).unwrap();
        prop_assert_eq!(&back, &b);

        let c = rhd_core::trace_store::compact(&b, &boundaries_for(dims.num_tokens, seed)).unwrap();
        write_bundle(&c, dir.path().join("c")).unwrap();
        prop_assert_eq!(open_bundle(dir.path().join("c")).unwrap(), c);
    }

    #[test]
    fn token_invariants((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        prop_assert!(b.tokens.iter().all(|t| t.logprob <= 0.0));
        let concat: String = b.tokens.iter().map(|t| t.surface_text.clone()).collect();
        prop_assert_eq!(concat, b.text());
    }

    #[test]
    fn zero_jsd_bundle_scores_zero((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, true).unwrap();
        let s = step_scores(&b, &boundaries_for(dims.num_tokens, seed), &dims.reasoning_layers()).unwrap();
        prop_assert!(s.scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_scores_strictly_inside_bounds((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let s = step_scores(&b, &boundaries_for(dims.num_tokens, seed), &dims.reasoning_layers()).unwrap();
        prop_assert!(s.scores.iter().all(|&x| x > 0.0 && x < std::f64::consts::LN_2));
    }

    #[test]
    fn token_jsds_match_direct_formula((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let got = token_jsds(&b, &dims.reasoning_layers()).unwrap();
        for (l, v) in got {
            let want = common::brute_token_jsd(&b, l);
            for (g, w) in v.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-6, "layer {} {} vs {}", l, g, w);
                prop_assert!((0.0..=std::f64::consts::LN_2).contains(g));
            }
        }
    }

    #[test]
    fn layer_order_does_not_matter((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let bounds = boundaries_for(dims.num_tokens, seed);
        let layers = dims.reasoning_layers();
        let mut rev = layers.clone();
        rev.reverse();
        let a = step_scores(&b, &bounds, &layers).unwrap();
        let r = step_scores(&b, &bounds, &rev).unwrap();
        prop_assert_eq!(a.scores, r.scores);
    }

    #[test]
    fn scores_independent_of_thread_count((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let bounds = boundaries_for(dims.num_tokens, seed);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| step_scores(&b, &bounds, &dims.reasoning_layers()).unwrap().scores)
        };
        let one = run(1);
        let four = run(4);
        prop_assert!(one.iter().zip(&four).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn greedy_tokens_recovered_by_final_lens((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let lens = LensParams::from_bundle(&b).unwrap();
        let ids: BTreeMap<String, usize> = (0..dims.vocab_size).map(|i| (placeholder_token(i), i)).collect();
        let hidden = &b.activations.as_ref().unwrap().hidden[&b.meta.final_layer];
        for t in 1..dims.num_tokens {
            let logits = logit_lens(hidden.row(t - 1), &lens).unwrap();
            let best = logits.iter().enumerate().fold(0, |bi, (i, &x)| if x > logits[bi] { i } else { bi });
            prop_assert_eq!(ids[&b.tokens[t].surface_text], best);
        }
    }

    #[test]
    fn compact_matches_full_features((dims, seed) in dims_strategy()) {
        let b = gen_full_bundle(&dims, seed, false).unwrap();
        let bounds = boundaries_for(dims.num_tokens, seed);
        let c = rhd_core::trace_store::compact(&b, &bounds).unwrap();
        let raw_full = step_scores(&b, &bounds, &dims.reasoning_layers()).unwrap();
        let raw_compact = step_scores(&c, &bounds, &dims.reasoning_layers()).unwrap();
        for (x, y) in raw_full.scores.iter().zip(&raw_compact.scores) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        let cfg = FeatureConfig { segment: SegmentConfig::default(), ..FeatureConfig::default() };
        let ff = extract_features(&b, &bounds, &cfg).unwrap();
        let fc = extract_features(&c, &bounds, &cfg).unwrap();
        for (x, y) in ff.as_array().iter().zip(fc.as_array()) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn step_attention_matches_naive((dims, seed) in dims_strategy()) {
        let b: TraceBundle = gen_full_bundle(&dims, seed, false).unwrap();
        let bounds = boundaries_for(dims.num_tokens, seed);
        let m = step_attention(b.attention.as_ref().unwrap(), &bounds, &b.meta.attention_layers).unwrap();
        let oracle = common::brute_step_attention(&b, &bounds);
        let s = bounds.len();
        for k in 0..s {
            for j in 0..s {
                let v = m.get(k, j);
                prop_assert!((v - oracle[k][j]).abs() <= 1e-12);
                if j >= k {
                    prop_assert_eq!(v, 0.0);
                }
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
