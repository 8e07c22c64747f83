use fcbm::hypernet::{generate_weights, HypernetParams, Selector, WeightMode};
use fcbm::io::{fingerprint, ConceptSet, Container, DatasetManifest, Tensor};
use fcbm::metrics::{nec, nec_from_supports};
use fcbm::numeric::{Matrix, Rng};
use fcbm::sparsemax::sparsemax_forward;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 2..64)
}

fn tau() -> impl Strategy<Value = f64> {
    0.1f64..10.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sparsemax_sums_to_tau(s in scores(), tau in tau()) {
        let r = sparsemax_forward(&s, tau).unwrap();
        let sum: f64 = r.output.iter().sum();
        prop_assert!((sum - tau).abs() <= 1e-9 * tau.max(1.0));
        prop_assert!(r.output.iter().all(|&x| x >= 0.0));
        prop_assert!(r.k() >= 1);
    }

    #[test]
    fn sparsemax_translation_invariant(s in scores(), tau in tau(), c in -100.0f64..100.0) {
        let a = sparsemax_forward(&s, tau).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let b = sparsemax_forward(&shifted, tau).unwrap();
        for (x, y) in a.output.iter().zip(&b.output) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn sparsemax_preserves_order(s in scores(), tau in tau()) {
        let p = sparsemax_forward(&s, tau).unwrap().output;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn larger_tau_never_shrinks_support(s in scores(), tau in tau(), factor in 1.0f64..5.0) {
        let small = sparsemax_forward(&s, tau).unwrap();
        let large = sparsemax_forward(&s, tau * factor).unwrap();
        prop_assert!(small.support.iter().all(|i| large.support.contains(i)));
    }

    #[test]
    fn support_is_exactly_the_positive_outputs(s in scores(), tau in tau()) {
        let r = sparsemax_forward(&s, tau).unwrap();
        let positive: Vec<usize> = (0..s.len()).filter(|&i| r.output[i] > 0.0).collect();
        prop_assert_eq!(positive, r.support);
    }

    #[test]
    fn nec_matches_support_sizes(seed in any::<u64>(), tau in 0.05f64..10.0) {
        let mut rng = Rng::new(seed);
        let m = 2 + rng.below(40);
        let n = 1 + rng.below(6);
        let params = HypernetParams::init(5, 7, n, &mut rng);
        let t = rng.normal_matrix(m, 5, 1.0);
        let g = generate_weights(&params, None, &t, WeightMode::Trained, Selector::Sparsemax { tau }).unwrap();
        prop_assert_eq!(nec(&g.weights), nec_from_supports(&g.context.support_sizes()));
    }

    #[test]
    fn top_k_caps_nec(seed in any::<u64>(), k in 1usize..40) {
        let mut rng = Rng::new(seed);
        let m = 1 + rng.below(60);
        let n = 1 + rng.below(6);
        let params = HypernetParams::init(4, 6, n, &mut rng);
        let t = rng.normal_matrix(m, 4, 1.0);
        let g = generate_weights(&params, None, &t, WeightMode::Trained, Selector::TopK { k }).unwrap();
        prop_assert!(nec(&g.weights) <= k as f64);
    }

    #[test]
    fn tensor_roundtrip(rows in 0usize..12, cols in 0usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| (rng.normal() * 1e3) as f32).collect();
        let t = Tensor::new(rows, cols, data).unwrap();
        let bytes = t.to_bytes();
        prop_assert_eq!(bytes.len(), 24 + 4 * rows * cols);
        prop_assert!(Tensor::from_bytes(&bytes).unwrap().bit_eq(&t));
    }

    #[test]
    fn truncated_tensor_is_rejected(rows in 1usize..6, cols in 1usize..6, cut in 1usize..24) {
        let t = Tensor::new(rows, cols, vec![1.0; rows * cols]).unwrap();
        let bytes = t.to_bytes();
        let cut = cut.min(bytes.len());
        let err = Tensor::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert_eq!(err.kind(), "format");
    }

    #[test]
    fn container_roundtrip(
        kind in "[a-z]{1,12}",
        names in prop::collection::btree_set("[a-z_]{1,10}", 0..5),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let blobs: Vec<(String, Matrix)> = names
            .into_iter()
            .map(|n| {
                let (r, c) = (rng.below(5), 1 + rng.below(5));
                (n, rng.normal_matrix(r, c, 1.0).round_to_f32())
            })
            .collect();
        let c = Container { kind, meta: serde_json::json!({ "seed": seed }), blobs };
        prop_assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn concept_set_roundtrip(names in prop::collection::vec("[a-zA-Z][a-zA-Z ,'-]{0,30}[a-zA-Z]", 1..20), seed in any::<u64>()) {
        let names: Vec<String> = names.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut rng = Rng::new(seed);
        let pool = ConceptSet::new(names.clone(), rng.normal_matrix(names.len(), 4, 1.0).round_to_f32()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.txt");
        fcbm::io::write_concept_set(&pool, &path, fcbm::io::default_embeddings_path(&path)).unwrap();
        let back = fcbm::io::load_concept_set(&path, fcbm::io::default_embeddings_path(&path)).unwrap();
        prop_assert_eq!(back.fingerprint(), fingerprint(&names));
        prop_assert_eq!(back, pool);
    }

    #[test]
    fn labels_roundtrip(labels in prop::collection::vec(0usize..1000, 0..50)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        fcbm::io::write_labels(&labels, &path).unwrap();
        prop_assert_eq!(fcbm::io::read_labels(&path).unwrap(), labels);
    }
}

#[test]
fn manifest_paths_resolve_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("data");
    let task = fcbm::synthetic::SyntheticTask::generate(Default::default()).unwrap();
    let files = task.write(&sub).unwrap();
    let m = DatasetManifest::load(&files.test_manifest).unwrap();
    assert_eq!(m.load_data().unwrap(), task.test);
}

#[test]
fn manifest_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(
        &path,
        r#"{"split":"x","backbone_features":"a","clip_features":"b","labels":"c","num_classes":2,"extra":1}"#,
    )
    .unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap_err().kind(), "format");
}
