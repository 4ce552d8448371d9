use std::path::Path;

use proptest::prelude::*;

use simnet_core::baselines::LinearModel;
use simnet_core::dataio::*;
use simnet_core::retrieval::Dataset;
use simnet_core::simnet::{build_model, ArchConfig};
use simnet_core::Error;

const GOLDEN: &[u8] = include_bytes!("data/golden.simf");

fn golden_dataset() -> Dataset {
    Dataset::from_rows("golden", &[vec![1.0, -0.5, 0.25], vec![0.0, 2.0, -3.5]], Some(vec![7, -2])).unwrap()
}

#[test]
fn golden_layout() {
    assert_eq!(encode_feature_store(&golden_dataset()).unwrap(), GOLDEN);
    let back = decode_feature_store(GOLDEN, Path::new("golden.simf")).unwrap();
    assert_eq!(back.labels().unwrap(), &[7, -2]);
    assert_eq!(back.row(1), &[0.0, 2.0, -3.5]);
}

#[test]
fn golden_file_on_disk_reads_back() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.simf");
    let d = read_feature_store(&path).unwrap();
    assert_eq!(d.name(), "golden");
    assert_eq!(d.len(), 2);
    assert!(d.query_indices().is_empty());
}

#[test]
fn corrupt_golden_reports_offsets() {
    let p = Path::new("g.simf");
    let mut nan = GOLDEN.to_vec();
    nan[29..33].copy_from_slice(&f32::NAN.to_le_bytes());
    match decode_feature_store(&nan, p) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 29),
        other => panic!("unexpected {other:?}"),
    }
    let mut kind = GOLDEN.to_vec();
    kind[20] = 9;
    assert!(matches!(decode_feature_store(&kind, p), Err(Error::Format { offset: 20, .. })));
    assert!(matches!(decode_feature_store(&GOLDEN[..GOLDEN.len() - 1], p), Err(Error::Format { .. })));
}

fn arb_store() -> impl Strategy<Value = Dataset> {
    (1usize..6, 0usize..12, any::<bool>()).prop_flat_map(|(dim, n, labeled)| {
        (
            proptest::collection::vec(-1e6f32..1e6, n * dim),
            proptest::collection::vec(any::<i32>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(f, l, q)| {
                let mut d = Dataset::new(
                    "fuzz",
                    dim,
                    f.into_iter().map(f64::from).collect(),
                    labeled.then_some(l),
                    None,
                )
                .unwrap();
                let queries: Vec<usize> = (0..n).filter(|&i| q[i]).collect();
                d.set_queries(queries).unwrap();
                d
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stores_round_trip_byte_identically(d in arb_store()) {
        let bytes = encode_feature_store(&d).unwrap();
        let back = decode_feature_store(&bytes, Path::new("fuzz.simf")).unwrap();
        prop_assert_eq!(back.features(), d.features());
        prop_assert_eq!(back.labels().ok(), d.labels().ok());
        prop_assert_eq!(encode_feature_store(&back).unwrap(), bytes);
    }

    #[test]
    fn stores_with_sidecars_round_trip_on_disk(d in arb_store()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fuzz.simf");
        write_feature_store(&path, &d).unwrap();
        let back = read_feature_store(&path).unwrap();
        prop_assert_eq!(back.query_indices(), d.query_indices());
        prop_assert_eq!(back.ids(), d.ids());
        prop_assert_eq!(std::fs::read(&path).unwrap(), encode_feature_store(&d).unwrap());
    }

    #[test]
    fn truncated_stores_never_decode(d in arb_store(), cut in 0usize..1000) {
        let bytes = encode_feature_store(&d).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(decode_feature_store(&bytes[..cut], Path::new("t.simf")).is_err());
    }

    #[test]
    fn checkpoints_round_trip_byte_identically(
        hidden in proptest::collection::vec(1usize..12, 1..3),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let model = build_model(ArchConfig::custom(hidden, k), seed).unwrap();
        let ckpt = Checkpoint::SimNet(model);
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes, Path::new("m.ckpt")).unwrap();
        prop_assert_eq!(encode_checkpoint(&back), bytes);
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn linear_checkpoints_round_trip(w in proptest::collection::vec(-5.0f64..5.0, 2..20), b in -1.0f64..1.0) {
        let w = if w.len() % 2 == 1 { w[1..].to_vec() } else { w };
        let ckpt = Checkpoint::Linear(LinearModel::from_parts(w, b).unwrap());
        let bytes = encode_checkpoint(&ckpt);
        prop_assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes, Path::new("l.ckpt")).unwrap()), bytes);
    }
}

#[test]
fn synthetic_store_survives_disk() {
    let (d, _) =
        generate_synthetic(&SynthSpec { n_classes: 4, per_class_count: 8, dim: 5, ..SynthSpec::default() })
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.simf");
    write_feature_store(&path, &d).unwrap();
    let back = read_feature_store(&path).unwrap();
    assert_eq!(back.query_indices(), d.query_indices());
    assert_eq!(back.labels().unwrap(), d.labels().unwrap());
    for (a, b) in back.features().iter().zip(d.features()) {
        assert_eq!(*a, (*b as f32) as f64);
    }
}
