mod common;

use common::*;
use proptest::prelude::*;
use ssn_core::data::{gen_deep, gen_single_layer, load_csv, write_csv};
use ssn_core::layer::TrainConfig;
use ssn_core::network::{expand, load_model, save_model, ExpandOptions, SkipMode, SubspaceNetwork};
use ssn_core::{Dataset, Error};

#[test]
fn generated_dataset_survives_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = gen_single_layer(120, 9, 4, 2, 1.3, 17).unwrap();
    let (f, t) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    write_csv(&data, &f, &t).unwrap();
    let back = load_csv(&f, &t).unwrap();
    assert_eq!(max_abs_diff(back.x.view(), data.x.view()), 0.0);
    assert_eq!(max_abs_diff(back.y.view(), data.y.view()), 0.0);
    // unnamed columns get generated headers, which then stay fixed
    let names = back.feature_names.clone().unwrap();
    assert_eq!(names.len(), 9);
    write_csv(&back, &f, &t).unwrap();
    let again = load_csv(&f, &t).unwrap();
    assert_eq!(again.feature_names.unwrap(), names);
    assert_eq!(again.target_names, back.target_names);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_values_survive_csv(
        rows in proptest::collection::vec((any::<f64>(), 0.0f64..1e300), 1..20),
    ) {
        prop_assume!(rows.iter().all(|(a, _)| a.is_finite()));
        let x = ndarray::Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i].0);
        let y = ndarray::Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i].1);
        let data = Dataset::new(x, y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (f, t) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
        write_csv(&data, &f, &t).unwrap();
        let back = load_csv(&f, &t).unwrap();
        prop_assert_eq!(back.x, data.x);
        prop_assert_eq!(back.y, data.y);
    }
}

fn trained(skip: SkipMode) -> SubspaceNetwork {
    let (data, _) = gen_deep(300, 7, 4, 2, 1.0, 2, 3).unwrap();
    let opts = ExpandOptions {
        skip_mode: skip,
        ..Default::default()
    };
    expand(data.x.view(), data.y.view(), 3, &TrainConfig::new(2), &opts, None).unwrap().network
}

#[test]
fn saved_models_predict_identically() {
    let dir = tempfile::tempdir().unwrap();
    for skip in [SkipMode::Concat, SkipMode::Naive] {
        let net = trained(skip);
        let path = dir.path().join("m.ssnw");
        save_model(&net, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, net);
        let mut g = rng(5);
        let x = uniform(100, 7, -3.0, 3.0, &mut g);
        let a = net.forward_batch(x.view(), None).unwrap();
        let b = back.forward_batch(x.view(), None).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn damaged_model_files_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ssnw");
    save_model(&trained(SkipMode::Concat), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    for cut in [bytes.len() - 1, bytes.len() / 2, 10, 0] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(
            matches!(err, Error::Checksum { .. } | Error::Truncated(_)),
            "cut at {cut}: {err:?}"
        );
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Checksum { .. })));
    assert!(matches!(load_model(&dir.path().join("absent")), Err(Error::Io(_))));
}

#[test]
fn empty_network_is_not_saved() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ssnw");
    let net = SubspaceNetwork::new(3, 2, SkipMode::Concat).unwrap();
    assert!(save_model(&net, &path).is_err());
    assert!(!path.exists());
}

#[test]
fn malformed_csv_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let (f, t) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    std::fs::write(&f, "a,b\n1,2\n3,oops\n").unwrap();
    std::fs::write(&t, "y\n1\n2\n").unwrap();
    match load_csv(&f, &t) {
        Err(Error::Parse { line, column, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(column, 2);
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&f, "a,b\n1,2\n3,4\n").unwrap();
    std::fs::write(&t, "y\n1\n-2\n").unwrap();
    assert!(load_csv(&f, &t).is_err());
}
