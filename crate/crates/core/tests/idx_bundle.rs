//! The bundled MNIST files parse as IDX and hold the expected digits.

use std::path::{Path, PathBuf};

use dsd_core::data::{load_idx, split_pair, Dataset};

fn load(prefix: &str) -> Dataset {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let file = |kind: &str| root.join(format!("{prefix}-{kind}.gz"));
    load_idx(
        Path::new(&file("images-idx3-ubyte")),
        Path::new(&file("labels-idx1-ubyte")),
    )
    .unwrap()
}

fn class_counts(d: &Dataset) -> [usize; 10] {
    let mut counts = [0usize; 10];
    for &l in d.labels() {
        counts[l] += 1;
    }
    counts
}

#[test]
fn training_subset_loads() {
    let d = load("train10k");
    assert_eq!((d.len(), d.dim(), d.class_count()), (10_000, 784, 10));
    assert_eq!(
        class_counts(&d),
        [1001, 1127, 991, 1032, 980, 863, 1014, 1070, 944, 978]
    );
    assert!(d
        .features()
        .data()
        .iter()
        .all(|&p| (0.0..=1.0).contains(&p)));

    let (train, val) = split_pair(&d, [0.9, 0.1], 0).unwrap();
    assert_eq!((train.len(), val.len()), (9000, 1000));
    let val_classes: std::collections::BTreeSet<usize> = val.labels().iter().copied().collect();
    assert_eq!(val_classes.len(), 10);
}

#[test]
fn official_test_set_loads() {
    let d = load("t10k");
    assert_eq!((d.len(), d.dim(), d.class_count()), (10_000, 784, 10));
    assert_eq!(
        class_counts(&d),
        [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    );
}
