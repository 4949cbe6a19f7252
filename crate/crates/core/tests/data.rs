mod common;

use std::fs;

use brightvae::data::{load_paired_dataset, make_synth_dataset, write_dataset, DatasetSplit, Image, SplitName};
use brightvae::Error;

fn toy_tree(n: usize) -> (tempfile::TempDir, DatasetSplit) {
    let dir = tempfile::tempdir().unwrap();
    let split = make_synth_dataset(n, 64, 3).unwrap();
    split.write(&dir.path().join("train")).unwrap();
    (dir, split)
}

#[test]
fn toy_tree_loads_with_warnings() {
    let (dir, split) = toy_tree(4);
    let loaded = load_paired_dataset(dir.path()).unwrap();
    assert_eq!((loaded.train.len(), loaded.test.len()), (4, 0));
    assert!(loaded.warnings.iter().any(|w| w.contains("512x512")), "{:?}", loaded.warnings);
    assert!(loaded.warnings.iter().any(|w| w.contains("partial")), "{:?}", loaded.warnings);
    assert_eq!(loaded.train.pairs, split.pairs);
}

#[test]
fn round_trip_through_png_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = make_synth_dataset(6, 32, 9).unwrap().split_off_test(2).unwrap();
    write_dataset(dir.path(), &train, &test).unwrap();
    let loaded = load_paired_dataset(dir.path()).unwrap();
    assert_eq!(loaded.train.pairs, train.pairs);
    assert_eq!(loaded.test.pairs, test.pairs);
    assert_eq!(loaded.test.name, SplitName::Test);
}

#[test]
fn load_order_is_sorted_by_filename() {
    let (dir, _) = toy_tree(3);
    let ids: Vec<String> = load_paired_dataset(dir.path()).unwrap().train.pairs.into_iter().map(|p| p.id).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn empty_directory_has_no_pairs() {
    let dir = tempfile::tempdir().unwrap();
    match load_paired_dataset(dir.path()) {
        Err(Error::Dataset(m)) => assert!(m.contains("no pairs found"), "{m}"),
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn orphans_are_listed() {
    let (dir, _) = toy_tree(3);
    fs::remove_file(dir.path().join("train/gt/synth_0001.png")).unwrap();
    Image::filled(8, 8, 0.5).save(&dir.path().join("train/gt/extra.png")).unwrap();
    match load_paired_dataset(dir.path()) {
        Err(Error::Dataset(m)) => {
            assert!(m.contains("train/low/synth_0001.png"), "{m}");
            assert!(m.contains("train/gt/extra.png"), "{m}");
        }
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn undecodable_file_is_an_error() {
    let (dir, _) = toy_tree(2);
    fs::write(dir.path().join("train/low/synth_0000.png"), b"not a png").unwrap();
    assert!(load_paired_dataset(dir.path()).is_err());
}

#[test]
fn hidden_files_are_ignored() {
    let (dir, _) = toy_tree(2);
    fs::write(dir.path().join("train/low/.DS_Store"), b"x").unwrap();
    assert_eq!(load_paired_dataset(dir.path()).unwrap().train.len(), 2);
}

#[test]
fn synthetic_set_is_reproducible_and_darker() {
    let a = make_synth_dataset(16, 64, 7).unwrap();
    let b = make_synth_dataset(16, 64, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
    for p in &a.pairs {
        assert_eq!((p.gt.height, p.gt.width), (64, 64));
        assert!(p.low.mean() < p.gt.mean(), "{}", p.id);
        assert!(p.low.data.iter().chain(&p.gt.data).all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(a, make_synth_dataset(16, 64, 8).unwrap());
    assert!(matches!(make_synth_dataset(4, 60, 7), Err(Error::Precondition(_))));
}
