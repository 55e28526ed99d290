use std::fs;
use std::path::Path;

use reid_core::datasets::{ingest, sample_pk_batch, IngestSummary, LabelMap, Layout, Split};
use reid_core::ReidError;

fn touch(root: &Path, dir: &str, names: &[&str]) {
    let d = root.join(dir);
    fs::create_dir_all(&d).unwrap();
    for n in names {
        fs::write(d.join(n), b"").unwrap();
    }
}

fn market_tree(root: &Path) {
    touch(
        root,
        "bounding_box_train",
        &[
            "0002_c1s1_000451_03.jpg",
            "0002_c2s1_000551_01.jpg",
            "0007_c3s3_077419_03.jpg",
            "0007_c6s3_085567_02.jpg",
            "0000_c1s1_000000_00.jpg",
            "Thumbs.db",
        ],
    );
    touch(root, "query", &["0002_c5s1_000401_00.jpg", "0007_c1s1_000001_00.jpg"]);
    touch(
        root,
        "bounding_box_test",
        &[
            "0002_c3s1_000501_00.jpg",
            "-1_c1s1_000001_00.jpg",
            "0000_c2s1_000002_00.jpg",
        ],
    );
    fs::create_dir_all(root.join("bounding_box_train/nested")).unwrap();
}

#[test]
fn market_tree_is_ingested_in_order() {
    let dir = tempfile::tempdir().unwrap();
    market_tree(dir.path());
    let records = ingest(dir.path(), Layout::Market).unwrap();
    let s = IngestSummary::of(&records);
    assert_eq!((s.train_images, s.query_images, s.gallery_images), (5, 2, 3));
    assert_eq!(s.train_identities, 2);
    assert_eq!(s.distractor_images, 1);
    let splits: Vec<Split> = records.iter().map(|r| r.split).collect();
    assert!(splits.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(records[0].person_id, 0);
    assert_eq!((records[1].person_id, records[1].camera_id), (2, 1));

    let labels = LabelMap::from_records(&records);
    assert_eq!(labels.ids(), [2, 7]);
    assert_eq!(labels.class_of(7), Some(1));
    assert_eq!(labels.class_of(0), None);
}

#[test]
fn duke_names_and_layout_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    touch(
        dir.path(),
        "bounding_box_train",
        &["0001_c2_f0046182.jpg", "0005_c8_f0001234.jpg"],
    );
    touch(dir.path(), "query", &["0001_c1_f0000001.jpg"]);
    touch(dir.path(), "bounding_box_test", &["0001_c5_f0000002.jpg"]);
    let records = ingest(dir.path(), Layout::Duke).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records[1].camera_id, 8);
    assert!(matches!(
        ingest(dir.path(), Layout::Market),
        Err(ReidError::MalformedFilename(_))
    ));
}

#[test]
fn structural_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        ingest(&dir.path().join("absent"), Layout::Market),
        Err(ReidError::MissingDirectory(_))
    ));
    touch(dir.path(), "bounding_box_train", &["0002_c1s1_000451_03.jpg"]);
    assert!(matches!(
        ingest(dir.path(), Layout::Market),
        Err(ReidError::MissingDirectory(_))
    ));
    touch(dir.path(), "query", &[]);
    touch(dir.path(), "bounding_box_test", &["0002_c3s1_000501_00.jpg"]);
    let err = ingest(dir.path(), Layout::Market).unwrap_err();
    assert!(matches!(err, ReidError::EmptySplit(_)));
    assert_eq!(err.exit_code(), 2);
    touch(dir.path(), "query", &["0002_c0s1_000401_00.jpg"]);
    assert!(matches!(
        ingest(dir.path(), Layout::Market),
        Err(ReidError::InvalidCamera { .. })
    ));
}

#[test]
fn pk_batches_come_from_ingested_train_records() {
    let dir = tempfile::tempdir().unwrap();
    market_tree(dir.path());
    let records = ingest(dir.path(), Layout::Market).unwrap();
    let (batch, mask) = sample_pk_batch(&records, 2, 2, 9).unwrap();
    assert_eq!(batch.len(), 4);
    assert!(batch.iter().all(|r| r.split == Split::Train && r.person_id > 0));
    let ids: Vec<i32> = batch.iter().map(|r| r.person_id).collect();
    mask.validate(&ids).unwrap();
    assert!(matches!(
        sample_pk_batch(&records, 3, 2, 9),
        Err(ReidError::InsufficientIdentities {
            needed: 3,
            available: 2
        })
    ));
}
