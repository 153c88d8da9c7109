//! Adapter fixtures: each format ingests to the canonical files frozen under
//! `tests/fixtures/<format>/expected/`. Regenerate with `CIRANK_UPDATE_GOLDEN=1`.

use std::fs;
use std::path::{Path, PathBuf};

use cirank_core::evalkit::{ingest, BenchmarkDataset, DatasetFormat, EvalError, IngestPaths};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn paths(annotations: &[&str], gallery: &[&str]) -> IngestPaths {
    IngestPaths {
        annotations: annotations.iter().map(|p| fixtures().join(p)).collect(),
        gallery: gallery.iter().map(|p| fixtures().join(p)).collect(),
    }
}

fn check_expected(ds: &BenchmarkDataset, dir: &Path) {
    let tmp = tempfile::tempdir().unwrap();
    ds.write_canonical(tmp.path()).unwrap();
    let expected = dir.join("expected");
    for f in ["queries.jsonl", "gallery.jsonl"] {
        let got = fs::read_to_string(tmp.path().join(f)).unwrap();
        if std::env::var_os("CIRANK_UPDATE_GOLDEN").is_some() {
            fs::create_dir_all(&expected).unwrap();
            fs::write(expected.join(f), &got).unwrap();
            continue;
        }
        let want = fs::read_to_string(expected.join(f)).unwrap();
        assert_eq!(got, want, "{} differs", expected.join(f).display());
    }
}

#[test]
fn cirr_like() {
    let ds = ingest(
        DatasetFormat::CirrLike,
        "cirr-fixture",
        &paths(&["cirr/captions.v1.json"], &["cirr/split.v1.json"]),
    )
    .unwrap();
    assert_eq!((ds.queries.len(), ds.gallery.len()), (2, 7));
    let gt = &ds.ground_truths["12063"];
    assert_eq!(gt.subset_ids.as_ref().unwrap().len(), 6);
    assert_eq!(ds.queries[0].relative_text, "Be a same breed dog with his puppy running");
    check_expected(&ds, &fixtures().join("cirr"));
}

#[test]
fn cirr_like_rejects_five_member_subset() {
    let err = ingest(
        DatasetFormat::CirrLike,
        "bad",
        &paths(&["cirr/captions.bad_subset.json"], &[]),
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::MalformedSubset { found: 5, .. }), "{err}");
}

#[test]
fn circo_like() {
    let ds = ingest(
        DatasetFormat::CircoLike,
        "circo-fixture",
        &paths(&["circo/annotations.v1.json"], &["circo/image_info.v1.json"]),
    )
    .unwrap();
    assert_eq!((ds.queries.len(), ds.gallery.len()), (2, 6));
    assert_eq!(ds.ground_truths["0"].target_ids.len(), 3);
    assert_eq!(ds.image_refs()["42050"], "000000042050.jpg");
    check_expected(&ds, &fixtures().join("circo"));
}

#[test]
fn fashioniq_like_joins_captions() {
    let ds = ingest(
        DatasetFormat::FashionIqLike,
        "fiq-fixture",
        &paths(
            &["fashioniq/cap.dress.val.json", "fashioniq/cap.shirt.val.json"],
            &["fashioniq/split.dress.val.json", "fashioniq/split.shirt.val.json"],
        ),
    )
    .unwrap();
    assert_eq!(ds.queries[0].relative_text, "is red and has no sleeves");
    assert_eq!(ds.queries[1].relative_text, "is longer and has a floral print");
    assert_eq!(ds.ground_truths["shirt-0"].category.as_deref(), Some("shirt"));
    assert_eq!(ds.gallery.len(), 7);
    check_expected(&ds, &fixtures().join("fashioniq"));
}

#[test]
fn canonical_round_trip() {
    let p = paths(&["canonical/queries.jsonl"], &["canonical/gallery.jsonl"]);
    let ds = ingest(DatasetFormat::Canonical, "canon", &p).unwrap();
    assert_eq!((ds.queries.len(), ds.gallery.len()), (2, 10));

    let tmp = tempfile::tempdir().unwrap();
    let (q, g) = ds.write_canonical(tmp.path()).unwrap();
    let again = ingest(
        DatasetFormat::Canonical,
        "canon",
        &IngestPaths {
            annotations: vec![q],
            gallery: vec![g],
        },
    )
    .unwrap();
    assert_eq!(ds, again);
}

#[test]
fn parse_failure_names_the_line() {
    let err = ingest(
        DatasetFormat::Canonical,
        "bad",
        &paths(&["canonical/queries.bad.jsonl"], &["canonical/gallery.jsonl"]),
    )
    .unwrap_err();
    match err {
        EvalError::ParseFailure { path, line, .. } => {
            assert_eq!(line, 2);
            assert!(path.ends_with("queries.bad.jsonl"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn missing_file_is_io_error() {
    let err = ingest(
        DatasetFormat::CircoLike,
        "x",
        &paths(&["circo/nope.json"], &[]),
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::Io { .. }));
}

#[test]
fn dangling_target_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("gallery.jsonl");
    fs::write(&g, "{\"image_id\": \"g3\"}\n").unwrap();
    let err = ingest(
        DatasetFormat::Canonical,
        "x",
        &IngestPaths {
            annotations: vec![fixtures().join("canonical/queries.jsonl")],
            gallery: vec![g],
        },
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::DanglingTargetId { ref image_id, .. } if image_id == "g4"), "{err}");
}
