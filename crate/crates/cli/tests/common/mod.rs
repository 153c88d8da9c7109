#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn cirank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cirank"))
        .args(args)
        .output()
        .expect("spawn cirank")
}

/// Runs and asserts exit 0.
pub fn ok(args: &[&str]) -> Output {
    let out = cirank(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "cirank {args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn core_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Synthetic dataset plus its index under `root`: (data dir, index file).
pub fn synth(root: &Path, kind: &str, queries: usize, gallery: usize) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let index = root.join("gallery.idx");
    ok(&[
        "synth", "--kind", kind,
        "--queries", &queries.to_string(),
        "--gallery", &gallery.to_string(),
        "--dim", "32", "--seed", "3",
        "--out", s(&data),
    ]);
    ok(&["index", "--gallery", s(&data.join("gallery.jsonl")), "--out", s(&index)]);
    (data, index)
}
