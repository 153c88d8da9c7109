//! Rendered prompts must match the frozen files under `tests/golden/`.
//! Regenerate with `CIRANK_UPDATE_GOLDEN=1 cargo test -p cirank-core --test prompt_golden`.

use std::fs;
use std::path::PathBuf;

use cirank_core::{PromptMode, PromptSet};

const IMAGE_CONTENT: &str = "A brown dog lies on a red sofa next to a window.";
const INSTRUCTION: &str = "shows two dogs eating.";
const CANDIDATE: &str = "dev-1042-img0";

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn rendered() -> Vec<(&'static str, String)> {
    let set = PromptSet::builtin();
    let mut out: Vec<(&'static str, String)> = PromptMode::ALL
        .iter()
        .map(|m| {
            (
                m.as_str(),
                set.render_pseudo_target_prompt(*m, IMAGE_CONTENT, INSTRUCTION)
                    .unwrap(),
            )
        })
        .collect();
    out.push((
        "relevance",
        set.render_relevance_prompt(INSTRUCTION, IMAGE_CONTENT, CANDIDATE)
            .unwrap(),
    ));
    out
}

#[test]
fn templates_render_to_goldens() {
    let update = std::env::var_os("CIRANK_UPDATE_GOLDEN").is_some();
    for (name, text) in rendered() {
        let path = golden_dir().join(format!("{name}.txt"));
        if update {
            fs::write(&path, &text).unwrap();
            continue;
        }
        let golden = fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, golden, "{name} drifted from {}", path.display());
    }
}

#[test]
fn intersection_golden_carries_the_worked_example() {
    let golden = fs::read_to_string(golden_dir().join("intersection.txt")).unwrap();
    assert!(golden.contains("Two dogs eating."));
    assert!(golden.contains(IMAGE_CONTENT));
    assert!(golden.contains(INSTRUCTION));
}

#[test]
fn goldens_have_no_unbound_placeholders() {
    for (name, text) in rendered() {
        for p in ["{image_content}", "{instruction}", "{candidate_ref}"] {
            assert!(!text.contains(p), "{name} still contains {p}");
        }
    }
}
