//! Prompt templates for pseudo-target generation and relevance judgment.
//!
//! Template bodies live in `assets/prompts/` next to a `manifest.json` that
//! pins each file's SHA-256. The same files are compiled in as the built-in
//! set, and [`PromptSet::load_dir`] can swap in an edited copy at runtime.
//!
//! Placeholders are `{image_content}`, `{instruction}` and `{candidate_ref}`.
//! Rendering is a single pass: bound values are inserted verbatim and never
//! scanned for placeholders again.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::PromptMode;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing binding for placeholder {{{0}}}")]
    MissingPlaceholderBinding(&'static str),
    #[error("unknown prompt mode {0:?}")]
    UnknownMode(String),
    #[error("template {kind}: {reason}")]
    InvalidTemplate { kind: TemplateKind, reason: String },
    #[error("template {kind}: sha256 {actual} does not match manifest {expected}")]
    ManifestMismatch {
        kind: TemplateKind,
        expected: String,
        actual: String,
    },
    #[error("manifest does not list a template for {0}")]
    MissingTemplate(TemplateKind),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    ImageContent,
    Instruction,
    CandidateRef,
}

impl Placeholder {
    const ALL: [Placeholder; 3] = [
        Placeholder::ImageContent,
        Placeholder::Instruction,
        Placeholder::CandidateRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::ImageContent => "image_content",
            Placeholder::Instruction => "instruction",
            Placeholder::CandidateRef => "candidate_ref",
        }
    }

    fn marker(self) -> &'static str {
        match self {
            Placeholder::ImageContent => "{image_content}",
            Placeholder::Instruction => "{instruction}",
            Placeholder::CandidateRef => "{candidate_ref}",
        }
    }
}

/// Which prompt a template produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Union,
    LlmGenerated,
    InstructedFiltered,
    Intersection,
    RelevanceJudgment,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Union,
        TemplateKind::LlmGenerated,
        TemplateKind::InstructedFiltered,
        TemplateKind::Intersection,
        TemplateKind::RelevanceJudgment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Union => "union",
            TemplateKind::LlmGenerated => "llm-generated",
            TemplateKind::InstructedFiltered => "instructed-filtered",
            TemplateKind::Intersection => "intersection",
            TemplateKind::RelevanceJudgment => "relevance-judgment",
        }
    }

    /// Placeholders this kind of template must contain exactly once.
    pub fn placeholders(self) -> &'static [Placeholder] {
        match self {
            TemplateKind::RelevanceJudgment => &Placeholder::ALL,
            _ => &[Placeholder::ImageContent, Placeholder::Instruction],
        }
    }
}

impl From<PromptMode> for TemplateKind {
    fn from(m: PromptMode) -> Self {
        match m {
            PromptMode::Union => TemplateKind::Union,
            PromptMode::LlmGenerated => TemplateKind::LlmGenerated,
            PromptMode::InstructedFiltered => TemplateKind::InstructedFiltered,
            PromptMode::Intersection => TemplateKind::Intersection,
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PromptError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

/// A validated template body, pre-split into literal and placeholder segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(kind: TemplateKind, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let mut segments = Vec::new();
        let mut counts: BTreeMap<Placeholder, usize> = BTreeMap::new();
        let mut rest = body.as_str();
        while !rest.is_empty() {
            let next = Placeholder::ALL
                .iter()
                .filter_map(|p| rest.find(p.marker()).map(|at| (at, *p)))
                .min_by_key(|(at, _)| *at);
            match next {
                Some((at, p)) => {
                    if at > 0 {
                        segments.push(Segment::Literal(rest[..at].to_string()));
                    }
                    segments.push(Segment::Slot(p));
                    *counts.entry(p).or_default() += 1;
                    rest = &rest[at + p.marker().len()..];
                }
                None => {
                    segments.push(Segment::Literal(rest.to_string()));
                    rest = "";
                }
            }
        }
        let invalid = |reason: String| PromptError::InvalidTemplate { kind, reason };
        for p in Placeholder::ALL {
            let n = counts.get(&p).copied().unwrap_or(0);
            let required = kind.placeholders().contains(&p);
            if required && n != 1 {
                return Err(invalid(format!("{{{}}} appears {n} times, expected once", p.name())));
            }
            if !required && n != 0 {
                return Err(invalid(format!("{{{}}} is not used by this template", p.name())));
            }
        }
        Ok(Self {
            kind,
            body,
            segments,
        })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }

    /// Substitutes each placeholder with `bind(placeholder)`.
    fn render_with(&self, bind: impl Fn(Placeholder) -> Option<String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(p) => {
                    let v = bind(*p).ok_or(PromptError::MissingPlaceholderBinding(p.name()))?;
                    out.push_str(&v);
                }
            }
        }
        Ok(out)
    }
}

/// Bound into `{image_content}` of the relevance prompt when no reference
/// caption is available (the reference image is then passed as pixels).
pub const NO_REFERENCE_CAPTION: &str = "(see the attached reference image)";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub mode: TemplateKind,
    pub file: String,
    pub sha256: String,
}

/// All five templates, validated against their manifest.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

const BUILTIN: [(TemplateKind, &str, &str); 5] = [
    (TemplateKind::Union, "union.txt", include_str!("../assets/prompts/union.txt")),
    (
        TemplateKind::LlmGenerated,
        "llm_generated.txt",
        include_str!("../assets/prompts/llm_generated.txt"),
    ),
    (
        TemplateKind::InstructedFiltered,
        "instructed_filtered.txt",
        include_str!("../assets/prompts/instructed_filtered.txt"),
    ),
    (
        TemplateKind::Intersection,
        "intersection.txt",
        include_str!("../assets/prompts/intersection.txt"),
    ),
    (
        TemplateKind::RelevanceJudgment,
        "relevance.txt",
        include_str!("../assets/prompts/relevance.txt"),
    ),
];

const BUILTIN_MANIFEST: &str = include_str!("../assets/prompts/manifest.json");

impl PromptSet {
    /// The compiled-in templates, checked against the compiled-in manifest.
    pub fn builtin() -> Self {
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(BUILTIN_MANIFEST).expect("builtin manifest parses");
        let bodies = BUILTIN
            .iter()
            .map(|(kind, file, body)| (*kind, (file.to_string(), body.to_string())))
            .collect();
        Self::from_parts(&manifest, bodies).expect("builtin templates match their manifest")
    }

    /// Loads `manifest.json` and the template files it lists from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mpath = dir.join("manifest.json");
        let raw = fs::read_to_string(&mpath).map_err(|source| PromptError::Io {
            path: mpath.clone(),
            source,
        })?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&raw).map_err(|e| PromptError::BadManifest {
                path: mpath.clone(),
                reason: e.to_string(),
            })?;
        let mut bodies = BTreeMap::new();
        for e in &manifest {
            let p = dir.join(&e.file);
            let body = fs::read_to_string(&p).map_err(|source| PromptError::Io { path: p, source })?;
            bodies.insert(e.mode, (e.file.clone(), body));
        }
        Self::from_parts(&manifest, bodies)
    }

    fn from_parts(
        manifest: &[ManifestEntry],
        bodies: BTreeMap<TemplateKind, (String, String)>,
    ) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for kind in TemplateKind::ALL {
            let entry = manifest
                .iter()
                .find(|e| e.mode == kind)
                .ok_or(PromptError::MissingTemplate(kind))?;
            let (_, body) = bodies.get(&kind).ok_or(PromptError::MissingTemplate(kind))?;
            let t = PromptTemplate::parse(kind, body.clone())?;
            let actual = t.sha256();
            if actual != entry.sha256 {
                return Err(PromptError::ManifestMismatch {
                    kind,
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            templates.insert(kind, t);
        }
        Ok(Self { templates })
    }

    pub fn template(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    /// Digest over all template hashes; identifies the prompt set in reports.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.templates.values() {
            h.update(t.kind().as_str().as_bytes());
            h.update(b"\0");
            h.update(t.sha256().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Prompt asking an LLM to turn a reference description plus the relative
    /// text into a target description. Union mode accepts an empty
    /// `image_content`; every mode needs a non-blank `instruction`.
    pub fn render_pseudo_target_prompt(
        &self,
        mode: PromptMode,
        image_content: &str,
        instruction: &str,
    ) -> Result<String, PromptError> {
        if instruction.trim().is_empty() {
            return Err(PromptError::MissingPlaceholderBinding(Placeholder::Instruction.name()));
        }
        if mode != PromptMode::Union && image_content.trim().is_empty() {
            return Err(PromptError::MissingPlaceholderBinding(Placeholder::ImageContent.name()));
        }
        self.template(mode.into()).render_with(|p| match p {
            Placeholder::ImageContent => Some(image_content.to_string()),
            Placeholder::Instruction => Some(instruction.to_string()),
            Placeholder::CandidateRef => None,
        })
    }

    /// Yes/No judgment prompt for one candidate.
    pub fn render_relevance_prompt(
        &self,
        relative_text: &str,
        reference_caption: &str,
        candidate_ref: &str,
    ) -> Result<String, PromptError> {
        if relative_text.trim().is_empty() {
            return Err(PromptError::MissingPlaceholderBinding(Placeholder::Instruction.name()));
        }
        if candidate_ref.trim().is_empty() {
            return Err(PromptError::MissingPlaceholderBinding(Placeholder::CandidateRef.name()));
        }
        let caption = if reference_caption.trim().is_empty() {
            NO_REFERENCE_CAPTION
        } else {
            reference_caption
        };
        self.template(TemplateKind::RelevanceJudgment)
            .render_with(|p| match p {
                Placeholder::ImageContent => Some(caption.to_string()),
                Placeholder::Instruction => Some(relative_text.to_string()),
                Placeholder::CandidateRef => Some(candidate_ref.to_string()),
            })
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}
