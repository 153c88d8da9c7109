//! Domain types shared across the retrieval, re-ranking and evaluation code.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("query {0}: relative text is empty")]
    EmptyRelativeText(String),
    #[error("query id is empty")]
    EmptyQueryId,
    #[error("pseudo-target for {0} has no descriptions")]
    NoDescriptions(String),
    #[error("pseudo-target for {0} has an empty description")]
    EmptyDescription(String),
    #[error("ground truth for {0} has no target ids")]
    NoTargets(String),
    #[error("ground truth for {query_id}: subset must have exactly 6 members, found {found}")]
    MalformedSubset { query_id: String, found: usize },
    #[error("ground truth for {0}: no target id is a subset member")]
    TargetOutsideSubset(String),
    #[error("ranked list for {query_id} contains {image_id} twice")]
    DuplicateCandidate { query_id: String, image_id: String },
}

/// Number of curated subset members per query in subset-recall evaluation.
pub const SUBSET_SIZE: usize = 6;

/// Default number of reference captions generated per query.
pub const DEFAULT_CAPTIONS: usize = 15;

/// A reference image plus the text describing how the target differs from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeQuery {
    pub query_id: String,
    pub reference_image_id: String,
    pub relative_text: String,
    /// Captions supplied up front; when empty they are generated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_captions: Vec<String>,
}

impl CompositeQuery {
    pub fn new(
        query_id: impl Into<String>,
        reference_image_id: impl Into<String>,
        relative_text: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let q = Self {
            query_id: query_id.into(),
            reference_image_id: reference_image_id.into(),
            relative_text: relative_text.into(),
            reference_captions: Vec::new(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_captions(mut self, captions: Vec<String>) -> Self {
        self.reference_captions = captions;
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.query_id.is_empty() {
            return Err(ValidationError::EmptyQueryId);
        }
        if self.relative_text.trim().is_empty() {
            return Err(ValidationError::EmptyRelativeText(self.query_id.clone()));
        }
        Ok(())
    }
}

/// How pseudo-target descriptions are produced from captions and the
/// relative text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Everything from the reference description plus the modification.
    Union,
    /// LLM rewrite conditioned on the reference description and instruction only.
    LlmGenerated,
    /// LLM rewrite told to drop irrelevant background.
    InstructedFiltered,
    /// Keep what the image and instruction share; drop what the instruction contradicts.
    #[default]
    Intersection,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::Union,
        PromptMode::LlmGenerated,
        PromptMode::InstructedFiltered,
        PromptMode::Intersection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Union => "union",
            PromptMode::LlmGenerated => "llm-generated",
            PromptMode::InstructedFiltered => "instructed-filtered",
            PromptMode::Intersection => "intersection",
        }
    }
}


impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown prompt mode {0:?}")]
pub struct UnknownMode(pub String);

impl FromStr for PromptMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "union" => Ok(PromptMode::Union),
            "llm-generated" => Ok(PromptMode::LlmGenerated),
            "instructed-filtered" => Ok(PromptMode::InstructedFiltered),
            "intersection" => Ok(PromptMode::Intersection),
            _ => Err(UnknownMode(s.to_string())),
        }
    }
}

/// Text queries standing in for the unseen target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTarget {
    pub query_id: String,
    pub mode: PromptMode,
    pub descriptions: Vec<String>,
}

impl PseudoTarget {
    pub fn new(
        query_id: impl Into<String>,
        mode: PromptMode,
        descriptions: Vec<String>,
    ) -> Result<Self, ValidationError> {
        let query_id = query_id.into();
        if descriptions.is_empty() {
            return Err(ValidationError::NoDescriptions(query_id));
        }
        if descriptions.iter().any(|d| d.trim().is_empty()) {
            return Err(ValidationError::EmptyDescription(query_id));
        }
        Ok(Self {
            query_id,
            mode,
            descriptions,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub image_id: String,
    /// Cosine similarity against the query embedding.
    pub coarse_score: f64,
    /// 1-based position in the coarse list.
    pub coarse_rank: usize,
    /// Yes-probability; present only on re-ranked candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_score: Option<f64>,
    pub fused_score: f64,
}

impl ScoredCandidate {
    pub fn coarse(image_id: impl Into<String>, coarse_score: f64, coarse_rank: usize) -> Self {
        Self {
            image_id: image_id.into(),
            coarse_score,
            coarse_rank,
            relevance_score: None,
            fused_score: coarse_score,
        }
    }
}

/// The total order used for every final ranking: fused score descending,
/// then coarse rank ascending, then image id ascending.
pub fn final_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.fused_score
        .total_cmp(&a.fused_score)
        .then(a.coarse_rank.cmp(&b.coarse_rank))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub candidates: Vec<ScoredCandidate>,
}

impl RankedList {
    /// Builds a list and sorts it into [`final_order`].
    pub fn sorted(query_id: impl Into<String>, mut candidates: Vec<ScoredCandidate>) -> Self {
        candidates.sort_by(final_order);
        Self {
            query_id: query_id.into(),
            candidates,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.image_id.as_str())
    }

    pub fn truncate(&mut self, k: usize) {
        self.candidates.truncate(k);
    }

    /// Checks ordering and id uniqueness.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut seen = BTreeSet::new();
        for c in &self.candidates {
            if !seen.insert(c.image_id.as_str()) {
                return Err(ValidationError::DuplicateCandidate {
                    query_id: self.query_id.clone(),
                    image_id: c.image_id.clone(),
                });
            }
        }
        debug_assert!(self
            .candidates
            .windows(2)
            .all(|w| final_order(&w[0], &w[1]) != Ordering::Greater));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub target_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl GroundTruth {
    pub fn single(query_id: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            target_ids: BTreeSet::from([target.into()]),
            subset_ids: None,
            category: None,
        }
    }

    pub fn is_target(&self, image_id: &str) -> bool {
        self.target_ids.contains(image_id)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.target_ids.is_empty() {
            return Err(ValidationError::NoTargets(self.query_id.clone()));
        }
        if let Some(subset) = &self.subset_ids {
            if subset.len() != SUBSET_SIZE {
                return Err(ValidationError::MalformedSubset {
                    query_id: self.query_id.clone(),
                    found: subset.len(),
                });
            }
            if self.target_ids.is_disjoint(subset) {
                return Err(ValidationError::TargetOutsideSubset(self.query_id.clone()));
            }
        }
        Ok(())
    }
}
