//! Benchmark datasets, retrieval metrics and evaluation runs.

mod ingest;
mod metrics;
mod run;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::pipeline::PipelineError;
use crate::types::{CompositeQuery, GroundTruth, ValidationError};

pub use ingest::{ingest, DatasetFormat, IngestPaths, FASHION_CATEGORIES};
pub use metrics::{
    average_precision_at_k, mean, recall_at_k, recall_subset_at_k, restrict_to_subset, MetricSpec,
    MetricSuite,
};
pub use run::{
    ablation_grid, render_table, run_ablation, run_benchmark, AblationPreset, AblationVariant,
    BenchmarkRun, EvalOptions, FailureEntry, MetricReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    ParseFailure {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("query {query_id}: target {image_id} is not in the gallery")]
    DanglingTargetId { query_id: String, image_id: String },
    #[error("query {query_id}: subset must have exactly 6 members, found {found}")]
    MalformedSubset { query_id: String, found: usize },
    #[error("query {0} has no subset ids")]
    MissingSubset(String),
    #[error("query {query_id}: subset member {image_id} has no score")]
    SubsetMemberUnscored { query_id: String, image_id: String },
    #[error("duplicate query id {0}")]
    DuplicateQuery(String),
    #[error("query {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("gallery id {0} is missing from the index")]
    NotIndexed(String),
    #[error("ablation grid is empty")]
    EmptyGrid,
    #[error("invalid ablation variant {label}: {reason}")]
    InvalidVariant { label: String, reason: String },
    #[error(transparent)]
    Validation(ValidationError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<ValidationError> for EvalError {
    fn from(e: ValidationError) -> Self {
        match e {
            ValidationError::MalformedSubset { query_id, found } => {
                EvalError::MalformedSubset { query_id, found }
            }
            other => EvalError::Validation(other),
        }
    }
}

/// One gallery entry of the canonical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryItem {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
}

impl GalleryItem {
    pub fn id_only(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            image_ref: None,
            vector: None,
        }
    }
}

/// One line of the canonical query file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalQuery {
    pub query_id: String,
    pub reference_image_id: String,
    pub relative_text: String,
    pub target_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkDataset {
    pub name: String,
    pub queries: Vec<CompositeQuery>,
    pub ground_truths: BTreeMap<String, GroundTruth>,
    pub gallery: Vec<GalleryItem>,
}

impl BenchmarkDataset {
    /// Assembles and validates a dataset.
    pub fn new(
        name: impl Into<String>,
        queries: Vec<CompositeQuery>,
        ground_truths: Vec<GroundTruth>,
        gallery: Vec<GalleryItem>,
    ) -> Result<Self, EvalError> {
        let mut gts = BTreeMap::new();
        for gt in ground_truths {
            let id = gt.query_id.clone();
            if gts.insert(id.clone(), gt).is_some() {
                return Err(EvalError::DuplicateQuery(id));
            }
        }
        let ds = Self {
            name: name.into(),
            queries,
            ground_truths: gts,
            gallery,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn gallery_ids(&self) -> BTreeSet<&str> {
        self.gallery.iter().map(|g| g.image_id.as_str()).collect()
    }

    /// Image id → ref for gallery items that carry one.
    pub fn image_refs(&self) -> HashMap<String, String> {
        self.gallery
            .iter()
            .filter_map(|g| g.image_ref.clone().map(|r| (g.image_id.clone(), r)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let gallery = self.gallery_ids();
        let mut seen = BTreeSet::new();
        for q in &self.queries {
            q.validate()?;
            if !seen.insert(q.query_id.as_str()) {
                return Err(EvalError::DuplicateQuery(q.query_id.clone()));
            }
            let gt = self
                .ground_truths
                .get(&q.query_id)
                .ok_or_else(|| EvalError::MissingGroundTruth(q.query_id.clone()))?;
            gt.validate()?;
            let subset = gt.subset_ids.iter().flatten();
            for id in gt.target_ids.iter().chain(subset) {
                if !gallery.contains(id.as_str()) {
                    return Err(EvalError::DanglingTargetId {
                        query_id: q.query_id.clone(),
                        image_id: id.clone(),
                    });
                }
            }
        }
        if let Some(extra) = self.ground_truths.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(EvalError::MissingGroundTruth(extra.clone()));
        }
        Ok(())
    }

    pub fn canonical_queries(&self) -> Vec<CanonicalQuery> {
        self.queries
            .iter()
            .map(|q| {
                let gt = &self.ground_truths[&q.query_id];
                CanonicalQuery {
                    query_id: q.query_id.clone(),
                    reference_image_id: q.reference_image_id.clone(),
                    relative_text: q.relative_text.clone(),
                    target_ids: gt.target_ids.iter().cloned().collect(),
                    subset_ids: gt.subset_ids.as_ref().map(|s| s.iter().cloned().collect()),
                    category: gt.category.clone(),
                    reference_captions: q.reference_captions.clone(),
                }
            })
            .collect()
    }

    /// Writes `queries.jsonl` and `gallery.jsonl` into `dir`.
    pub fn write_canonical(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        let qpath = dir.join("queries.jsonl");
        let gpath = dir.join("gallery.jsonl");
        write_jsonl(&qpath, &self.canonical_queries())?;
        write_jsonl(&gpath, &self.gallery)?;
        Ok((qpath, gpath))
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("serializable row"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str) -> CompositeQuery {
        CompositeQuery::new(id, "r", "make it red").unwrap()
    }

    #[test]
    fn validation_catches_dangling_and_missing() {
        let gallery = vec![GalleryItem::id_only("a"), GalleryItem::id_only("b")];
        let ok = BenchmarkDataset::new(
            "t",
            vec![q("1")],
            vec![GroundTruth::single("1", "a")],
            gallery.clone(),
        );
        assert!(ok.is_ok());
        let dangling = BenchmarkDataset::new(
            "t",
            vec![q("1")],
            vec![GroundTruth::single("1", "zz")],
            gallery.clone(),
        );
        assert!(matches!(dangling, Err(EvalError::DanglingTargetId { image_id, .. }) if image_id == "zz"));
        let missing = BenchmarkDataset::new("t", vec![q("1"), q("2")], vec![GroundTruth::single("1", "a")], gallery);
        assert!(matches!(missing, Err(EvalError::MissingGroundTruth(id)) if id == "2"));
    }
}
