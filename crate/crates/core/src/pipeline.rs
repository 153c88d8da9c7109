//! Two-stage retrieval for one composed query:
//!
//! 1. caption the reference image and rewrite the captions into
//!    pseudo-target descriptions ([`Pipeline::build_pseudo_targets`]);
//! 2. embed the descriptions, average them, and take the exact cosine top-K
//!    ([`Pipeline::coarse_retrieve`]);
//! 3. ask the scorer a Yes/No question about each of the top-m candidates
//!    ([`Pipeline::rerank`]);
//! 4. fuse `alpha * S_c + beta * S_r` for those m, keep `S_c` for the rest, and
//!    sort everything together ([`fuse`]).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{bounded_map, ClientError, ModelClients};
use crate::prompts::{PromptError, PromptSet};
use crate::types::{
    final_order, CompositeQuery, PromptMode, PseudoTarget, RankedList, ScoredCandidate,
    ValidationError, DEFAULT_CAPTIONS,
};
use crate::vector::{ensemble_embed, EmbeddingVector, VectorError};
use crate::vindex::{GalleryIndex, IndexError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Client {
        stage: &'static str,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("candidate {0} is in the re-rank window but has no relevance score")]
    MissingScore(String),
    #[error("relevance score given for {0}, which is outside the re-rank window")]
    ExtraneousScore(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

impl PipelineError {
    fn client(stage: &'static str) -> impl FnOnce(ClientError) -> Self {
        move |source| PipelineError::Client { stage, source }
    }

    /// True when a model endpoint (not the input) caused the failure.
    pub fn is_endpoint_failure(&self) -> bool {
        matches!(self, PipelineError::Client { .. })
    }
}

/// How captions become pseudo-target descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewriteStrategy {
    /// One LLM rewrite per reference caption.
    #[default]
    PerCaption,
    /// A single rewrite over all captions joined by newlines.
    Consolidated,
    /// Use the captions themselves.
    Disabled,
}

/// What the scorer sees of the reference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceInput {
    /// Reference image attached alongside the candidate.
    #[default]
    Pixels,
    /// Only the candidate image is attached; the reference is described by caption.
    Caption,
}

/// What to do when scoring one candidate fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// `S_r = 0`.
    #[default]
    ScoreAsZero,
    /// `S_r = (S_c + 1) / 2`, the coarse score mapped onto `[0, 1]`.
    CoarseScaled,
    /// Fail the whole query.
    Abort,
}

fn d_coarse_k() -> usize {
    50
}
fn d_rerank_m() -> usize {
    10
}
fn d_one() -> f64 {
    1.0
}
fn d_captions() -> usize {
    DEFAULT_CAPTIONS
}
fn d_true() -> bool {
    true
}
fn d_caption_prompt() -> String {
    "Describe the image in detail.".to_string()
}
fn d_parallel() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "d_coarse_k")]
    pub coarse_k: usize,
    #[serde(default = "d_rerank_m")]
    pub rerank_m: usize,
    #[serde(default = "d_one")]
    pub alpha: f64,
    #[serde(default = "d_one")]
    pub beta: f64,
    #[serde(default)]
    pub prompt_mode: PromptMode,
    #[serde(default = "d_captions")]
    pub captions_n: usize,
    /// Min-max scale `S_c` over the coarse list before fusing.
    #[serde(default)]
    pub normalize_coarse_scores: bool,
    /// Run the scoring stage at all.
    #[serde(default = "d_true")]
    pub rerank: bool,
    #[serde(default = "RewriteStrategy::default")]
    pub rewrite: RewriteStrategy,
    /// Union mode only: when false, descriptions are `caption + " " + instruction`
    /// with no LLM call.
    #[serde(default = "d_true")]
    pub union_llm: bool,
    #[serde(default = "d_caption_prompt")]
    pub caption_prompt: String,
    #[serde(default = "ReferenceInput::default")]
    pub reference_input: ReferenceInput,
    #[serde(default = "FailurePolicy::default")]
    pub failure_policy: FailurePolicy,
    /// Concurrent LLM calls issued per query.
    #[serde(default = "d_parallel")]
    pub query_parallelism: usize,
    /// Scan shards for the coarse search; `None` picks by gallery size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_shards: Option<usize>,
    #[serde(default)]
    pub record_timing: bool,
}




impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.coarse_k == 0 || self.rerank_m == 0 {
            return bad("coarse_k and rerank_m must be >= 1".into());
        }
        if self.rerank_m > self.coarse_k {
            return bad(format!(
                "rerank_m ({}) must not exceed coarse_k ({})",
                self.rerank_m, self.coarse_k
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0)
        {
            return bad("alpha and beta must be finite and >= 0".into());
        }
        if self.captions_n == 0 {
            return bad("captions_n must be >= 1".into());
        }
        if self.query_parallelism == 0 {
            return bad("query_parallelism must be >= 1".into());
        }
        Ok(())
    }

    /// Whether the scoring stage changes anything.
    pub fn rerank_active(&self) -> bool {
        self.rerank && self.beta > 0.0
    }
}

/// Fuses relevance scores into a coarse list.
///
/// `coarse` must carry coarse ranks; `scores` must hold exactly the first
/// `min(rerank_m, len)` candidates by coarse rank. With `beta == 0` every
/// fused score is the (possibly normalized) coarse score, so the coarse order
/// is returned unchanged.
pub fn fuse(
    coarse: &RankedList,
    scores: &BTreeMap<String, f64>,
    cfg: &PipelineConfig,
) -> Result<RankedList, PipelineError> {
    let mut cands = coarse.candidates.clone();
    cands.sort_by_key(|c| c.coarse_rank);
    let m = cfg.rerank_m.min(cands.len());

    for id in scores.keys() {
        if !cands[..m].iter().any(|c| &c.image_id == id) {
            return Err(PipelineError::ExtraneousScore(id.clone()));
        }
    }

    let (lo, hi) = cands.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        (lo.min(c.coarse_score), hi.max(c.coarse_score))
    });
    let effective = |s: f64| -> f64 {
        if !cfg.normalize_coarse_scores {
            s
        } else if hi > lo {
            (s - lo) / (hi - lo)
        } else {
            1.0
        }
    };

    for (i, c) in cands.iter_mut().enumerate() {
        let sc = effective(c.coarse_score);
        if i < m {
            let sr = *scores
                .get(&c.image_id)
                .ok_or_else(|| PipelineError::MissingScore(c.image_id.clone()))?;
            c.relevance_score = Some(sr);
            c.fused_score = if cfg.beta == 0.0 {
                sc
            } else {
                cfg.alpha * sc + cfg.beta * sr
            };
        } else {
            c.relevance_score = None;
            c.fused_score = sc;
        }
    }
    cands.sort_by(final_order);
    Ok(RankedList {
        query_id: coarse.query_id.clone(),
        candidates: cands,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub image_id: String,
    pub error: String,
    pub action: String,
}

#[derive(Debug, Clone, Default)]
struct Counts {
    embedder: u64,
    captioner: u64,
    scorer: u64,
}

impl Counts {
    fn to_map(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("captioner".to_string(), self.captioner),
            ("embedder".to_string(), self.embedder),
            ("scorer".to_string(), self.scorer),
        ])
    }
}

/// Coarse-list entry as echoed in run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseEntry {
    pub image_id: String,
    pub coarse_rank: usize,
    pub coarse_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pseudo_target_ms: f64,
    pub coarse_ms: f64,
    pub rerank_ms: f64,
}

/// Everything one query produced; serialized as the per-query run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRun {
    pub query_id: String,
    pub mode: PromptMode,
    pub config: PipelineConfig,
    pub reference_captions: Vec<String>,
    pub descriptions: Vec<String>,
    pub coarse: Vec<CoarseEntry>,
    pub rerank_scores: BTreeMap<String, f64>,
    #[serde(rename = "final")]
    pub final_list: RankedList,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub incidents: Vec<Incident>,
    /// Logical requests issued for this query, cache hits included.
    pub client_calls: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(skip)]
    pub query_vector: Option<EmbeddingVector>,
}

#[derive(Debug, Clone)]
pub struct RerankOutcome {
    pub list: RankedList,
    pub scores: BTreeMap<String, f64>,
    pub incidents: Vec<Incident>,
}

pub struct Pipeline {
    clients: ModelClients,
    prompts: Arc<PromptSet>,
    image_refs: Arc<HashMap<String, String>>,
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        clients: ModelClients,
        prompts: Arc<PromptSet>,
        cfg: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            clients,
            prompts,
            image_refs: Arc::new(HashMap::new()),
            cfg,
        })
    }

    /// Image id → ref (path or URL) for ids whose ref differs from the id.
    pub fn with_image_refs(mut self, refs: Arc<HashMap<String, String>>) -> Self {
        self.image_refs = refs;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    fn image_ref<'a>(&'a self, id: &'a str) -> &'a str {
        self.image_refs.get(id).map(String::as_str).unwrap_or(id)
    }

    /// Reference captions (supplied or generated) and the pseudo-target built
    /// from them.
    pub fn build_pseudo_targets(
        &self,
        query: &CompositeQuery,
    ) -> Result<(PseudoTarget, Vec<String>), PipelineError> {
        let mut counts = Counts::default();
        self.build_pseudo_targets_counted(query, &mut counts)
    }

    fn build_pseudo_targets_counted(
        &self,
        query: &CompositeQuery,
        counts: &mut Counts,
    ) -> Result<(PseudoTarget, Vec<String>), PipelineError> {
        query.validate()?;
        let cfg = &self.cfg;
        let ref_image = self.image_ref(&query.reference_image_id);
        let captions = if query.reference_captions.is_empty() {
            counts.captioner += 1;
            self.clients
                .captioner
                .caption(ref_image, &cfg.caption_prompt, cfg.captions_n)
                .map_err(PipelineError::client("caption"))?
        } else {
            query.reference_captions.clone()
        };
        if captions.iter().any(|c| c.trim().is_empty()) {
            return Err(PipelineError::client("caption")(ClientError::EmptyCompletion));
        }

        let mode = cfg.prompt_mode;
        let instruction = query.relative_text.trim();
        let rewrite_one = |content: &str| -> Result<String, PipelineError> {
            let prompt = self
                .prompts
                .render_pseudo_target_prompt(mode, content, instruction)?;
            let mut out = self
                .clients
                .captioner
                .caption(ref_image, &prompt, 1)
                .map_err(PipelineError::client("rewrite"))?;
            let text = out.pop().unwrap_or_default();
            if text.trim().is_empty() {
                return Err(PipelineError::client("rewrite")(ClientError::EmptyCompletion));
            }
            Ok(text.trim().to_string())
        };

        let descriptions = if mode == PromptMode::Union && !cfg.union_llm {
            captions
                .iter()
                .map(|c| format!("{} {}", c.trim(), instruction))
                .collect()
        } else {
            match cfg.rewrite {
                RewriteStrategy::Disabled => captions.clone(),
                RewriteStrategy::Consolidated => {
                    counts.captioner += 1;
                    vec![rewrite_one(&captions.join("\n"))?]
                }
                RewriteStrategy::PerCaption => {
                    counts.captioner += captions.len() as u64;
                    bounded_map(&captions, cfg.query_parallelism, |c| rewrite_one(c))
                        .into_iter()
                        .collect::<Result<Vec<_>, _>>()?
                }
            }
        };
        let pt = PseudoTarget::new(query.query_id.clone(), mode, descriptions)?;
        Ok((pt, captions))
    }

    /// Embeds and averages the descriptions, then takes the top `coarse_k`.
    pub fn coarse_retrieve(
        &self,
        pt: &PseudoTarget,
        index: &GalleryIndex,
    ) -> Result<(RankedList, EmbeddingVector), PipelineError> {
        let vectors = self
            .clients
            .embedder
            .embed_text(&pt.descriptions)
            .map_err(PipelineError::client("embed"))?;
        let q = ensemble_embed(&vectors)?;
        let hits = match self.cfg.scan_shards {
            Some(s) => index.search_topk_sharded(&q, self.cfg.coarse_k, s)?,
            None => index.search_topk(&q, self.cfg.coarse_k)?,
        };
        Ok((
            RankedList {
                query_id: pt.query_id.clone(),
                candidates: hits,
            },
            q,
        ))
    }

    /// Scores the top `rerank_m` candidates independently and fuses.
    /// `reference_caption` fills the relevance prompt's reference description.
    pub fn rerank(
        &self,
        ranked: &RankedList,
        query: &CompositeQuery,
        reference_caption: &str,
    ) -> Result<RerankOutcome, PipelineError> {
        let cfg = &self.cfg;
        if !cfg.rerank_active() {
            return Ok(RerankOutcome {
                list: ranked.clone(),
                scores: BTreeMap::new(),
                incidents: Vec::new(),
            });
        }
        let mut window: Vec<&ScoredCandidate> = ranked.candidates.iter().collect();
        window.sort_by_key(|c| c.coarse_rank);
        window.truncate(cfg.rerank_m);

        let reference = self.image_ref(&query.reference_image_id).to_string();
        let results = bounded_map(&window, cfg.query_parallelism, |c| {
            let prompt = self.prompts.render_relevance_prompt(
                &query.relative_text,
                reference_caption,
                &c.image_id,
            )?;
            let candidate = self.image_ref(&c.image_id).to_string();
            let refs = match cfg.reference_input {
                ReferenceInput::Pixels => vec![reference.clone(), candidate],
                ReferenceInput::Caption => vec![candidate],
            };
            Ok::<_, PipelineError>(self.clients.scorer.score_yes_probability(&prompt, &refs))
        });

        let mut scores = BTreeMap::new();
        let mut incidents = Vec::new();
        for (c, r) in window.iter().zip(results) {
            let sr = match r? {
                Ok(p) => p,
                Err(e) => {
                    let fallback = match cfg.failure_policy {
                        FailurePolicy::Abort => {
                            return Err(PipelineError::client("score")(e));
                        }
                        FailurePolicy::ScoreAsZero => 0.0,
                        FailurePolicy::CoarseScaled => ((c.coarse_score + 1.0) / 2.0).clamp(0.0, 1.0),
                    };
                    log::warn!(
                        "query {}: scoring {} failed ({e}); using {fallback}",
                        query.query_id,
                        c.image_id
                    );
                    incidents.push(Incident {
                        image_id: c.image_id.clone(),
                        error: e.to_string(),
                        action: format!("{:?} -> {fallback}", cfg.failure_policy),
                    });
                    fallback
                }
            };
            scores.insert(c.image_id.clone(), sr);
        }
        let list = fuse(ranked, &scores, cfg)?;
        Ok(RerankOutcome {
            list,
            scores,
            incidents,
        })
    }

    /// Full two-stage run for one query.
    pub fn run(&self, query: &CompositeQuery, index: &GalleryIndex) -> Result<QueryRun, PipelineError> {
        let mut counts = Counts::default();
        let t0 = Instant::now();
        let (pt, captions) = self.build_pseudo_targets_counted(query, &mut counts)?;
        let t1 = Instant::now();
        counts.embedder += 1;
        let (coarse, qvec) = self.coarse_retrieve(&pt, index)?;
        let t2 = Instant::now();
        let first_caption = captions.first().map(String::as_str).unwrap_or_default();
        let outcome = self.rerank(&coarse, query, first_caption)?;
        counts.scorer += outcome.scores.len() as u64;
        let t3 = Instant::now();

        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        Ok(QueryRun {
            query_id: query.query_id.clone(),
            mode: pt.mode,
            config: self.cfg.clone(),
            reference_captions: captions,
            descriptions: pt.descriptions,
            coarse: coarse
                .candidates
                .iter()
                .map(|c| CoarseEntry {
                    image_id: c.image_id.clone(),
                    coarse_rank: c.coarse_rank,
                    coarse_score: c.coarse_score,
                })
                .collect(),
            rerank_scores: outcome.scores,
            final_list: outcome.list,
            incidents: outcome.incidents,
            client_calls: counts.to_map(),
            timing: self.cfg.record_timing.then(|| Timing {
                pseudo_target_ms: ms(t0, t1),
                coarse_ms: ms(t1, t2),
                rerank_ms: ms(t2, t3),
            }),
            query_vector: Some(qvec),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{DefaultScore, MockCaptioner, MockEmbedder, MockScorer};

    fn coarse_list(scores: &[f64]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoredCandidate::coarse(format!("cand{}", i + 1), s, i + 1))
                .collect(),
        }
    }

    fn cfg_m(m: usize) -> PipelineConfig {
        PipelineConfig {
            rerank_m: m,
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.coarse_k, c.rerank_m, c.captions_n), (50, 10, 15));
        assert_eq!((c.alpha, c.beta), (1.0, 1.0));
        assert_eq!(c.prompt_mode, PromptMode::Intersection);
        assert!(!c.normalize_coarse_scores);
        assert!(c.validate().is_ok());
        let bad = PipelineConfig {
            rerank_m: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fuse_worked_example() {
        let list = coarse_list(&[0.90, 0.80, 0.70]);
        let scores = BTreeMap::from([("cand1".to_string(), 0.0), ("cand2".to_string(), 0.9)]);
        let out = fuse(&list, &scores, &cfg_m(2)).unwrap();
        let ids: Vec<_> = out.ids().collect();
        assert_eq!(ids, ["cand2", "cand1", "cand3"]);
        let fused: Vec<_> = out.candidates.iter().map(|c| c.fused_score).collect();
        assert!((fused[0] - 1.70).abs() < 1e-12);
        assert!((fused[1] - 0.90).abs() < 1e-12);
        assert!((fused[2] - 0.70).abs() < 1e-12);
        assert_eq!(out.candidates[2].relevance_score, None);
    }

    #[test]
    fn fuse_beta_zero_keeps_coarse_order() {
        let list = coarse_list(&[0.5, 0.4, 0.3, -0.2]);
        let scores = BTreeMap::from([("cand1".to_string(), 0.0), ("cand2".to_string(), 1.0)]);
        let cfg = PipelineConfig {
            rerank_m: 2,
            beta: 0.0,
            alpha: 3.0,
            ..Default::default()
        };
        let out = fuse(&list, &scores, &cfg).unwrap();
        assert_eq!(out.ids().collect::<Vec<_>>(), ["cand1", "cand2", "cand3", "cand4"]);
    }

    #[test]
    fn fuse_tail_keeps_raw_scores() {
        let scs: Vec<f64> = (0..50).map(|i| 0.9 - i as f64 * 0.01).collect();
        let list = coarse_list(&scs);
        let scores: BTreeMap<_, _> = (1..=10).map(|i| (format!("cand{i}"), 0.5)).collect();
        let out = fuse(&list, &scores, &cfg_m(10)).unwrap();
        let tail: Vec<_> = out.candidates.iter().filter(|c| c.coarse_rank > 10).collect();
        assert_eq!(tail.len(), 40);
        for w in tail.windows(2) {
            assert!(w[0].coarse_rank < w[1].coarse_rank);
        }
        for c in tail {
            assert_eq!(c.fused_score, c.coarse_score);
        }
    }

    #[test]
    fn fuse_score_contract() {
        let list = coarse_list(&[0.9, 0.8, 0.7]);
        let missing = BTreeMap::from([("cand1".to_string(), 0.1)]);
        assert!(matches!(
            fuse(&list, &missing, &cfg_m(2)),
            Err(PipelineError::MissingScore(id)) if id == "cand2"
        ));
        let extra = BTreeMap::from([
            ("cand1".to_string(), 0.1),
            ("cand2".to_string(), 0.1),
            ("cand3".to_string(), 0.1),
        ]);
        assert!(matches!(
            fuse(&list, &extra, &cfg_m(2)),
            Err(PipelineError::ExtraneousScore(id)) if id == "cand3"
        ));
    }

    #[test]
    fn fuse_with_normalized_coarse_scores() {
        let list = coarse_list(&[0.3, 0.2, 0.1]);
        let scores = BTreeMap::from([("cand1".to_string(), 0.0)]);
        let cfg = PipelineConfig {
            rerank_m: 1,
            normalize_coarse_scores: true,
            ..Default::default()
        };
        let out = fuse(&list, &scores, &cfg).unwrap();
        let fused: Vec<_> = out.candidates.iter().map(|c| c.fused_score).collect();
        assert!((fused[0] - 1.0).abs() < 1e-12);
        assert!((fused[1] - 0.5).abs() < 1e-12);
        assert!(fused[2].abs() < 1e-12);
        assert_eq!(out.candidates[0].coarse_score, 0.3);
    }

    /// A gallery of `n` axis-aligned-ish items where the pseudo-target maps
    /// onto a known vector.
    fn fixture(n: usize) -> (GalleryIndex, Vec<EmbeddingVector>) {
        let dim = 8;
        let rows: Vec<(String, Vec<f64>)> = (0..n)
            .map(|i| {
                let mut v = vec![0.01; dim];
                v[i % dim] = 1.0 + i as f64 * 0.1;
                v[(i + 1) % dim] = 0.3 * i as f64;
                (format!("img_{i}"), v)
            })
            .collect();
        let idx = GalleryIndex::build(rows).unwrap();
        let vs = (0..n)
            .map(|i| EmbeddingVector::from_unit_f32(idx.row(i).to_vec()).unwrap())
            .collect();
        (idx, vs)
    }

    fn pipeline(emb: MockEmbedder, cap: MockCaptioner, sc: MockScorer, cfg: PipelineConfig) -> Pipeline {
        Pipeline::new(ModelClients::new(emb, cap, sc), Arc::new(PromptSet::builtin()), cfg).unwrap()
    }

    #[test]
    fn pseudo_targets_with_mock_captioner() {
        let p = pipeline(
            MockEmbedder::new(0, 8),
            MockCaptioner::new(0),
            MockScorer::new(0),
            PipelineConfig::default(),
        );
        let q = CompositeQuery::new("q1", "ref_1", "shows two dogs eating.").unwrap();
        let (pt, caps) = p.build_pseudo_targets(&q).unwrap();
        assert_eq!(pt.descriptions.len(), 15);
        assert_eq!(caps.len(), 15);
        assert_eq!(pt.mode, PromptMode::Intersection);
    }

    #[test]
    fn pseudo_targets_pass_through_and_errors() {
        let cfg = PipelineConfig {
            rewrite: RewriteStrategy::Disabled,
            ..Default::default()
        };
        let p = pipeline(MockEmbedder::new(0, 8), MockCaptioner::new(0), MockScorer::new(0), cfg);
        let q = CompositeQuery::new("q1", "ref", "make it red")
            .unwrap()
            .with_captions(vec!["a blue car".into()]);
        let (pt, _) = p.build_pseudo_targets(&q).unwrap();
        assert_eq!(pt.descriptions, ["a blue car"]);

        let p = pipeline(
            MockEmbedder::new(0, 8),
            MockCaptioner::new(0).with_fixture("ref", vec![String::new()]),
            MockScorer::new(0),
            PipelineConfig::default(),
        );
        let q = CompositeQuery::new("q1", "ref", "make it red").unwrap();
        assert!(matches!(
            p.build_pseudo_targets(&q),
            Err(PipelineError::Client { source: ClientError::EmptyCompletion, .. })
        ));
    }

    #[test]
    fn union_without_llm_and_consolidated() {
        let cfg = PipelineConfig {
            prompt_mode: PromptMode::Union,
            union_llm: false,
            captions_n: 3,
            ..Default::default()
        };
        let p = pipeline(MockEmbedder::new(0, 8), MockCaptioner::new(0), MockScorer::new(0), cfg);
        let q = CompositeQuery::new("q", "ref", "make it red").unwrap();
        let (pt, caps) = p.build_pseudo_targets(&q).unwrap();
        assert_eq!(pt.descriptions[0], format!("{} make it red", caps[0]));

        let cfg = PipelineConfig {
            rewrite: RewriteStrategy::Consolidated,
            ..Default::default()
        };
        let p = pipeline(MockEmbedder::new(0, 8), MockCaptioner::new(0), MockScorer::new(0), cfg);
        let (pt, _) = p.build_pseudo_targets(&q).unwrap();
        assert_eq!(pt.descriptions.len(), 1);
    }

    #[test]
    fn coarse_self_retrieval_and_shard_invariance() {
        let (idx, vs) = fixture(100);
        let mut runs = Vec::new();
        for shards in [1, 7, 100] {
            let cfg = PipelineConfig {
                scan_shards: Some(shards),
                ..Default::default()
            };
            let p = pipeline(
                MockEmbedder::new(0, 8).with_text_fixture("pt", vs[7].clone()),
                MockCaptioner::new(0).with_fixture("ref", vec!["pt".into()]),
                MockScorer::new(0),
                cfg,
            );
            let pt = PseudoTarget::new("q", PromptMode::Intersection, vec!["pt".into()]).unwrap();
            let (list, _) = p.coarse_retrieve(&pt, &idx).unwrap();
            assert_eq!(list.len(), 50);
            assert_eq!(list.candidates[0].image_id, "img_7");
            runs.push(list);
        }
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rerank_promotes_scored_target() {
        let (idx, vs) = fixture(40);
        let p = pipeline(
            MockEmbedder::new(0, 8).with_text_fixture("pt", vs[3].clone()),
            MockCaptioner::new(0).with_fixture("ref", vec!["pt".into()]),
            MockScorer::new(0).with_default(DefaultScore::Constant(0.0)),
            PipelineConfig::default(),
        );
        let q = CompositeQuery::new("q", "ref", "change it").unwrap();
        let coarse_run = p.run(&q, &idx).unwrap();
        let fifth = coarse_run.coarse[4].image_id.clone();
        assert_ne!(coarse_run.final_list.candidates[0].image_id, fifth);

        let p = pipeline(
            MockEmbedder::new(0, 8).with_text_fixture("pt", vs[3].clone()),
            MockCaptioner::new(0).with_fixture("ref", vec!["pt".into()]),
            MockScorer::new(0)
                .with_default(DefaultScore::Constant(0.0))
                .with_score("ref", fifth.clone(), 1.0),
            PipelineConfig::default(),
        );
        let run = p.run(&q, &idx).unwrap();
        // S_c(5th) + 1 > S_c(1st) since every S_c lies in [-1, 1] and the gap is < 1.
        assert!(coarse_run.coarse[0].coarse_score - coarse_run.coarse[4].coarse_score < 1.0);
        assert_eq!(run.final_list.candidates[0].image_id, fifth);
        assert_eq!(run.client_calls["scorer"], 10);
    }

    #[test]
    fn rerank_identity_when_beta_zero_and_full_window() {
        let (idx, vs) = fixture(30);
        let cfg = PipelineConfig {
            coarse_k: 10,
            rerank_m: 10,
            beta: 0.0,
            ..Default::default()
        };
        let p = pipeline(
            MockEmbedder::new(0, 8).with_text_fixture("pt", vs[0].clone()),
            MockCaptioner::new(0).with_fixture("ref", vec!["pt".into()]),
            MockScorer::new(0),
            cfg,
        );
        let q = CompositeQuery::new("q", "ref", "x").unwrap();
        let run = p.run(&q, &idx).unwrap();
        let coarse_ids: Vec<_> = run.coarse.iter().map(|c| c.image_id.as_str()).collect();
        assert_eq!(run.final_list.ids().collect::<Vec<_>>(), coarse_ids);
        assert_eq!(run.client_calls["scorer"], 0);
    }

    #[test]
    fn scorer_failure_policies() {
        let (idx, vs) = fixture(30);
        let build = |policy| {
            let cfg = PipelineConfig {
                failure_policy: policy,
                ..Default::default()
            };
            let p = pipeline(
                MockEmbedder::new(0, 8).with_text_fixture("pt", vs[0].clone()),
                MockCaptioner::new(0).with_fixture("ref", vec!["pt".into()]),
                MockScorer::new(0),
                cfg,
            );
            let q = CompositeQuery::new("q", "ref", "x").unwrap();
            let first = p.run(&q, &idx).unwrap().coarse[0].image_id.clone();
            let p = pipeline(
                MockEmbedder::new(0, 8).with_text_fixture("pt", vs[0].clone()),
                MockCaptioner::new(0).with_fixture("ref", vec!["pt".into()]),
                MockScorer::new(0).with_failure("ref", first.clone()),
                PipelineConfig {
                    failure_policy: policy,
                    ..Default::default()
                },
            );
            (p.run(&q, &idx), first)
        };
        let (run, victim) = build(FailurePolicy::ScoreAsZero);
        let run = run.unwrap();
        assert_eq!(run.rerank_scores[&victim], 0.0);
        assert_eq!(run.incidents.len(), 1);
        let (run, victim) = build(FailurePolicy::CoarseScaled);
        let run = run.unwrap();
        let sc = run.coarse[0].coarse_score;
        assert!((run.rerank_scores[&victim] - (sc + 1.0) / 2.0).abs() < 1e-12);
        let (run, _) = build(FailurePolicy::Abort);
        assert!(matches!(run, Err(e) if e.is_endpoint_failure()));
    }

    #[test]
    fn run_is_deterministic() {
        let (idx, _) = fixture(60);
        let make = || {
            pipeline(
                MockEmbedder::new(5, 8),
                MockCaptioner::new(5),
                MockScorer::new(5),
                PipelineConfig::default(),
            )
        };
        let q = CompositeQuery::new("q", "ref", "make the dog run").unwrap();
        let a = serde_json::to_string(&make().run(&q, &idx).unwrap()).unwrap();
        let b = serde_json::to_string(&make().run(&q, &idx).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("\"timing\""));
    }
}
