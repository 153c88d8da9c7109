//! Benchmark and ablation runs, metric reports and the comparison table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean, MetricSpec, MetricSuite};
use super::{BenchmarkDataset, EvalError};
use crate::clients::ModelClients;
use crate::pipeline::{Pipeline, PipelineConfig, QueryRun};
use crate::prompts::PromptSet;
use crate::types::{CompositeQuery, GroundTruth, PromptMode, RankedList, ScoredCandidate};
use crate::vector::EmbeddingVector;
use crate::vindex::GalleryIndex;

type CategoryMetrics = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Queries evaluated concurrently.
    pub jobs: usize,
    pub suite: MetricSuite,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            suite: MetricSuite::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub query_id: String,
    pub error: String,
    /// The failure came from a model endpoint rather than the input.
    pub endpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub suite: MetricSuite,
    pub config: serde_json::Value,
    pub prompts_sha256: String,
    pub query_count: usize,
    /// Metric names in display order.
    pub metric_order: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    /// The same metrics on the coarse list, before re-ranking.
    pub coarse_metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    /// Candidates whose relevance score came from the failure policy.
    pub scoring_incidents: usize,
    pub failures: Vec<FailureEntry>,
}

impl MetricReport {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: MetricReport,
    /// Per-query run reports of successful queries, sorted by query id.
    pub runs: Vec<QueryRun>,
}

struct Outcome {
    query_id: String,
    category: Option<String>,
    metrics: Vec<f64>,
    coarse_metrics: Vec<f64>,
    run: Result<QueryRun, FailureEntry>,
}

/// Appends subset members missing from `list` below every retrieved
/// candidate, ordered by their cosine score against the query embedding.
fn with_subset_members(
    list: &RankedList,
    gt: &GroundTruth,
    index: &GalleryIndex,
    qvec: &EmbeddingVector,
) -> Result<RankedList, EvalError> {
    let Some(subset) = &gt.subset_ids else {
        return Ok(list.clone());
    };
    let missing: Vec<&str> = subset
        .iter()
        .map(String::as_str)
        .filter(|id| !list.ids().any(|x| x == *id))
        .collect();
    if missing.is_empty() {
        return Ok(list.clone());
    }
    let scores = index
        .score_ids(qvec, &missing)
        .map_err(crate::pipeline::PipelineError::from)?;
    let mut extra = Vec::with_capacity(missing.len());
    for (id, s) in missing.iter().zip(scores) {
        let s = s.ok_or_else(|| EvalError::SubsetMemberUnscored {
            query_id: gt.query_id.clone(),
            image_id: id.to_string(),
        })?;
        extra.push((id.to_string(), s));
    }
    extra.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out = list.clone();
    let base = out.len();
    out.candidates.extend(
        extra
            .into_iter()
            .enumerate()
            .map(|(i, (id, s))| ScoredCandidate::coarse(id, s, base + i + 1)),
    );
    Ok(out)
}

fn coarse_list(run: &QueryRun) -> RankedList {
    RankedList {
        query_id: run.query_id.clone(),
        candidates: run
            .coarse
            .iter()
            .map(|c| ScoredCandidate::coarse(c.image_id.clone(), c.coarse_score, c.coarse_rank))
            .collect(),
    }
}

fn evaluate_query(
    pipeline: &Pipeline,
    index: &GalleryIndex,
    query: &CompositeQuery,
    gt: &GroundTruth,
    specs: &[MetricSpec],
) -> Result<Outcome, EvalError> {
    let zeros = vec![0.0; specs.len()];
    let mut outcome = Outcome {
        query_id: query.query_id.clone(),
        category: gt.category.clone(),
        metrics: zeros.clone(),
        coarse_metrics: zeros,
        run: Err(FailureEntry {
            query_id: query.query_id.clone(),
            error: String::new(),
            endpoint: false,
        }),
    };
    let run = match pipeline.run(query, index) {
        Ok(run) => run,
        Err(e) => {
            log::warn!("query {} failed: {e}", query.query_id);
            outcome.run = Err(FailureEntry {
                query_id: query.query_id.clone(),
                error: e.to_string(),
                endpoint: e.is_endpoint_failure(),
            });
            return Ok(outcome);
        }
    };
    let needs_subset = specs.iter().any(|m| m.needs_subset());
    let qvec = run.query_vector.as_ref().expect("pipeline records the query vector");
    let (final_list, coarse) = if needs_subset {
        (
            with_subset_members(&run.final_list, gt, index, qvec)?,
            with_subset_members(&coarse_list(&run), gt, index, qvec)?,
        )
    } else {
        (run.final_list.clone(), coarse_list(&run))
    };
    for (i, m) in specs.iter().enumerate() {
        outcome.metrics[i] = m.evaluate(&final_list, gt)?;
        outcome.coarse_metrics[i] = m.evaluate(&coarse, gt)?;
    }
    outcome.run = Ok(run);
    Ok(outcome)
}

/// Averages per-query values; with `macro_by_category`, averages the
/// per-category means instead.
fn aggregate(
    outcomes: &[Outcome],
    specs: &[MetricSpec],
    pick: impl Fn(&Outcome) -> &[f64],
    macro_by_category: bool,
) -> (BTreeMap<String, f64>, Option<CategoryMetrics>) {
    let mut by_cat: BTreeMap<&str, Vec<&Outcome>> = BTreeMap::new();
    for o in outcomes {
        if let Some(c) = &o.category {
            by_cat.entry(c.as_str()).or_default().push(o);
        }
    }
    let cat_means: BTreeMap<String, BTreeMap<String, f64>> = by_cat
        .iter()
        .map(|(cat, os)| {
            let per: BTreeMap<String, f64> = specs
                .iter()
                .enumerate()
                .map(|(i, m)| (m.to_string(), mean(&os.iter().map(|o| pick(o)[i]).collect::<Vec<_>>())))
                .collect();
            (cat.to_string(), per)
        })
        .collect();
    let overall = specs
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let name = m.to_string();
            let v = if macro_by_category && !cat_means.is_empty() {
                mean(&cat_means.values().map(|c| c[&name]).collect::<Vec<_>>())
            } else {
                mean(&outcomes.iter().map(|o| pick(o)[i]).collect::<Vec<_>>())
            };
            (name, v)
        })
        .collect();
    (overall, (!cat_means.is_empty()).then_some(cat_means))
}

/// Runs the pipeline over every query and computes the metric suite.
///
/// Queries whose pipeline fails score 0 on every metric and are listed under
/// `failures`. Results are folded in query-id order, so the report does not
/// depend on `opts.jobs`.
pub fn run_benchmark(
    ds: &BenchmarkDataset,
    index: &GalleryIndex,
    pipeline: &Pipeline,
    opts: &EvalOptions,
) -> Result<BenchmarkRun, EvalError> {
    if let Some(missing) = ds.gallery.iter().find(|g| !index.contains(&g.image_id)) {
        return Err(EvalError::NotIndexed(missing.image_id.clone()));
    }
    let suite = opts.suite.resolve(ds);
    let with_subsets = ds.ground_truths.values().all(|g| g.subset_ids.is_some());
    let specs = suite.metrics(with_subsets);
    if specs.iter().any(|m| m.needs_subset()) {
        if let Some(gt) = ds.ground_truths.values().find(|g| g.subset_ids.is_none()) {
            return Err(EvalError::MissingSubset(gt.query_id.clone()));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<Outcome, EvalError>> = pool.install(|| {
        ds.queries
            .par_iter()
            .map(|q| evaluate_query(pipeline, index, q, &ds.ground_truths[&q.query_id], &specs))
            .collect()
    });
    let mut outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    outcomes.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let macro_avg = suite == MetricSuite::FashionIq;
    let (metrics, categories) = aggregate(&outcomes, &specs, |o| &o.metrics, macro_avg);
    let (coarse_metrics, _) = aggregate(&outcomes, &specs, |o| &o.coarse_metrics, macro_avg);

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o.run {
            Ok(r) => runs.push(r),
            Err(f) => failures.push(f),
        }
    }
    let report = MetricReport {
        dataset: ds.name.clone(),
        label: None,
        suite,
        config: serde_json::to_value(pipeline.config()).expect("config serializes"),
        prompts_sha256: pipeline.prompts().digest(),
        query_count: ds.queries.len(),
        metric_order: specs.iter().map(|m| m.to_string()).collect(),
        metrics,
        coarse_metrics,
        categories,
        scoring_incidents: runs.iter().map(|r| r.incidents.len()).sum(),
        failures,
    };
    Ok(BenchmarkRun { report, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    /// One variant per prompt mode, everything else as the base config.
    PromptModes,
    /// Baseline (union, no re-rank), each module alone, and both together.
    Modules,
}

impl std::str::FromStr for AblationPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompt-modes" => Ok(AblationPreset::PromptModes),
            "modules" => Ok(AblationPreset::Modules),
            other => Err(format!("unknown ablation preset {other:?} (expected prompt-modes or modules)")),
        }
    }
}

pub fn ablation_grid(base: &PipelineConfig, preset: AblationPreset) -> Vec<AblationVariant> {
    let variant = |label: &str, mode: PromptMode, rerank: Option<bool>| AblationVariant {
        label: label.to_string(),
        config: PipelineConfig {
            prompt_mode: mode,
            rerank: rerank.unwrap_or(base.rerank),
            ..base.clone()
        },
    };
    match preset {
        AblationPreset::PromptModes => PromptMode::ALL
            .iter()
            .map(|m| variant(m.as_str(), *m, None))
            .collect(),
        AblationPreset::Modules => vec![
            variant("baseline", PromptMode::Union, Some(false)),
            variant("baseline+intersection", PromptMode::Intersection, Some(false)),
            variant("baseline+rerank", PromptMode::Union, Some(true)),
            variant("full", PromptMode::Intersection, Some(true)),
        ],
    }
}

/// One benchmark run per variant, all sharing clients, prompts and index.
pub fn run_ablation(
    ds: &BenchmarkDataset,
    index: &GalleryIndex,
    clients: &ModelClients,
    prompts: Arc<PromptSet>,
    grid: &[AblationVariant],
    opts: &EvalOptions,
) -> Result<Vec<BenchmarkRun>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let refs: Arc<HashMap<String, String>> = Arc::new(ds.image_refs());
    let mut out = Vec::with_capacity(grid.len());
    for v in grid {
        let pipeline = Pipeline::new(clients.clone(), prompts.clone(), v.config.clone())
            .map_err(|e| EvalError::InvalidVariant {
                label: v.label.clone(),
                reason: e.to_string(),
            })?
            .with_image_refs(refs.clone());
        let mut run = run_benchmark(ds, index, &pipeline, opts)?;
        run.report.label = Some(v.label.clone());
        out.push(run);
    }
    Ok(out)
}

/// Aligned plain-text table, one row per report, values scaled by 100.
/// Category breakdowns come first as `<category> <metric>` columns.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    for r in reports {
        let mut cells = BTreeMap::new();
        if let Some(cats) = &r.categories {
            for (cat, ms) in cats {
                for name in &r.metric_order {
                    let col = format!("{cat} {name}");
                    if !columns.contains(&col) {
                        columns.push(col.clone());
                    }
                    cells.insert(col, ms[name]);
                }
            }
        }
        for name in &r.metric_order {
            let col = if r.categories.is_some() && r.suite == MetricSuite::FashionIq {
                format!("avg {name}")
            } else {
                name.clone()
            };
            if !columns.contains(&col) {
                columns.push(col.clone());
            }
            cells.insert(col, r.metrics[name]);
        }
        let label = r.label.clone().unwrap_or_else(|| r.dataset.clone());
        rows.push((label, cells));
    }

    let first = "variant".to_string();
    let label_w = rows.iter().map(|r| r.0.len()).chain([first.len()]).max().unwrap_or(0);
    let widths: Vec<usize> = columns.iter().map(|c| c.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{first:<label_w$}");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let total = label_w + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (c, w) in columns.iter().zip(&widths) {
            match cells.get(c) {
                Some(v) => {
                    let _ = write!(out, "  {:>w$.2}", v * 100.0);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
