//! Run configuration: defaults, then the JSON config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cirank_core::clients::ModelEndpointConfig;
use cirank_core::evalkit::MetricSuite;
use cirank_core::pipeline::{FailurePolicy, ReferenceInput, RewriteStrategy};
use cirank_core::{PipelineConfig, PromptMode};
use clap::Args;
use serde::{Deserialize, Serialize};

/// Backend for one model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RoleConfig {
    /// Deterministic offline mock, seeded from `seed`.
    #[default]
    Mock,
    Remote(ModelEndpointConfig),
}

fn default_mock_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSettings {
    /// JSON fixture tables for the mock clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    /// Embedding width of the mock embedder when no index fixes it.
    #[serde(default = "default_mock_dim")]
    pub dim: usize,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            fixtures: None,
            dim: default_mock_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub embedder: RoleConfig,
    #[serde(default)]
    pub captioner: RoleConfig,
    #[serde(default)]
    pub scorer: RoleConfig,
    #[serde(default)]
    pub mock: MockSettings,
    /// Directory holding `queries.jsonl` and `gallery.jsonl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub suite: MetricSuite,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        for (role, rc) in [
            ("embedder", &self.embedder),
            ("captioner", &self.captioner),
            ("scorer", &self.scorer),
        ] {
            if let RoleConfig::Remote(ep) = rc {
                ep.validate().with_context(|| format!("{role} endpoint"))?;
            }
        }
        if self.mock.dim == 0 {
            bail!("mock.dim must be >= 1");
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Flags shared by every command that runs models. Each overrides the
/// matching config-file field.
#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; flags given here override its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every mock client.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of the content-addressed response cache.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// JSON fixture tables for the mock clients.
    #[arg(long, value_name = "FILE")]
    pub mock_fixtures: Option<PathBuf>,
    /// Directory with manifest.json and template files replacing the built-in prompts.
    #[arg(long, value_name = "DIR")]
    pub prompts_dir: Option<PathBuf>,
    /// Candidates kept by coarse retrieval.
    #[arg(long)]
    pub coarse_k: Option<usize>,
    /// Top coarse candidates sent to the relevance scorer.
    #[arg(long)]
    pub rerank_m: Option<usize>,
    /// Weight of the coarse score in fusion.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the relevance score in fusion; 0 keeps the coarse order.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Pseudo-target prompt mode: union, llm-generated, instructed-filtered or intersection.
    #[arg(long)]
    pub mode: Option<PromptMode>,
    /// Reference captions generated per query when none are supplied.
    #[arg(long)]
    pub captions_n: Option<usize>,
    /// Skip the relevance-scoring stage.
    #[arg(long)]
    pub no_rerank: bool,
    /// Min-max scale coarse scores over the candidate list before fusion.
    #[arg(long)]
    pub normalize_coarse_scores: bool,
    /// How captions become descriptions: per-caption, consolidated or disabled.
    #[arg(long, value_parser = parse_rewrite)]
    pub rewrite: Option<RewriteStrategy>,
    /// What to do when scoring a candidate fails: score-as-zero, coarse-scaled or abort.
    #[arg(long, value_parser = parse_failure_policy)]
    pub failure_policy: Option<FailurePolicy>,
    /// What the scorer sees of the reference: pixels or caption.
    #[arg(long, value_parser = parse_reference_input)]
    pub reference_input: Option<ReferenceInput>,
    /// Include per-stage wall-clock timings in run reports (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
}

fn parse_kebab<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_rewrite(s: &str) -> Result<RewriteStrategy, String> {
    parse_kebab(s)
}

fn parse_failure_policy(s: &str) -> Result<FailurePolicy, String> {
    parse_kebab(s)
}

fn parse_reference_input(s: &str) -> Result<ReferenceInput, String> {
    parse_kebab(s)
}

impl ConfigArgs {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.pipeline;
        if let Some(v) = self.coarse_k {
            p.coarse_k = v;
        }
        if let Some(v) = self.rerank_m {
            p.rerank_m = v;
        }
        if let Some(v) = self.alpha {
            p.alpha = v;
        }
        if let Some(v) = self.beta {
            p.beta = v;
        }
        if let Some(v) = self.mode {
            p.prompt_mode = v;
        }
        if let Some(v) = self.captions_n {
            p.captions_n = v;
        }
        if self.no_rerank {
            p.rerank = false;
        }
        if self.normalize_coarse_scores {
            p.normalize_coarse_scores = true;
        }
        if let Some(v) = self.rewrite {
            p.rewrite = v;
        }
        if let Some(v) = self.failure_policy {
            p.failure_policy = v;
        }
        if let Some(v) = self.reference_input {
            p.reference_input = v;
        }
        if self.timing {
            p.record_timing = true;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = Some(v.clone());
        }
        if let Some(v) = &self.mock_fixtures {
            cfg.mock.fixtures = Some(v.clone());
        }
        if let Some(v) = &self.prompts_dir {
            cfg.prompts_dir = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
