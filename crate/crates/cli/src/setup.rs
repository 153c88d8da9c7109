//! Builds model clients, prompts and inputs from a resolved [`RunConfig`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use cirank_core::clients::{
    Admission, CallStats, Cached, Captioner, Embedder, HttpCaptioner, HttpEmbedder, HttpScorer,
    Metered, MockCaptioner, MockEmbedder, MockFixtures, MockScorer, ModelClients,
    RelevanceScorer, ResponseCache,
};
use cirank_core::evalkit::{ingest, BenchmarkDataset, DatasetFormat, IngestPaths};
use cirank_core::{GalleryIndex, PromptSet};

use crate::config::{RoleConfig, RunConfig};

pub struct Runtime {
    pub clients: ModelClients,
    /// Requests that reached a backend (cache misses only).
    pub stats: Arc<CallStats>,
    pub prompts: Arc<PromptSet>,
}

fn load_fixtures(cfg: &RunConfig) -> Result<MockFixtures> {
    match &cfg.mock.fixtures {
        None => Ok(MockFixtures::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .with_context(|| format!("reading mock fixtures {}", p.display()))?;
            serde_json::from_str(&raw)
                .with_context(|| format!("parsing mock fixtures {}", p.display()))
        }
    }
}

/// `dim` fixes the mock embedder width; pass the index dimension when there is one.
pub fn build_runtime(cfg: &RunConfig, dim: usize) -> Result<Runtime> {
    let stats = CallStats::new();
    let fixtures = load_fixtures(cfg)?;
    let cache = match &cfg.cache_dir {
        Some(dir) => Some(Arc::new(
            ResponseCache::open(dir).with_context(|| format!("opening cache {}", dir.display()))?,
        )),
        None => None,
    };
    let seed = cfg.seed;

    let embedder: Arc<dyn Embedder> = match &cfg.embedder {
        RoleConfig::Mock => {
            let m: MockEmbedder = fixtures
                .embedder(seed, dim)
                .map_err(|e| anyhow!("mock fixtures: {e}"))?;
            Arc::new(m)
        }
        RoleConfig::Remote(ep) => Arc::new(Admission::new(HttpEmbedder::new(ep.clone())?, ep.max_parallel)),
    };
    let captioner: Arc<dyn Captioner> = match &cfg.captioner {
        RoleConfig::Mock => {
            let m: MockCaptioner = fixtures.captioner(seed);
            Arc::new(m)
        }
        RoleConfig::Remote(ep) => Arc::new(Admission::new(HttpCaptioner::new(ep.clone())?, ep.max_parallel)),
    };
    let scorer: Arc<dyn RelevanceScorer> = match &cfg.scorer {
        RoleConfig::Mock => {
            let m: MockScorer = fixtures.scorer(seed);
            Arc::new(m)
        }
        RoleConfig::Remote(ep) => Arc::new(Admission::new(HttpScorer::new(ep.clone())?, ep.max_parallel)),
    };

    let embedder: Arc<dyn Embedder> = Arc::new(Metered::new(embedder, stats.clone()));
    let captioner: Arc<dyn Captioner> = Arc::new(Metered::new(captioner, stats.clone()));
    let scorer: Arc<dyn RelevanceScorer> = Arc::new(Metered::new(scorer, stats.clone()));
    let clients = match cache {
        Some(c) => ModelClients {
            embedder: Arc::new(Cached::new(embedder, c.clone())),
            captioner: Arc::new(Cached::new(captioner, c.clone())),
            scorer: Arc::new(Cached::new(scorer, c)),
        },
        None => ModelClients {
            embedder,
            captioner,
            scorer,
        },
    };

    let prompts = match &cfg.prompts_dir {
        Some(dir) => PromptSet::load_dir(dir)
            .with_context(|| format!("loading prompts from {}", dir.display()))?,
        None => PromptSet::builtin(),
    };
    Ok(Runtime {
        clients,
        stats,
        prompts: Arc::new(prompts),
    })
}

pub fn index_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.index.clone())
        .ok_or_else(|| anyhow!("no index given (use --index or set \"index\" in the config)"))
}

pub fn load_index(path: &Path) -> Result<GalleryIndex> {
    Ok(GalleryIndex::load(path)?)
}

/// Reads `queries.jsonl` and `gallery.jsonl` from a canonical dataset directory.
pub fn load_dataset(dir: &Path) -> Result<BenchmarkDataset> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    let paths = IngestPaths {
        annotations: vec![dir.join("queries.jsonl")],
        gallery: vec![dir.join("gallery.jsonl")],
    };
    Ok(ingest(DatasetFormat::Canonical, &name, &paths)?)
}

/// Image refs from a gallery manifest, when one is given.
pub fn gallery_refs(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let Some(path) = path else {
        return Ok(HashMap::new());
    };
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading gallery manifest {}", path.display()))?;
    let mut refs = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: cirank_core::evalkit::GalleryItem = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if let Some(r) = item.image_ref {
            refs.insert(item.image_id, r);
        }
    }
    Ok(refs)
}
