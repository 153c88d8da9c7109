//! The batch commands: ingest, index, retrieve, eval, ablate, synth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use cirank_core::evalkit::{
    ablation_grid, ingest as ingest_dataset, render_table, run_ablation, run_benchmark,
    AblationPreset, AblationVariant, BenchmarkRun, DatasetFormat, EvalOptions, GalleryItem,
    IngestPaths, MetricReport, MetricSuite,
};
use cirank_core::fsutil::write_atomic;
use cirank_core::{synth as synthetic, CompositeQuery, GalleryIndex, Pipeline, PipelineConfig};
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigArgs, RunConfig};
use crate::setup::{build_runtime, gallery_refs, index_path, load_dataset, load_index};
use crate::{out_dir, EXIT_ENDPOINT, EXIT_OK, EXIT_PARTIAL};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("config: {}", cfg.to_json());
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Annotation layout: cirr-like, circo-like, fashioniq-like or canonical.
    #[arg(long)]
    pub format: DatasetFormat,
    /// Annotation file(s): captions JSON, query JSON-lines, or FashionIQ cap.* files.
    #[arg(long = "annotations", value_name = "FILE", required = true, num_args = 1..)]
    pub annotations: Vec<PathBuf>,
    /// Gallery listing(s): CIRR split file, COCO image info, FashionIQ split.* files or gallery.jsonl.
    #[arg(long = "gallery", value_name = "FILE", num_args = 1..)]
    pub gallery: Vec<PathBuf>,
    /// Dataset name recorded in reports.
    #[arg(long, default_value = "dataset")]
    pub name: String,
    /// Output directory for queries.jsonl and gallery.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn ingest(a: IngestArgs) -> Result<u8> {
    let ds = ingest_dataset(
        a.format,
        &a.name,
        &IngestPaths {
            annotations: a.annotations,
            gallery: a.gallery,
        },
    )?;
    ds.write_canonical(&a.out)?;
    println!(
        "{}",
        json!({"queries": ds.queries.len(), "gallery": ds.gallery.len(), "out": a.out})
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Args)]
pub struct IndexArgs {
    /// Gallery manifest (gallery.jsonl); rows without a vector are embedded from image_ref or image_id.
    #[arg(long, value_name = "FILE")]
    pub gallery: PathBuf,
    /// Index file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Embedding width for the mock embedder (overrides mock.dim).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Images per embedding request.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn index(a: IndexArgs) -> Result<u8> {
    let cfg = a.cfg.resolve()?;
    echo_config(&cfg);
    let raw = std::fs::read_to_string(&a.gallery)
        .with_context(|| format!("reading {}", a.gallery.display()))?;
    let mut items = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: GalleryItem = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", a.gallery.display(), i + 1))?;
        items.push(item);
    }

    let dim = items
        .iter()
        .find_map(|g| g.vector.as_ref().map(Vec::len))
        .or(a.dim)
        .unwrap_or(cfg.mock.dim);
    let pending: Vec<usize> = (0..items.len()).filter(|&i| items[i].vector.is_none()).collect();
    let rt = build_runtime(&cfg, dim)?;
    for chunk in pending.chunks(a.batch.max(1)) {
        let refs: Vec<String> = chunk
            .iter()
            .map(|&i| items[i].image_ref.clone().unwrap_or_else(|| items[i].image_id.clone()))
            .collect();
        let vecs = rt.clients.embedder.embed_image(&refs)?;
        for (&i, v) in chunk.iter().zip(vecs) {
            items[i].vector = Some(v.as_slice().iter().map(|&x| x as f64).collect());
        }
    }

    let index = GalleryIndex::build(
        items
            .into_iter()
            .map(|g| (g.image_id, g.vector.expect("every row has a vector now"))),
    )?;
    index.save(&a.out)?;
    let reloaded = GalleryIndex::load(&a.out)?;
    if reloaded != index {
        bail!("{}: load-verify failed", a.out.display());
    }
    let bytes = std::fs::read(&a.out)?;
    println!(
        "{}",
        json!({
            "count": index.len(),
            "dim": index.dim(),
            "embedded": pending.len(),
            "sha256": hex::encode(Sha256::digest(&bytes)),
            "out": a.out,
        })
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Args)]
pub struct RetrieveArgs {
    /// Index file (overrides "index" in the config).
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Relative text describing how the target differs from the reference.
    #[arg(long)]
    pub text: String,
    /// Reference image id (or ref); may be omitted when --caption is given.
    #[arg(long)]
    pub reference: Option<String>,
    /// Reference caption(s), used instead of captioning the reference image.
    #[arg(long = "caption")]
    pub captions: Vec<String>,
    /// Query id echoed in the output.
    #[arg(long, default_value = "query")]
    pub query_id: String,
    /// Number of results to print.
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Print the full run report: captions, descriptions, S_c, S_r and fused scores.
    #[arg(long)]
    pub explain: bool,
    /// Gallery manifest used to map image ids to image refs.
    #[arg(long, value_name = "FILE")]
    pub gallery: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn retrieve(a: RetrieveArgs) -> Result<u8> {
    let mut cfg = a.cfg.resolve()?;
    if a.reference.is_none() && a.captions.is_empty() {
        bail!("give --reference, --caption, or both");
    }
    if a.reference.is_none() {
        cfg.pipeline.reference_input = cirank_core::pipeline::ReferenceInput::Caption;
    }
    echo_config(&cfg);
    let index = load_index(&index_path(&a.index, &cfg)?)?;
    let rt = build_runtime(&cfg, index.dim())?;
    let pipeline = Pipeline::new(rt.clients, rt.prompts, cfg.pipeline.clone())?
        .with_image_refs(Arc::new(gallery_refs(a.gallery.as_deref())?));
    let query = CompositeQuery::new(a.query_id, a.reference.unwrap_or_default(), a.text)?
        .with_captions(a.captions);
    let mut run = pipeline.run(&query, &index)?;
    run.final_list.truncate(a.k);
    let out = if a.explain {
        serde_json::to_value(&run)?
    } else {
        json!({
            "query_id": run.query_id,
            "candidates": run.final_list.candidates.iter().enumerate().map(|(i, c)| json!({
                "rank": i + 1,
                "image_id": c.image_id,
                "score": c.fused_score,
            })).collect::<Vec<_>>(),
        })
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    eprintln!("client calls: {}", serde_json::to_string(&rt.stats.snapshot())?);
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Canonical dataset directory with queries.jsonl and gallery.jsonl.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Index file (overrides "index" in the config).
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Output directory for report.json, report.txt and runs.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Queries evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Metric suite: auto, cirr, circo, fashion-iq or full.
    #[arg(long)]
    pub suite: Option<MetricSuite>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

struct EvalInputs {
    cfg: RunConfig,
    ds: cirank_core::evalkit::BenchmarkDataset,
    index: GalleryIndex,
    opts: EvalOptions,
}

fn eval_inputs(
    cfg_args: &ConfigArgs,
    dataset: &Option<PathBuf>,
    index: &Option<PathBuf>,
    suite: Option<MetricSuite>,
    jobs: usize,
) -> Result<EvalInputs> {
    let mut cfg = cfg_args.resolve()?;
    if let Some(s) = suite {
        cfg.suite = s;
    }
    echo_config(&cfg);
    let dir = dataset
        .clone()
        .or_else(|| cfg.dataset_dir.clone())
        .ok_or_else(|| anyhow!("no dataset given (use --dataset or set \"dataset_dir\")"))?;
    let ds = load_dataset(&dir)?;
    let index = load_index(&index_path(index, &cfg)?)?;
    let opts = EvalOptions {
        jobs: jobs.max(1),
        suite: cfg.suite,
    };
    Ok(EvalInputs {
        cfg,
        ds,
        index,
        opts,
    })
}

fn runs_jsonl(run: &BenchmarkRun) -> Result<String> {
    let mut s = String::new();
    for r in &run.runs {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn exit_for_failures(reports: &[&MetricReport]) -> u8 {
    let failures: Vec<_> = reports.iter().flat_map(|r| &r.failures).collect();
    if failures.is_empty() {
        return EXIT_OK;
    }
    let all_failed = reports.iter().all(|r| r.failures.len() == r.query_count);
    if all_failed && failures.iter().all(|f| f.endpoint) {
        EXIT_ENDPOINT
    } else {
        EXIT_PARTIAL
    }
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let EvalInputs {
        cfg,
        ds,
        index,
        opts,
    } = eval_inputs(&a.cfg, &a.dataset, &a.index, a.suite, a.jobs)?;
    let rt = build_runtime(&cfg, index.dim())?;
    let pipeline = Pipeline::new(rt.clients, rt.prompts, cfg.pipeline.clone())?
        .with_image_refs(Arc::new(ds.image_refs()));
    let mut run = run_benchmark(&ds, &index, &pipeline, &opts)?;
    run.report.config = cfg.to_json();

    let out = out_dir(&a.out, "cirank-out");
    let table = render_table(std::slice::from_ref(&run.report));
    write_file(&out.join("report.json"), run.report.to_json_pretty().as_bytes())?;
    write_file(&out.join("report.txt"), table.as_bytes())?;
    write_file(&out.join("runs.jsonl"), runs_jsonl(&run)?.as_bytes())?;
    let calls = rt.stats.snapshot();
    write_json(&out.join("client_calls.json"), &calls)?;

    print!("{table}");
    eprintln!("client calls: {}", serde_json::to_string(&calls)?);
    for f in &run.report.failures {
        eprintln!("failed query {}: {}", f.query_id, f.error);
    }
    Ok(exit_for_failures(&[&run.report]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    PromptModes,
    Modules,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Canonical dataset directory with queries.jsonl and gallery.jsonl.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Index file (overrides "index" in the config).
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Output directory for per-variant reports and comparison.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Built-in grid: prompt-modes or modules.
    #[arg(long, value_enum, conflicts_with = "grid")]
    pub preset: Option<PresetArg>,
    /// JSON grid: [{"label": .., "pipeline": {field overrides}}, ..].
    #[arg(long, value_name = "FILE")]
    pub grid: Option<PathBuf>,
    /// Queries evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Metric suite: auto, cirr, circo, fashion-iq or full.
    #[arg(long)]
    pub suite: Option<MetricSuite>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRow {
    label: String,
    #[serde(default)]
    pipeline: serde_json::Map<String, serde_json::Value>,
}

fn load_grid(path: &Path, base: &PipelineConfig) -> Result<Vec<AblationVariant>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<GridRow> =
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    rows.into_iter()
        .map(|row| {
            let mut merged = serde_json::to_value(base)?;
            let obj = merged.as_object_mut().expect("config is an object");
            for (k, v) in row.pipeline {
                obj.insert(k, v);
            }
            let config: PipelineConfig = serde_json::from_value(merged)
                .with_context(|| format!("grid row {:?}", row.label))?;
            Ok(AblationVariant {
                label: row.label,
                config,
            })
        })
        .collect()
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn ablate(a: AblateArgs) -> Result<u8> {
    let EvalInputs {
        cfg,
        ds,
        index,
        opts,
    } = eval_inputs(&a.cfg, &a.dataset, &a.index, a.suite, a.jobs)?;
    let grid = match (&a.grid, a.preset) {
        (Some(p), _) => load_grid(p, &cfg.pipeline)?,
        (None, Some(PresetArg::Modules)) => ablation_grid(&cfg.pipeline, AblationPreset::Modules),
        (None, _) => ablation_grid(&cfg.pipeline, AblationPreset::PromptModes),
    };
    let rt = build_runtime(&cfg, index.dim())?;
    let runs = run_ablation(&ds, &index, &rt.clients, rt.prompts.clone(), &grid, &opts)?;

    let out = out_dir(&a.out, "cirank-out");
    let mut reports = Vec::with_capacity(runs.len());
    for (v, run) in grid.iter().zip(&runs) {
        let mut report = run.report.clone();
        let mut echo = cfg.clone();
        echo.pipeline = v.config.clone();
        report.config = echo.to_json();
        let name = file_label(&v.label);
        write_file(
            &out.join("reports").join(format!("{name}.json")),
            report.to_json_pretty().as_bytes(),
        )?;
        write_file(
            &out.join("runs").join(format!("{name}.jsonl")),
            runs_jsonl(run)?.as_bytes(),
        )?;
        reports.push(report);
    }
    let table = render_table(&reports);
    write_file(&out.join("comparison.txt"), table.as_bytes())?;
    write_json(&out.join("ablation.json"), &reports)?;
    let calls = rt.stats.snapshot();
    write_json(&out.join("client_calls.json"), &calls)?;
    print!("{table}");
    eprintln!("client calls: {}", serde_json::to_string(&calls)?);
    Ok(exit_for_failures(&reports.iter().collect::<Vec<_>>()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Each pseudo-target embeds exactly onto its target.
    SelfRetrieval,
    /// Targets sit at coarse ranks 2..10; the scorer prefers them.
    Adversarial,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Which construction to generate.
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Number of queries.
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    /// Gallery size.
    #[arg(long, default_value_t = 2000)]
    pub gallery: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory: queries.jsonl, gallery.jsonl, mock_fixtures.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    if a.queries == 0 || a.dim == 0 {
        bail!("--queries and --dim must be >= 1");
    }
    let bench = match a.kind {
        SynthKind::SelfRetrieval => {
            if a.gallery < 2 * a.queries {
                bail!("--gallery must be at least twice --queries");
            }
            synthetic::self_retrieval(a.seed, a.queries, a.gallery, a.dim)
        }
        SynthKind::Adversarial => {
            let cluster = a.queries * 11;
            if a.gallery < cluster {
                bail!("--gallery must be at least 11 x --queries");
            }
            synthetic::adversarial_rerank(a.seed, a.queries, a.gallery - cluster, a.dim)
        }
    };
    bench.dataset.write_canonical(&a.out)?;
    write_json(&a.out.join("mock_fixtures.json"), &bench.fixtures)?;
    let counts: BTreeMap<&str, usize> = BTreeMap::from([
        ("queries", bench.dataset.queries.len()),
        ("gallery", bench.dataset.gallery.len()),
    ]);
    println!("{}", serde_json::to_string(&counts)?);
    Ok(EXIT_OK)
}
