use std::collections::BTreeSet;
use std::sync::Arc;

use cirank_core::clients::{
    CallStats, Cached, DefaultScore, Metered, MockCaptioner, MockEmbedder, MockScorer,
    ModelClients, ResponseCache, Role,
};
use cirank_core::evalkit::{
    ablation_grid, render_table, run_ablation, run_benchmark, AblationPreset, BenchmarkDataset,
    EvalOptions, GalleryItem, MetricSuite,
};
use cirank_core::pipeline::FailurePolicy;
use cirank_core::synth;
use cirank_core::{
    CompositeQuery, EmbeddingVector, GalleryIndex, GroundTruth, Pipeline, PipelineConfig,
    PromptSet,
};

const DIM: usize = 16;

/// Item `j` has cosine `0.9 - 0.05 j` with the first axis, so a query on that
/// axis ranks item `j` at position `j + 1`.
fn ladder(n: usize) -> Vec<GalleryItem> {
    (0..n)
        .map(|j| {
            let c = 0.9 - 0.05 * j as f64;
            let mut v = vec![0.0; DIM];
            v[0] = c;
            v[j + 1] = (1.0 - c * c).sqrt();
            GalleryItem {
                image_id: format!("g{j:02}"),
                image_ref: None,
                vector: Some(v),
            }
        })
        .collect()
}

fn axis() -> EmbeddingVector {
    let mut v = vec![0.0; DIM];
    v[0] = 1.0;
    EmbeddingVector::from_unit_f32(v).unwrap()
}

fn index_of(ds: &BenchmarkDataset) -> GalleryIndex {
    GalleryIndex::build(
        ds.gallery
            .iter()
            .map(|g| (g.image_id.clone(), g.vector.clone().unwrap())),
    )
    .unwrap()
}

/// Queries whose captions all embed onto the first axis.
fn ladder_clients(scorer: MockScorer) -> ModelClients {
    ModelClients::new(
        MockEmbedder::new(1, DIM).with_text_fixture("axis", axis()),
        MockCaptioner::new(1).with_fixture("ref", vec!["axis".into()]),
        scorer,
    )
}

fn ladder_query(id: &str) -> CompositeQuery {
    CompositeQuery::new(id, "ref", "keep it").unwrap().with_captions(vec!["axis".into()])
}

fn gt(id: &str, targets: &[usize]) -> GroundTruth {
    GroundTruth {
        query_id: id.into(),
        target_ids: targets.iter().map(|j| format!("g{j:02}")).collect(),
        subset_ids: None,
        category: None,
    }
}

/// AP@k from prefix precisions at each relevant position.
fn ap_oracle(target_ranks: &BTreeSet<usize>, n_targets: usize, k: usize) -> f64 {
    let mut precisions = Vec::new();
    for pos in 1..=k {
        if target_ranks.contains(&pos) {
            let hits = (1..=pos).filter(|r| target_ranks.contains(r)).count();
            precisions.push(hits as f64 / pos as f64);
        }
    }
    precisions.iter().sum::<f64>() / n_targets.min(k) as f64
}

#[test]
fn circo_style_map_matches_oracle() {
    let targets: [&[usize]; 3] = [&[0, 2], &[1, 4, 9], &[30]];
    let mut gallery = ladder(12);
    gallery.push(GalleryItem {
        image_id: "g30".into(),
        image_ref: None,
        vector: Some({
            let mut v = vec![0.0; DIM];
            v[DIM - 1] = 1.0;
            v
        }),
    });
    let queries: Vec<_> = (0..3).map(|i| ladder_query(&format!("q{i}"))).collect();
    let gts: Vec<_> = (0..3).map(|i| gt(&format!("q{i}"), targets[i])).collect();
    let ds = BenchmarkDataset::new("circo-synth", queries, gts, gallery).unwrap();
    let idx = index_of(&ds);
    let cfg = PipelineConfig {
        rerank: false,
        ..Default::default()
    };
    let p = Pipeline::new(ladder_clients(MockScorer::new(1)), Arc::new(PromptSet::builtin()), cfg).unwrap();
    let run = run_benchmark(&ds, &idx, &p, &EvalOptions::default()).unwrap();
    assert_eq!(run.report.suite, MetricSuite::Circo);

    for k in [5, 10, 25, 50] {
        let expected: f64 = targets
            .iter()
            .map(|t| {
                // g30 is orthogonal to the axis and ranks last among 13 items.
                let ranks: BTreeSet<usize> = t.iter().map(|&j| if j == 30 { 13 } else { j + 1 }).collect();
                ap_oracle(&ranks, t.len(), k)
            })
            .sum::<f64>()
            / 3.0;
        let got = run.report.metrics[&format!("mAP@{k}")];
        assert!((got - expected).abs() < 1e-9, "mAP@{k}: {got} vs {expected}");
    }
}

#[test]
fn subset_members_outside_coarse_list_fall_back_to_cosine() {
    let subset: BTreeSet<String> = [1, 4, 6, 7, 8, 9].iter().map(|j| format!("g{j:02}")).collect();
    let mut g = gt("q0", &[4]);
    g.subset_ids = Some(subset);
    let ds = BenchmarkDataset::new("cirr-synth", vec![ladder_query("q0")], vec![g], ladder(12)).unwrap();
    let idx = index_of(&ds);
    let cfg = PipelineConfig {
        coarse_k: 3,
        rerank_m: 2,
        rerank: false,
        ..Default::default()
    };
    let p = Pipeline::new(ladder_clients(MockScorer::new(1)), Arc::new(PromptSet::builtin()), cfg).unwrap();
    let run = run_benchmark(&ds, &idx, &p, &EvalOptions::default()).unwrap();
    let m = &run.report.metrics;
    // Subset order by cosine: g01, g04, g06, ... → target second.
    assert_eq!(m["Rs@1"], 0.0);
    assert_eq!(m["Rs@2"], 1.0);
    assert_eq!(m["R@1"], 0.0);
}

#[test]
fn failed_queries_score_zero_and_are_listed() {
    let ds = BenchmarkDataset::new(
        "fail",
        vec![ladder_query("a"), ladder_query("b")],
        vec![gt("a", &[0]), gt("b", &[0])],
        ladder(12),
    )
    .unwrap();
    let idx = index_of(&ds);
    let cfg = PipelineConfig {
        failure_policy: FailurePolicy::Abort,
        ..Default::default()
    };
    let scorer = MockScorer::new(1)
        .with_default(DefaultScore::Constant(0.0))
        .with_failure("ref", "g03");
    let p = Pipeline::new(ladder_clients(scorer), Arc::new(PromptSet::builtin()), cfg).unwrap();
    let run = run_benchmark(&ds, &idx, &p, &EvalOptions::default()).unwrap();
    assert_eq!(run.report.failures.len(), 2);
    assert!(run.report.failures.iter().all(|f| f.endpoint));
    assert_eq!(run.report.metrics["R@1"], 0.0);
    assert!(run.runs.is_empty());
}

#[test]
fn report_does_not_depend_on_jobs() {
    let bench = synth::self_retrieval(11, 40, 400, 32);
    let idx = GalleryIndex::build(bench.index_rows()).unwrap();
    let make = || {
        let f = &bench.fixtures;
        Pipeline::new(
            ModelClients::new(f.embedder(3, bench.dim).unwrap(), f.captioner(3), f.scorer(3)),
            Arc::new(PromptSet::builtin()),
            PipelineConfig::default(),
        )
        .unwrap()
    };
    let mut seen = Vec::new();
    for jobs in [1, 3, 8] {
        let opts = EvalOptions {
            jobs,
            suite: MetricSuite::Auto,
        };
        let run = run_benchmark(&bench.dataset, &idx, &make(), &opts).unwrap();
        assert_eq!(run.report.metrics["R@1"], 1.0);
        let runs: Vec<String> = run.runs.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        seen.push((run.report.to_json_pretty(), runs));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn warm_cache_issues_no_calls() {
    let bench = synth::adversarial_rerank(5, 20, 100, 32);
    let idx = GalleryIndex::build(bench.index_rows()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run_once = || {
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let stats = CallStats::new();
        let f = &bench.fixtures;
        let clients = ModelClients::new(
            Cached::new(Metered::new(f.embedder(2, bench.dim).unwrap(), stats.clone()), cache.clone()),
            Cached::new(Metered::new(f.captioner(2), stats.clone()), cache.clone()),
            Cached::new(Metered::new(f.scorer(2), stats.clone()), cache),
        );
        let p = Pipeline::new(clients, Arc::new(PromptSet::builtin()), PipelineConfig::default()).unwrap();
        let run = run_benchmark(&bench.dataset, &idx, &p, &EvalOptions::default()).unwrap();
        (run.report.to_json_pretty(), stats)
    };
    let (cold, cold_stats) = run_once();
    assert!(cold_stats.get(Role::Scorer) > 0);
    let (warm, warm_stats) = run_once();
    assert_eq!(warm_stats.total(), 0);
    assert_eq!(cold, warm);
}

#[test]
fn ablation_over_prompt_modes() {
    let bench = synth::self_retrieval(2, 10, 100, 16);
    let idx = GalleryIndex::build(bench.index_rows()).unwrap();
    let f = &bench.fixtures;
    let clients = ModelClients::new(f.embedder(0, 16).unwrap(), f.captioner(0), f.scorer(0));
    let grid = ablation_grid(&PipelineConfig::default(), AblationPreset::PromptModes);
    let runs = run_ablation(
        &bench.dataset,
        &idx,
        &clients,
        Arc::new(PromptSet::builtin()),
        &grid,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(runs.len(), 4);
    let modes: BTreeSet<String> = runs
        .iter()
        .map(|r| r.report.config["prompt_mode"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(modes.len(), 4);
    let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
    let table = render_table(&reports);
    assert_eq!(table.lines().count(), 6);
    assert!(table.contains("intersection"));
}
