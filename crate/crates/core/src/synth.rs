//! Seeded synthetic benchmarks with known answers, paired with the mock
//! fixtures that make them work.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clients::{MockFixtures, ScoreFixture};
use crate::evalkit::{BenchmarkDataset, GalleryItem};
use crate::types::{CompositeQuery, GroundTruth};

pub struct SynthBench {
    pub dataset: BenchmarkDataset,
    pub fixtures: MockFixtures,
    pub dim: usize,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        // Box-Muller; the loop only guards against an all-zero draw.
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random::<f64>();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector with cosine exactly `c` (before f32 rounding) to unit `q`.
fn at_cosine(rng: &mut ChaCha8Rng, q: &[f64], c: f64) -> Vec<f64> {
    let r = gaussian_unit(rng, q.len());
    let proj: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
    let orth: Vec<f64> = r.iter().zip(q).map(|(a, b)| a - proj * b).collect();
    let norm = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = (1.0 - c * c).sqrt();
    q.iter().zip(&orth).map(|(a, o)| c * a + s * o / norm).collect()
}

fn pseudo_target_text(qid: &str) -> String {
    format!("pseudo target for {qid}")
}

fn gallery_id(i: usize) -> String {
    format!("img_{i:05}")
}

/// `n_queries` queries over `n_gallery` random items. Every query's caption,
/// rewrite and hence pseudo-target text maps to its target's exact vector, so
/// coarse retrieval puts the target first. The scorer returns a constant, which
/// leaves the order unchanged.
pub fn self_retrieval(seed: u64, n_queries: usize, n_gallery: usize, dim: usize) -> SynthBench {
    assert!(n_gallery >= 2 * n_queries, "need distinct references and targets");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<Vec<f64>> = (0..n_gallery).map(|_| gaussian_unit(&mut rng, dim)).collect();
    let mut order: Vec<usize> = (0..n_gallery).collect();
    order.shuffle(&mut rng);

    let mut fixtures = MockFixtures {
        default_score: Some(0.5),
        ..Default::default()
    };
    let mut queries = Vec::with_capacity(n_queries);
    let mut gts = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let qid = format!("q{i:04}");
        let reference = gallery_id(order[2 * i]);
        let target = order[2 * i + 1];
        let text = pseudo_target_text(&qid);
        fixtures.text_vectors.insert(text.clone(), vectors[target].clone());
        fixtures.captions.insert(reference.clone(), vec![text.clone()]);
        queries.push(
            CompositeQuery::new(qid.clone(), reference, format!("change {i}"))
                .expect("valid query")
                .with_captions(vec![text]),
        );
        gts.push(GroundTruth::single(qid, gallery_id(target)));
    }
    let gallery = vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| GalleryItem {
            image_id: gallery_id(i),
            image_ref: None,
            vector: Some(v),
        })
        .collect();
    let dataset = BenchmarkDataset::new("synthetic-self-retrieval", queries, gts, gallery)
        .expect("synthetic dataset is consistent");
    SynthBench {
        dataset,
        fixtures,
        dim,
    }
}

/// Items per query cluster: the target plus nine distractors.
const CLUSTER: usize = 10;

/// `n_queries` queries whose target sits at a coarse rank in `[2, 10]`, behind
/// distractors of higher cosine. The scorer gives the target 1.0 and every
/// other candidate 0.2, so re-ranking with `alpha = beta = 1` lifts the
/// target to rank 1 while coarse recall@1 stays 0.
pub fn adversarial_rerank(seed: u64, n_queries: usize, n_filler: usize, dim: usize) -> SynthBench {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gallery = Vec::new();
    let push = |v: Vec<f64>, gallery: &mut Vec<GalleryItem>| {
        let id = gallery_id(gallery.len());
        gallery.push(GalleryItem {
            image_id: id.clone(),
            image_ref: None,
            vector: Some(v),
        });
        id
    };

    let mut fixtures = MockFixtures {
        default_score: Some(0.2),
        ..Default::default()
    };
    let mut queries = Vec::with_capacity(n_queries);
    let mut gts = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let qid = format!("q{i:04}");
        let q = gaussian_unit(&mut rng, dim);
        let target_rank = rng.random_range(2..=CLUSTER);
        let reference = push(gaussian_unit(&mut rng, dim), &mut gallery);
        let mut target = String::new();
        for r in 1..=CLUSTER {
            // Cosines 0.95, 0.94, ... keep the cluster well above random items.
            let v = at_cosine(&mut rng, &q, 0.96 - 0.01 * r as f64);
            let id = push(v, &mut gallery);
            if r == target_rank {
                target = id;
            }
        }
        let text = pseudo_target_text(&qid);
        fixtures.text_vectors.insert(text.clone(), q);
        fixtures.captions.insert(reference.clone(), vec![text.clone()]);
        fixtures.scores.push(ScoreFixture {
            reference: reference.clone(),
            candidate: target.clone(),
            p: 1.0,
        });
        queries.push(
            CompositeQuery::new(qid.clone(), reference, format!("change {i}"))
                .expect("valid query")
                .with_captions(vec![text]),
        );
        gts.push(GroundTruth::single(qid, target));
    }
    for _ in 0..n_filler {
        let v = gaussian_unit(&mut rng, dim);
        push(v, &mut gallery);
    }
    let ids: BTreeSet<&str> = gallery.iter().map(|g| g.image_id.as_str()).collect();
    debug_assert_eq!(ids.len(), gallery.len());
    let dataset = BenchmarkDataset::new("synthetic-adversarial-rerank", queries, gts, gallery)
        .expect("synthetic dataset is consistent");
    SynthBench {
        dataset,
        fixtures,
        dim,
    }
}

impl SynthBench {
    /// Gallery rows as `(id, vector)` pairs for index building.
    pub fn index_rows(&self) -> Vec<(String, Vec<f64>)> {
        self.dataset
            .gallery
            .iter()
            .map(|g| (g.image_id.clone(), g.vector.clone().expect("synthetic rows carry vectors")))
            .collect()
    }
}
