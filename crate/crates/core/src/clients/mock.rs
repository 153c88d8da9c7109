//! Deterministic offline stand-ins for the three model roles.
//!
//! Every output is a pure function of `(seed, inputs)` unless a fixture
//! table overrides it.
//!
//! # Hashed embeddings
//!
//! For input bytes `s`, the mock embedder builds a byte stream from SHA-256
//! blocks
//!
//! ```text
//! block_j = SHA256("cirank-mock-v1" || seed:u64le || tag:u8 || len(s):u64le || s || j:u32le)
//! ```
//!
//! with `tag = b'T'` for text and `b'I'` for images, `j = 0, 1, ..`.
//! Component `i` reads the little-endian `u32` at bytes `4i..4i+4` of the
//! stream and maps it to `(u + 0.5) / 2^32 * 2 - 1`. The vector is then
//! L2-normalized.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{validate_completions, ClientError, Captioner, Embedder, RelevanceScorer};
use crate::vector::{normalize, EmbeddingVector};

const DOMAIN: &[u8] = b"cirank-mock-v1";

fn hash_block(seed: u64, tag: u8, input: &[u8], block: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(seed.to_le_bytes());
    h.update([tag]);
    h.update((input.len() as u64).to_le_bytes());
    h.update(input);
    h.update(block.to_le_bytes());
    h.finalize().into()
}

/// The hashed unit vector described in the module docs.
pub fn hashed_unit_vector(seed: u64, tag: u8, input: &str, dim: usize) -> EmbeddingVector {
    let mut raw = Vec::with_capacity(dim);
    let mut block = 0u32;
    while raw.len() < dim {
        let bytes = hash_block(seed, tag, input.as_bytes(), block);
        for chunk in bytes.chunks_exact(4) {
            if raw.len() == dim {
                break;
            }
            let u = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            raw.push((u as f64 + 0.5) / 4_294_967_296.0 * 2.0 - 1.0);
        }
        block += 1;
    }
    // Every component is nonzero, so the norm cannot vanish.
    normalize(&raw).expect("hashed vector is finite and nonzero")
}

fn hash_u64(seed: u64, tag: u8, parts: &[&str]) -> u64 {
    let mut joined = Vec::new();
    for p in parts {
        joined.extend_from_slice(&(p.len() as u64).to_le_bytes());
        joined.extend_from_slice(p.as_bytes());
    }
    let b = hash_block(seed, tag, &joined, 0);
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    text_fixtures: HashMap<String, EmbeddingVector>,
    image_fixtures: HashMap<String, EmbeddingVector>,
    strict_images: bool,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim: dim.max(1),
            text_fixtures: HashMap::new(),
            image_fixtures: HashMap::new(),
            strict_images: false,
        }
    }

    pub fn with_text_fixture(mut self, text: impl Into<String>, v: EmbeddingVector) -> Self {
        self.text_fixtures.insert(text.into(), v);
        self
    }

    pub fn with_image_fixture(mut self, image_ref: impl Into<String>, v: EmbeddingVector) -> Self {
        self.image_fixtures.insert(image_ref.into(), v);
        self
    }

    /// When set, image refs missing from the fixture table fail with
    /// `EndpointUnavailable` instead of falling back to hashing.
    pub fn strict_images(mut self, strict: bool) -> Self {
        self.strict_images = strict;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Embedder for MockEmbedder {
    fn model_id(&self) -> String {
        format!("mock-embedder/seed={}/dim={}", self.seed, self.dim)
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    return Err(ClientError::InvalidRequest("empty text".into()));
                }
                Ok(self
                    .text_fixtures
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| hashed_unit_vector(self.seed, b'T', t, self.dim)))
            })
            .collect()
    }

    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        image_refs
            .iter()
            .map(|r| match self.image_fixtures.get(r) {
                Some(v) => Ok(v.clone()),
                None if self.strict_images => Err(ClientError::EndpointUnavailable(format!(
                    "cannot resolve image ref {r:?}"
                ))),
                None => Ok(hashed_unit_vector(self.seed, b'I', r, self.dim)),
            })
            .collect()
    }
}

const SUBJECTS: &[&str] = &[
    "dog", "cat", "woman", "man", "child", "car", "bicycle", "bird", "horse", "boat", "dress",
    "shirt", "table", "lamp", "tree", "house",
];
const ATTRIBUTES: &[&str] = &[
    "red", "blue", "small", "large", "striped", "wooden", "white", "black", "old", "bright",
    "green", "yellow",
];
const SCENES: &[&str] = &[
    "on a beach",
    "in a park",
    "inside a kitchen",
    "on a city street",
    "in the snow",
    "next to a window",
    "on a grassy field",
    "in front of a wall",
];

pub struct MockCaptioner {
    seed: u64,
    fixtures: HashMap<String, Vec<String>>,
}

impl MockCaptioner {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fixtures: HashMap::new(),
        }
    }

    /// Every request about `image_ref` returns these strings, cycled to `n`,
    /// whatever the prompt.
    pub fn with_fixture(mut self, image_ref: impl Into<String>, outputs: Vec<String>) -> Self {
        self.fixtures.insert(image_ref.into(), outputs);
        self
    }

    fn synth(&self, image_ref: &str, prompt: &str, i: usize) -> String {
        let h = hash_u64(self.seed, b'C', &[image_ref, prompt, &i.to_string()]);
        let subject = SUBJECTS[(h % SUBJECTS.len() as u64) as usize];
        let attr = ATTRIBUTES[((h >> 16) % ATTRIBUTES.len() as u64) as usize];
        let scene = SCENES[((h >> 32) % SCENES.len() as u64) as usize];
        format!("a {attr} {subject} {scene}")
    }
}

impl Captioner for MockCaptioner {
    fn model_id(&self) -> String {
        format!("mock-captioner/seed={}", self.seed)
    }

    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        if n == 0 {
            return Err(ClientError::InvalidRequest("n must be >= 1".into()));
        }
        let out = match self.fixtures.get(image_ref) {
            Some(f) if !f.is_empty() => f.iter().cycle().take(n).cloned().collect(),
            _ => (0..n).map(|i| self.synth(image_ref, prompt, i)).collect(),
        };
        validate_completions(n, out)
    }
}

/// Score for `(reference, candidate)` pairs missing from the fixture table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultScore {
    /// Uniform in `[0, 1)` from a hash of `(seed, prompt, image_refs)`.
    Hashed,
    Constant(f64),
}

pub struct MockScorer {
    seed: u64,
    fixtures: HashMap<(String, String), f64>,
    failures: HashSet<(String, String)>,
    default: DefaultScore,
}

impl MockScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fixtures: HashMap::new(),
            failures: HashSet::new(),
            default: DefaultScore::Hashed,
        }
    }

    pub fn with_default(mut self, default: DefaultScore) -> Self {
        self.default = default;
        self
    }

    pub fn with_score(
        mut self,
        reference: impl Into<String>,
        candidate: impl Into<String>,
        p: f64,
    ) -> Self {
        self.fixtures.insert((reference.into(), candidate.into()), p);
        self
    }

    /// Requests for this pair time out.
    pub fn with_failure(mut self, reference: impl Into<String>, candidate: impl Into<String>) -> Self {
        self.failures.insert((reference.into(), candidate.into()));
        self
    }

    /// `(reference, candidate)`: the first and last image refs, or `("", ref)`
    /// when only the candidate is attached.
    fn pair(image_refs: &[String]) -> (String, String) {
        match image_refs {
            [] => (String::new(), String::new()),
            [only] => (String::new(), only.clone()),
            [first, .., last] => (first.clone(), last.clone()),
        }
    }
}

impl RelevanceScorer for MockScorer {
    fn model_id(&self) -> String {
        format!("mock-scorer/seed={}", self.seed)
    }

    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError> {
        let pair = Self::pair(image_refs);
        if self.failures.contains(&pair) {
            return Err(ClientError::Timeout(format!(
                "mock scorer timed out on {:?}",
                pair.1
            )));
        }
        if let Some(p) = self.fixtures.get(&pair) {
            return Ok(*p);
        }
        Ok(match self.default {
            DefaultScore::Constant(p) => p,
            DefaultScore::Hashed => {
                let mut parts = vec![prompt];
                parts.extend(image_refs.iter().map(String::as_str));
                (hash_u64(self.seed, b'S', &parts) >> 11) as f64 / (1u64 << 53) as f64
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFixture {
    pub reference: String,
    pub candidate: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub reference: String,
    pub candidate: String,
}

/// Serializable fixture tables for all three mocks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFixtures {
    #[serde(default)]
    pub text_vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub image_vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub strict_images: bool,
    #[serde(default)]
    pub captions: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub scores: Vec<ScoreFixture>,
    #[serde(default)]
    pub score_failures: Vec<PairRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_score: Option<f64>,
}

impl MockFixtures {
    pub fn embedder(&self, seed: u64, dim: usize) -> Result<MockEmbedder, ClientError> {
        let mut e = MockEmbedder::new(seed, dim).strict_images(self.strict_images);
        for (t, v) in &self.text_vectors {
            e = e.with_text_fixture(t.clone(), normalize(v)?);
        }
        for (r, v) in &self.image_vectors {
            e = e.with_image_fixture(r.clone(), normalize(v)?);
        }
        Ok(e)
    }

    pub fn captioner(&self, seed: u64) -> MockCaptioner {
        self.captions
            .iter()
            .fold(MockCaptioner::new(seed), |c, (r, outs)| c.with_fixture(r.clone(), outs.clone()))
    }

    pub fn scorer(&self, seed: u64) -> MockScorer {
        let mut s = MockScorer::new(seed);
        if let Some(p) = self.default_score {
            s = s.with_default(DefaultScore::Constant(p));
        }
        for f in &self.scores {
            s = s.with_score(f.reference.clone(), f.candidate.clone(), f.p);
        }
        for f in &self.score_failures {
            s = s.with_failure(f.reference.clone(), f.candidate.clone());
        }
        s
    }
}
