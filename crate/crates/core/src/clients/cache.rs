//! Content-addressed response cache.
//!
//! A key is the SHA-256 of `role \0 model_id \0 canonical_request_json`,
//! where the canonical JSON has object keys sorted and no insignificant
//! whitespace. Each entry is one file named by the hex digest holding the
//! validated response bytes, plus a `<digest>.meta.json` sidecar
//! `{role, model_id, created_at}`. Writes go through temp-file + rename, so
//! concurrent writers resolve to last-write-wins.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    validate_completions, validate_embeddings, validate_probability, Captioner, ClientError,
    Embedder, RelevanceScorer, Role,
};
use crate::fsutil::write_atomic;
use crate::vector::EmbeddingVector;

#[derive(Debug, Error)]
#[error("cache i/o failure on {path}: {source}")]
pub struct CacheIoError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    digest: [u8; 32],
}

impl CacheKey {
    pub fn new(role: Role, model_id: &str, request: &Value) -> Self {
        let mut h = Sha256::new();
        h.update(role.as_str().as_bytes());
        h.update([0u8]);
        h.update(model_id.as_bytes());
        h.update([0u8]);
        h.update(canonical_json(request).as_bytes());
        Self {
            digest: h.finalize().into(),
        }
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.hex())
    }
}

/// Serializes `v` with object keys in byte order and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar serializes")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    role: Role,
    model_id: String,
    created_at: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheIoError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| CacheIoError {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(key.hex())
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>, CacheIoError> {
        let path = self.entry_path(key);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(CacheIoError { path, source }),
        }
    }

    pub fn put(
        &self,
        key: &CacheKey,
        bytes: &[u8],
        role: Role,
        model_id: &str,
    ) -> Result<(), CacheIoError> {
        let path = self.entry_path(key);
        write_atomic(&path, bytes).map_err(|source| CacheIoError {
            path: path.clone(),
            source,
        })?;
        let meta = Sidecar {
            role,
            model_id: model_id.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let meta_path = self.dir.join(format!("{}.meta.json", key.hex()));
        let meta_bytes = serde_json::to_vec(&meta).expect("sidecar serializes");
        write_atomic(&meta_path, &meta_bytes).map_err(|source| CacheIoError {
            path: meta_path,
            source,
        })
    }

    /// Number of stored responses (sidecars excluded).
    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| {
                        let name = e.file_name();
                        let name = name.to_string_lossy();
                        name.len() == 64 && name.bytes().all(|b| b.is_ascii_hexdigit())
                    })
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serves repeated requests from a [`ResponseCache`]; only validated
/// responses are stored.
pub struct Cached<T> {
    inner: T,
    cache: Arc<ResponseCache>,
}

impl<T> Cached<T> {
    pub fn new(inner: T, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    fn lookup<R: for<'de> Deserialize<'de>>(&self, key: &CacheKey) -> Option<R> {
        match self.cache.get(key) {
            Ok(Some(bytes)) => match serde_json::from_slice(&bytes) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("ignoring unreadable cache entry {}: {e}", key.hex());
                    None
                }
            },
            Ok(None) => None,
            Err(e) => {
                log::warn!("{e}");
                None
            }
        }
    }

    fn store<R: Serialize>(&self, key: &CacheKey, value: &R, role: Role, model_id: &str) {
        let bytes = serde_json::to_vec(value).expect("response serializes");
        if let Err(e) = self.cache.put(key, &bytes, role, model_id) {
            log::warn!("{e}");
        }
    }
}

impl<T: Embedder> Cached<T> {
    fn embed_items(
        &self,
        items: &[String],
        op: &str,
        field: &str,
        call: impl Fn(&[String]) -> Result<Vec<EmbeddingVector>, ClientError>,
    ) -> Result<Vec<EmbeddingVector>, ClientError> {
        let model_id = self.inner.model_id();
        let keys: Vec<CacheKey> = items
            .iter()
            .map(|s| CacheKey::new(Role::Embedder, &model_id, &json!({"op": op, field: s})))
            .collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys
            .iter()
            .map(|k| {
                self.lookup::<Vec<f32>>(k)
                    .and_then(|v| EmbeddingVector::from_unit_f32(v).ok())
            })
            .collect();
        let missing: Vec<usize> = (0..items.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| items[i].clone()).collect();
            let fresh = validate_embeddings(batch.len(), call(&batch)?)?;
            for (&i, v) in missing.iter().zip(fresh) {
                self.store(&keys[i], &v.as_slice(), Role::Embedder, &model_id);
                out[i] = Some(v);
            }
        }
        let out: Vec<EmbeddingVector> = out.into_iter().map(|v| v.expect("filled")).collect();
        validate_embeddings(items.len(), out)
    }
}

impl<T: Embedder> Embedder for Cached<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        self.embed_items(texts, "embed_text", "input", |b| self.inner.embed_text(b))
    }
    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        self.embed_items(image_refs, "embed_image", "image_ref", |b| {
            self.inner.embed_image(b)
        })
    }
}

impl<T: Captioner> Captioner for Cached<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        let model_id = self.inner.model_id();
        let key = CacheKey::new(
            Role::Captioner,
            &model_id,
            &json!({"op": "caption", "image_ref": image_ref, "prompt": prompt, "n": n}),
        );
        if let Some(hit) = self.lookup::<Vec<String>>(&key) {
            if let Ok(hit) = validate_completions(n, hit) {
                return Ok(hit);
            }
        }
        let fresh = validate_completions(n, self.inner.caption(image_ref, prompt, n)?)?;
        self.store(&key, &fresh, Role::Captioner, &model_id);
        Ok(fresh)
    }
}

impl<T: RelevanceScorer> RelevanceScorer for Cached<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError> {
        let model_id = self.inner.model_id();
        let key = CacheKey::new(
            Role::Scorer,
            &model_id,
            &json!({"op": "score", "prompt": prompt, "image_refs": image_refs}),
        );
        if let Some(p) = self.lookup::<f64>(&key) {
            if let Ok(p) = validate_probability(p) {
                return Ok(p);
            }
        }
        let p = validate_probability(self.inner.score_yes_probability(prompt, image_refs)?)?;
        self.store(&key, &p, Role::Scorer, &model_id);
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::limit::{CallStats, Metered};
    use crate::clients::mock::{MockCaptioner, MockEmbedder, MockScorer};

    fn key(s: &str) -> CacheKey {
        CacheKey::new(Role::Scorer, "m", &json!({"prompt": s}))
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let a: Value = serde_json::from_str(r#"{ "b": 1, "a": {"z": [1, 2], "y": "s"} }"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":{"y":"s","z":[1,2]},"b":1}"#).unwrap();
        assert_eq!(canonical_json(&a), r#"{"a":{"y":"s","z":[1,2]},"b":1}"#);
        assert_eq!(CacheKey::new(Role::Embedder, "m", &a), CacheKey::new(Role::Embedder, "m", &b));
    }

    #[test]
    fn key_sensitive_to_every_field() {
        let base = key("abc");
        assert_ne!(base, key("abd"));
        assert_ne!(base, CacheKey::new(Role::Scorer, "m2", &json!({"prompt": "abc"})));
        assert_ne!(base, CacheKey::new(Role::Captioner, "m", &json!({"prompt": "abc"})));
    }

    #[test]
    fn put_get_round_trip_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let k = key("x");
        assert_eq!(cache.get(&k).unwrap(), None);
        cache.put(&k, b"\x00\x01raw", Role::Scorer, "m").unwrap();
        assert_eq!(cache.get(&k).unwrap().unwrap(), b"\x00\x01raw");
        cache.put(&k, b"second", Role::Scorer, "m").unwrap();
        assert_eq!(cache.get(&k).unwrap().unwrap(), b"second");
        assert_eq!(cache.len(), 1);
        let reopened = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&k).unwrap().unwrap(), b"second");
        let meta = fs::read_to_string(dir.path().join(format!("{}.meta.json", k.hex()))).unwrap();
        assert!(meta.contains("\"role\":\"scorer\""));
    }

    #[test]
    fn warm_cache_skips_inner_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let stats = CallStats::new();
        let emb = Cached::new(Metered::new(MockEmbedder::new(1, 8), stats.clone()), cache.clone());
        let cap = Cached::new(Metered::new(MockCaptioner::new(1), stats.clone()), cache.clone());
        let sc = Cached::new(Metered::new(MockScorer::new(1), stats.clone()), cache.clone());

        let texts = vec!["a".to_string(), "b".to_string()];
        let first = emb.embed_text(&texts).unwrap();
        let caps = cap.caption("img", "describe", 3).unwrap();
        let p = sc.score_yes_probability("q", &["img".into()]).unwrap();
        let cold = stats.total();
        assert_eq!(cold, 3);

        assert_eq!(emb.embed_text(&texts).unwrap(), first);
        assert_eq!(cap.caption("img", "describe", 3).unwrap(), caps);
        assert_eq!(sc.score_yes_probability("q", &["img".into()]).unwrap(), p);
        assert_eq!(stats.total(), cold);

        // Partial hit: only the new text reaches the embedder.
        let more = vec!["a".to_string(), "c".to_string()];
        let v = emb.embed_text(&more).unwrap();
        assert_eq!(v[0], first[0]);
        assert_eq!(stats.total(), cold + 1);
    }

    #[test]
    fn failures_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let cap = Cached::new(
            MockCaptioner::new(1).with_fixture("blank", vec![String::new()]),
            cache.clone(),
        );
        assert_eq!(cap.caption("blank", "p", 1), Err(ClientError::EmptyCompletion));
        assert!(cache.is_empty());
    }
}
