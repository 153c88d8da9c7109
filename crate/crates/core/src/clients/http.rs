//! Blocking HTTP clients speaking the common embeddings / chat-completions
//! JSON conventions.
//!
//! | role      | route                | request body                                                              |
//! |-----------|----------------------|---------------------------------------------------------------------------|
//! | embedder  | `POST /embeddings`   | `{"model", "input": [text..]}` or `{"model", "input": [{"type": "image_url", "image_url": {"url"}}..]}` |
//! | captioner | `POST /chat/completions` | `{"model", "messages": [{"role": "user", "content": [image_url?, text]}], "n", "temperature"?}` |
//! | scorer    | `POST /chat/completions` | as captioner plus `"max_tokens": 1, "temperature": 0, "logprobs": true, "top_logprobs": 20` |
//!
//! Embedding responses are `{"data": [{"index", "embedding": [..]}]}`.
//! Completion responses are `{"choices": [{"message": {"content"}, "logprobs": {"content": [{"token", "logprob", "top_logprobs": [{"token", "logprob"}]}]}}]}`.
//!
//! Image refs starting with `http://`, `https://` or `data:` are sent as is;
//! anything else is read from disk (relative to `image_root`) and sent as a
//! base64 data URL.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::yes_prob::{parse_yes_no, yes_probability};
use super::{
    validate_completions, validate_embeddings, validate_probability, Captioner, ClientError,
    Embedder, ModelEndpointConfig, RelevanceScorer,
};
use crate::vector::{normalize, EmbeddingVector};

const TOP_LOGPROBS: u32 = 20;

struct Endpoint {
    cfg: ModelEndpointConfig,
    client: reqwest::blocking::Client,
}

impl Endpoint {
    fn new(cfg: ModelEndpointConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ClientError::EndpointUnavailable(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), route)
    }

    fn api_key(&self) -> Option<String> {
        if self.cfg.api_key_env.is_empty() {
            return None;
        }
        std::env::var(&self.cfg.api_key_env).ok()
    }

    fn post_once(&self, route: &str, body: &str) -> Result<Value, ClientError> {
        let url = self.url(route);
        let mut req = self
            .client
            .post(&url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = self.api_key() {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout(url.clone())
            } else {
                ClientError::EndpointUnavailable(format!("{url}: {e}"))
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout(url.clone())
            } else {
                ClientError::MalformedResponse(format!("{url}: {e}"))
            }
        })?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ClientError::EndpointUnavailable(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ClientError::InvalidRequest(format!("{url}: HTTP {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| ClientError::MalformedResponse(format!("{url}: {e}")))
    }

    /// POSTs with up to `max_retries` retries on transient failures.
    fn post(&self, route: &str, body: &Value) -> Result<Value, ClientError> {
        let body = body.to_string();
        let mut attempt = 0u32;
        loop {
            match self.post_once(route, &body) {
                Err(e) if e.is_transient() && attempt < self.cfg.max_retries => {
                    log::warn!("{e}; retrying ({}/{})", attempt + 1, self.cfg.max_retries);
                    std::thread::sleep(Duration::from_millis(50u64 << attempt.min(6)));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn resolve_image(&self, image_ref: &str) -> Result<String, ClientError> {
        if ["http://", "https://", "data:"]
            .iter()
            .any(|p| image_ref.starts_with(p))
        {
            return Ok(image_ref.to_string());
        }
        let path = match &self.cfg.image_root {
            Some(root) => Path::new(root).join(image_ref),
            None => PathBuf::from(image_ref),
        };
        let bytes = std::fs::read(&path).map_err(|e| {
            ClientError::EndpointUnavailable(format!("cannot resolve image ref {image_ref:?}: {e}"))
        })?;
        let mime = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    fn image_part(&self, image_ref: &str) -> Result<Value, ClientError> {
        Ok(json!({"type": "image_url", "image_url": {"url": self.resolve_image(image_ref)?}}))
    }

    fn user_message(&self, image_refs: &[&str], prompt: &str) -> Result<Value, ClientError> {
        let mut content = Vec::with_capacity(image_refs.len() + 1);
        for r in image_refs.iter().filter(|r| !r.is_empty()) {
            content.push(self.image_part(r)?);
        }
        content.push(json!({"type": "text", "text": prompt}));
        Ok(json!([{"role": "user", "content": content}]))
    }
}

fn malformed(what: &str) -> ClientError {
    ClientError::MalformedResponse(what.to_string())
}

/// Parses an embeddings response into vectors ordered by `index`.
pub fn parse_embeddings(resp: &Value, expected: usize) -> Result<Vec<EmbeddingVector>, ClientError> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing data array"))?;
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
        let emb = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing embedding"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed("non-numeric embedding component")))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((index, emb));
    }
    rows.sort_by_key(|(i, _)| *i);
    if let Some(first) = rows.first() {
        let dim = first.1.len();
        if let Some((_, bad)) = rows.iter().find(|(_, v)| v.len() != dim) {
            return Err(ClientError::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
    }
    let vs = rows
        .into_iter()
        .map(|(_, v)| normalize(&v).map_err(ClientError::from))
        .collect::<Result<Vec<_>, _>>()?;
    validate_embeddings(expected, vs)
}

fn choice_texts(resp: &Value) -> Result<Vec<String>, ClientError> {
    let choices = resp
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing choices"))?;
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .and_then(Value::as_str)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| malformed("choice without message content"))
        })
        .collect()
}

/// Yes-probability from a chat-completions response: first-token
/// log-probabilities when present, otherwise the text answer.
pub fn parse_yes_probability(resp: &Value) -> Result<f64, ClientError> {
    let choice = resp
        .pointer("/choices/0")
        .ok_or_else(|| malformed("missing choices"))?;
    if let Some(first) = choice.pointer("/logprobs/content/0") {
        let mut alts: Vec<(&str, f64)> = Vec::new();
        if let (Some(t), Some(lp)) = (
            first.get("token").and_then(Value::as_str),
            first.get("logprob").and_then(Value::as_f64),
        ) {
            alts.push((t, lp));
        }
        if let Some(top) = first.get("top_logprobs").and_then(Value::as_array) {
            for alt in top {
                if let (Some(t), Some(lp)) = (
                    alt.get("token").and_then(Value::as_str),
                    alt.get("logprob").and_then(Value::as_f64),
                ) {
                    // The sampled token is usually repeated in the top list.
                    if !alts.iter().any(|(seen, _)| *seen == t) {
                        alts.push((t, lp));
                    }
                }
            }
        }
        if let Some(p) = yes_probability(alts) {
            return validate_probability(p);
        }
    }
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    parse_yes_no(text).ok_or_else(|| ClientError::UnparseableAnswer(text.to_string()))
}

pub struct HttpEmbedder {
    ep: Endpoint,
}

impl HttpEmbedder {
    pub fn new(cfg: ModelEndpointConfig) -> Result<Self, ClientError> {
        Ok(Self { ep: Endpoint::new(cfg)? })
    }

    fn embed_inputs(&self, inputs: Vec<Value>) -> Result<Vec<EmbeddingVector>, ClientError> {
        let mut out: Vec<EmbeddingVector> = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.ep.cfg.max_batch) {
            let body = json!({"model": self.ep.cfg.model_id, "input": chunk});
            let resp = self.ep.post("embeddings", &body)?;
            let vs = parse_embeddings(&resp, chunk.len())?;
            if let (Some(prev), Some(next)) = (out.first(), vs.first()) {
                if prev.dim() != next.dim() {
                    return Err(ClientError::DimensionMismatch {
                        expected: prev.dim(),
                        found: next.dim(),
                    });
                }
            }
            out.extend(vs);
        }
        Ok(out)
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> String {
        self.ep.cfg.model_id.clone()
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(ClientError::InvalidRequest("empty text".into()));
        }
        self.embed_inputs(texts.iter().map(|t| json!(t)).collect())
    }

    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let parts = image_refs
            .iter()
            .map(|r| self.ep.image_part(r))
            .collect::<Result<Vec<_>, _>>()?;
        self.embed_inputs(parts)
    }
}

pub struct HttpCaptioner {
    ep: Endpoint,
}

impl HttpCaptioner {
    pub fn new(cfg: ModelEndpointConfig) -> Result<Self, ClientError> {
        Ok(Self { ep: Endpoint::new(cfg)? })
    }
}

impl Captioner for HttpCaptioner {
    fn model_id(&self) -> String {
        self.ep.cfg.model_id.clone()
    }

    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        if n == 0 {
            return Err(ClientError::InvalidRequest("n must be >= 1".into()));
        }
        let messages = self.ep.user_message(&[image_ref], prompt)?;
        let mut out = Vec::with_capacity(n);
        // Some servers ignore `n`; keep asking for the remainder.
        for _ in 0..n {
            let remaining = n - out.len();
            let mut body = json!({
                "model": self.ep.cfg.model_id,
                "messages": messages,
                "n": remaining,
            });
            if let Some(t) = self.ep.cfg.temperature {
                body["temperature"] = json!(t);
            }
            let texts = choice_texts(&self.ep.post("chat/completions", &body)?)?;
            if texts.is_empty() {
                return Err(ClientError::EmptyCompletion);
            }
            out.extend(texts.into_iter().take(remaining));
            if out.len() == n {
                break;
            }
        }
        validate_completions(n, out)
    }
}

pub struct HttpScorer {
    ep: Endpoint,
}

impl HttpScorer {
    pub fn new(cfg: ModelEndpointConfig) -> Result<Self, ClientError> {
        Ok(Self { ep: Endpoint::new(cfg)? })
    }
}

impl RelevanceScorer for HttpScorer {
    fn model_id(&self) -> String {
        self.ep.cfg.model_id.clone()
    }

    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError> {
        let refs: Vec<&str> = image_refs.iter().map(String::as_str).collect();
        let body = json!({
            "model": self.ep.cfg.model_id,
            "messages": self.ep.user_message(&refs, prompt)?,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": true,
            "top_logprobs": TOP_LOGPROBS,
        });
        parse_yes_probability(&self.ep.post("chat/completions", &body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in order, one per connection, and returns the base URL.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn cfg(url: &str) -> ModelEndpointConfig {
        let mut c = ModelEndpointConfig::new(url, "test-model");
        c.timeout_ms = 5_000;
        c.max_retries = 2;
        c
    }

    #[test]
    fn embeddings_round_trip_and_ordering() {
        let body = r#"{"data":[{"index":1,"embedding":[0,2]},{"index":0,"embedding":[3,4]}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let e = HttpEmbedder::new(cfg(&url)).unwrap();
        let vs = e.embed_text(&["a".into(), "b".into()]).unwrap();
        assert_eq!(vs[0].as_slice(), &[0.6, 0.8]);
        assert_eq!(vs[1].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_dimension_mid_batch() {
        let body = r#"{"data":[{"index":0,"embedding":[1,0,0]},{"index":1,"embedding":[1,0]}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let e = HttpEmbedder::new(cfg(&url)).unwrap();
        assert_eq!(
            e.embed_text(&["a".into(), "b".into()]),
            Err(ClientError::DimensionMismatch { expected: 3, found: 2 })
        );
    }

    #[test]
    fn retries_transient_errors() {
        let ok = r#"{"choices":[{"message":{"content":"Yes"}}]}"#;
        let (url, hits) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let s = HttpScorer::new(cfg(&url)).unwrap();
        assert_eq!(s.score_yes_probability("q", &[]).unwrap(), 1.0);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unreachable_endpoint() {
        let mut c = cfg("http://127.0.0.1:1");
        c.max_retries = 0;
        let s = HttpScorer::new(c).unwrap();
        assert!(matches!(
            s.score_yes_probability("q", &[]),
            Err(ClientError::EndpointUnavailable(_))
        ));
    }

    #[test]
    fn empty_completion_is_an_error() {
        let body = r#"{"choices":[{"message":{"content":""}}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let c = HttpCaptioner::new(cfg(&url)).unwrap();
        assert_eq!(c.caption("", "describe", 1), Err(ClientError::EmptyCompletion));
    }

    #[test]
    fn captioner_tops_up_short_responses() {
        let one = r#"{"choices":[{"message":{"content":"a cat"}}]}"#;
        let two = r#"{"choices":[{"message":{"content":"a dog"}},{"message":{"content":"a cow"}}]}"#;
        let (url, _) = serve(vec![(200, one.into()), (200, two.into())]);
        let c = HttpCaptioner::new(cfg(&url)).unwrap();
        assert_eq!(c.caption("", "describe", 3).unwrap(), ["a cat", "a dog", "a cow"]);
    }

    #[test]
    fn logprob_extraction() {
        let resp = json!({"choices":[{"message":{"content":"Yes"},"logprobs":{"content":[{
            "token":"Yes","logprob":-0.2,
            "top_logprobs":[{"token":"Yes","logprob":-0.2},{"token":" No","logprob":-1.8},{"token":"Maybe","logprob":-3.0}]
        }]}}]});
        let p = parse_yes_probability(&resp).unwrap();
        let want = (-0.2f64).exp() / ((-0.2f64).exp() + (-1.8f64).exp());
        assert!((p - want).abs() < 1e-12);
        let only_yes = json!({"choices":[{"logprobs":{"content":[{"token":"Yes","logprob":0.0,"top_logprobs":[]}]}}]});
        assert_eq!(parse_yes_probability(&only_yes).unwrap(), 1.0);
        let neither = json!({"choices":[{"message":{"content":"Perhaps"}}]});
        assert!(matches!(
            parse_yes_probability(&neither),
            Err(ClientError::UnparseableAnswer(_))
        ));
    }

    #[test]
    fn image_refs_resolve_or_name_the_ref() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"\x89PNG").unwrap();
        let mut c = cfg("http://127.0.0.1:1");
        c.image_root = Some(dir.path().to_string_lossy().into_owned());
        let ep = Endpoint::new(c).unwrap();
        assert!(ep.resolve_image("a.png").unwrap().starts_with("data:image/png;base64,"));
        assert_eq!(ep.resolve_image("https://x/y.jpg").unwrap(), "https://x/y.jpg");
        match ep.resolve_image("missing.jpg") {
            Err(ClientError::EndpointUnavailable(m)) => assert!(m.contains("missing.jpg")),
            other => panic!("{other:?}"),
        }
    }
}
