//! Admission control, call counting, and a bounded parallel map.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::Serialize;

use super::{Captioner, ClientError, Embedder, RelevanceScorer, Role};
use crate::vector::EmbeddingVector;

/// Counting semaphore.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit { sem: self }
    }
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.sem.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.sem.cv.notify_one();
    }
}

/// Caps in-flight requests to the wrapped client at `max_parallel`,
/// regardless of how many threads call it.
pub struct Admission<T> {
    inner: T,
    sem: Semaphore,
}

impl<T> Admission<T> {
    pub fn new(inner: T, max_parallel: usize) -> Self {
        Self {
            inner,
            sem: Semaphore::new(max_parallel),
        }
    }
}

impl<T: Embedder> Embedder for Admission<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let _p = self.sem.acquire();
        self.inner.embed_text(texts)
    }
    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        let _p = self.sem.acquire();
        self.inner.embed_image(image_refs)
    }
}

impl<T: Captioner> Captioner for Admission<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        let _p = self.sem.acquire();
        self.inner.caption(image_ref, prompt, n)
    }
}

impl<T: RelevanceScorer> RelevanceScorer for Admission<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError> {
        let _p = self.sem.acquire();
        self.inner.score_yes_probability(prompt, image_refs)
    }
}

/// Shared per-role request counters.
#[derive(Debug, Default)]
pub struct CallStats {
    embedder: AtomicU64,
    captioner: AtomicU64,
    scorer: AtomicU64,
}

impl CallStats {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn counter(&self, role: Role) -> &AtomicU64 {
        match role {
            Role::Embedder => &self.embedder,
            Role::Captioner => &self.captioner,
            Role::Scorer => &self.scorer,
        }
    }

    pub fn record(&self, role: Role) {
        self.counter(role).fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, role: Role) -> u64 {
        self.counter(role).load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.get(Role::Embedder) + self.get(Role::Captioner) + self.get(Role::Scorer)
    }

    pub fn snapshot(&self) -> CallCounts {
        CallCounts(
            [Role::Embedder, Role::Captioner, Role::Scorer]
                .into_iter()
                .map(|r| (r.as_str().to_string(), self.get(r)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct CallCounts(pub BTreeMap<String, u64>);

/// Counts every call that reaches the wrapped client.
pub struct Metered<T> {
    inner: T,
    stats: Arc<CallStats>,
}

impl<T> Metered<T> {
    pub fn new(inner: T, stats: Arc<CallStats>) -> Self {
        Self { inner, stats }
    }
}

impl<T: Embedder> Embedder for Metered<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        self.stats.record(Role::Embedder);
        self.inner.embed_text(texts)
    }
    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        self.stats.record(Role::Embedder);
        self.inner.embed_image(image_refs)
    }
}

impl<T: Captioner> Captioner for Metered<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        self.stats.record(Role::Captioner);
        self.inner.caption(image_ref, prompt, n)
    }
}

impl<T: RelevanceScorer> RelevanceScorer for Metered<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }
    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError> {
        self.stats.record(Role::Scorer);
        self.inner.score_yes_probability(prompt, image_refs)
    }
}

/// Maps `f` over `items` on at most `max_parallel` threads. Output order
/// matches input order.
pub fn bounded_map<T, R, F>(items: &[T], max_parallel: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_parallel.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    /// Records the peak number of concurrent calls.
    struct Probe {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl RelevanceScorer for Probe {
        fn model_id(&self) -> String {
            "probe".into()
        }
        fn score_yes_probability(&self, _: &str, _: &[String]) -> Result<f64, ClientError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(0.5)
        }
    }

    #[test]
    fn admission_caps_in_flight_requests() {
        let probe = Arc::new(Probe {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let limited = Admission::new(probe.clone(), 3);
        let items: Vec<usize> = (0..40).collect();
        let out = bounded_map(&items, 16, |_| limited.score_yes_probability("p", &[]).unwrap());
        assert_eq!(out.len(), 40);
        let peak = probe.peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak {peak}");
        assert!(peak >= 2, "expected real concurrency, peak {peak}");
    }

    #[test]
    fn bounded_map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        for workers in [1, 4, 64] {
            assert_eq!(bounded_map(&items, workers, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        assert!(bounded_map(&Vec::<u8>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn metered_counts_calls() {
        let stats = CallStats::new();
        let m = Metered::new(
            Probe {
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            stats.clone(),
        );
        m.score_yes_probability("a", &[]).unwrap();
        m.score_yes_probability("b", &[]).unwrap();
        assert_eq!(stats.get(Role::Scorer), 2);
        assert_eq!(stats.total(), 2);
        assert_eq!(stats.snapshot().0["scorer"], 2);
    }
}
