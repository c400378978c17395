//! Semantic text extractor used to score captions and to embed texts.
//!
//! Two backends sit behind [`TextEmbedder`]:
//! - [`LocalEmbedder`]: character trigram feature hashing into `dim` signed
//!   buckets, L2-normalized. No weights, fully deterministic per seed.
//! - [`RemoteEmbedder`]: a JSON embeddings endpoint
//!   (`{model, input}` -> `{data: [{index, embedding}]}`), batched and retried.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{normalize_slice, EmbeddingVector};

pub const EMBED_TOKEN_ENV: &str = "EXCAE_EMBED_TOKEN";
pub const REMOTE_BATCH: usize = 64;
pub const REMOTE_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderConfig {
    LocalDeterministic {
        dim: usize,
        seed: u64,
    },
    Remote {
        dim: usize,
        endpoint: String,
        model: String,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_parallelism() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    60
}

impl EmbedderConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderConfig::LocalDeterministic { dim, .. } | EmbedderConfig::Remote { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        if self.dim() < 2 {
            return Err(Error::invalid("embedder dim must be at least 2"));
        }
        Ok(match self {
            EmbedderConfig::LocalDeterministic { dim, seed } => Box::new(LocalEmbedder::new(*dim, *seed)?),
            EmbedderConfig::Remote {
                dim,
                endpoint,
                model,
                parallelism,
                timeout_secs,
            } => Box::new(RemoteEmbedder::new(
                endpoint.clone(),
                model.clone(),
                *dim,
                std::env::var(EMBED_TOKEN_ENV).ok(),
                *parallelism,
                Duration::from_secs(*timeout_secs),
            )),
        })
    }
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Cosine similarity `(a . b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    // exact for repeated vectors, where rounding would leave 1 - ulp
    if a.values() == b.values() {
        return Ok(1.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct LocalEmbedder {
    dim: usize,
    seed: u64,
}

impl LocalEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("embedder dim must be at least 2"));
        }
        Ok(Self { dim, seed })
    }

    fn bucket(&self, gram: &[char]) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for c in gram {
            let mut buf = [0u8; 4];
            h.update(c.encode_utf8(&mut buf).as_bytes());
        }
        let digest = h.finalize();
        let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((idx % self.dim as u64) as usize, sign)
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        let mut v = vec![0.0; self.dim];
        for gram in padded.windows(3) {
            let (i, s) = self.bucket(gram);
            v[i] += s;
        }
        if normalize_slice(&mut v).is_err() {
            // every trigram cancelled out; fall back to the first bucket hit
            let (i, s) = self.bucket(&padded[..3]);
            v[i] = s;
        }
        EmbeddingVector::new(v)
    }
}

impl TextEmbedder for LocalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Memoizes another embedder by exact text.
pub struct CachedEmbedder<'a> {
    inner: &'a dyn TextEmbedder,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<'a> CachedEmbedder<'a> {
    pub fn new(inner: &'a dyn TextEmbedder) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl TextEmbedder for CachedEmbedder<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let missing: Vec<&str> = {
            let memo = self.memo.lock().expect("embedding memo poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !memo.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut memo = self.memo.lock().expect("embedding memo poisoned");
            for (t, e) in missing.into_iter().zip(fresh) {
                memo.insert(t.to_string(), e);
            }
        }
        let memo = self.memo.lock().expect("embedding memo poisoned");
        Ok(texts.iter().map(|t| memo[*t].clone()).collect())
    }
}

/// Counting semaphore bounding in-flight HTTP requests.
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    index: usize,
    embedding: Vec<f64>,
}

pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    token: Option<String>,
    agent: ureq::Agent,
    gate: Semaphore,
    backoff: Duration,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: String,
        model: String,
        dim: usize,
        token: Option<String>,
        parallelism: usize,
        timeout: Duration,
    ) -> Self {
        Self {
            endpoint,
            model,
            dim,
            token,
            agent: http_agent(timeout),
            gate: Semaphore::new(parallelism),
            backoff: Duration::from_millis(250),
        }
    }

    /// Overrides the initial retry delay (doubles on every attempt).
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn request_once(&self, texts: &[&str]) -> std::result::Result<Vec<EmbeddingVector>, String> {
        let _permit = self.gate.acquire();
        let mut req = self.agent.post(&self.endpoint);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req
            .send_json(EmbedRequest {
                model: &self.model,
                input: texts,
            })
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(format!("HTTP {status}: {body}"));
        }
        let parsed: EmbedResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for d in parsed.data {
            if d.index >= texts.len() {
                return Err(format!("response index {} out of range", d.index));
            }
            if d.embedding.len() != self.dim {
                return Err(format!(
                    "embedding dim {} does not match configured {}",
                    d.embedding.len(),
                    self.dim
                ));
            }
            let mut v = d.embedding;
            normalize_slice(&mut v).map_err(|e| e.to_string())?;
            slots[d.index] = Some(EmbeddingVector::new(v).map_err(|e| e.to_string())?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| format!("missing embedding for input {i}")))
            .collect()
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(REMOTE_BATCH) {
            let mut delay = self.backoff;
            let mut last = String::new();
            let mut done = None;
            for attempt in 1..=REMOTE_ATTEMPTS {
                match self.request_once(chunk) {
                    Ok(v) => {
                        done = Some(v);
                        break;
                    }
                    Err(e) => {
                        log::warn!("embedding request attempt {attempt} failed: {e}");
                        last = e;
                        if attempt < REMOTE_ATTEMPTS {
                            std::thread::sleep(delay);
                            delay *= 2;
                        }
                    }
                }
            }
            match done {
                Some(v) => out.extend(v),
                None => {
                    return Err(Error::Backend {
                        backend: format!("embedder {}", self.endpoint),
                        attempts: REMOTE_ATTEMPTS,
                        reason: last,
                    })
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}
