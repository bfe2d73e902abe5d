//! Embedding, reranking, and reader clients.
//!
//! Each service sits behind a small trait so the pipeline can run against a
//! real HTTP endpoint or an in-process mock. The HTTP clients speak the
//! common JSON shapes:
//!
//! * embeddings: `POST {"model", "input": [..]}` returning `{"data": [{"index", "embedding"}]}`
//! * rerank: `POST {"model", "query", "documents": [..]}` returning `{"results": [{"index", "relevance_score"}]}`
//! * chat: `POST {"model", "messages", "temperature", "max_tokens", "n", "seed"}` returning `{"choices": [{"index", "message": {"content"}}]}`
//!
//! Items in a response are matched back to the request by their `index`
//! field, never by position.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::corpus::{DefaultTokenizer, Document, Tokenizer};
use crate::index::EmbeddingVector;

/// Most documents a reranker sees in one request.
pub const RERANK_BATCH: usize = 100;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    Parameter(String),
    #[error("{endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint}: prompt of {prompt_len} chars exceeds the context budget; truncate the prompt")]
    ContextOverflow { endpoint: String, prompt_len: usize },
    #[error("{endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("client configuration: {0}")]
    Config(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport { .. })
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub n_parallel: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 1024,
            seed: None,
            n_parallel: 16,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            n_parallel: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_parallel == 0 {
            return Err(ClientError::Parameter("n_parallel must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ClientError::Parameter(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ClientError::Parameter("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankScore {
    pub doc_id: String,
    pub relevance: f32,
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

pub trait Reranker: Send + Sync {
    /// One score per input document, in input order.
    fn rerank(&self, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>>;
}

pub trait Reader: Send + Sync {
    /// `params.n_parallel` completions for one prompt.
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed(texts)
    }
}

impl<T: Reranker + ?Sized> Reranker for Arc<T> {
    fn rerank(&self, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>> {
        (**self).rerank(query, docs)
    }
}

impl<T: Reader + ?Sized> Reader for Arc<T> {
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>> {
        (**self).generate(prompt, params)
    }
}

pub fn validate_embed_input(texts: &[String]) -> Result<()> {
    if texts.is_empty() {
        return Err(ClientError::Parameter("embed called with no texts".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ClientError::Parameter(format!("text {i} is empty")));
    }
    Ok(())
}

pub fn validate_rerank_input(docs: &[Document]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(ClientError::Parameter(format!("duplicate doc id {:?}", d.id)));
        }
    }
    Ok(())
}

/// Reranks any number of documents in batches of at most [`RERANK_BATCH`].
pub fn rerank_batched(reranker: &dyn Reranker, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>> {
    validate_rerank_input(docs)?;
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(RERANK_BATCH) {
        let scores = reranker.rerank(query, chunk)?;
        if scores.len() != chunk.len() {
            return Err(ClientError::Protocol {
                endpoint: "reranker".into(),
                message: format!("{} scores for {} documents", scores.len(), chunk.len()),
            });
        }
        out.extend(scores);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(30))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cond: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cond.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cond.notify_one();
    }
}

/// Line-delimited JSON log of every request and response. Request bodies are
/// recorded only as their SHA-256.
#[derive(Debug)]
pub struct RunLog {
    out: Mutex<BufWriter<File>>,
}

impl RunLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn record(&self, endpoint: &str, request_body: &[u8], status: Option<u16>, response: &str) {
        let line = json!({
            "endpoint": endpoint,
            "request_sha256": hex::encode(Sha256::digest(request_body)),
            "status": status,
            "response": response,
        });
        let mut out = self.out.lock().unwrap();
        // Logging must never fail a request.
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub concurrency: usize,
    pub batch_size: usize,
    /// Reject prompts longer than this many characters before sending.
    pub context_chars: Option<usize>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: 120,
            max_retries: RetryPolicy::default().max_retries,
            concurrency: 8,
            batch_size: 64,
            context_chars: None,
        }
    }
}

/// Shared HTTP machinery: agent, auth, retry, concurrency limit, run log.
pub struct HttpClient {
    config: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
    limit: Semaphore,
    log: Option<Arc<RunLog>>,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(ClientError::Config("endpoint is empty".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ClientError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            retry: RetryPolicy {
                max_retries: config.max_retries,
                ..RetryPolicy::default()
            },
            limit: Semaphore::new(config.concurrency),
            agent,
            api_key,
            config,
            log: None,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_log(mut self, log: Arc<RunLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn transport(&self, message: impl Into<String>) -> ClientError {
        ClientError::Transport {
            endpoint: self.config.endpoint.clone(),
            message: message.into(),
        }
    }

    fn protocol(&self, message: impl Into<String>) -> ClientError {
        ClientError::Protocol {
            endpoint: self.config.endpoint.clone(),
            message: message.into(),
        }
    }

    fn post_once(&self, body: &[u8]) -> Result<Value> {
        let _permit = self.limit.acquire();
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => {
                if let Some(log) = &self.log {
                    log.record(&self.config.endpoint, body, None, &e.to_string());
                }
                return Err(self.transport(e.to_string()));
            }
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.transport(format!("reading response: {e}")))?;
        if let Some(log) = &self.log {
            log.record(&self.config.endpoint, body, Some(status), &text);
        }
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| self.protocol(format!("bad JSON: {e}"))),
            408 | 429 | 500..=599 => Err(self.transport(format!("HTTP {status}: {text}"))),
            400 | 413 if looks_like_context_overflow(&text) => Err(ClientError::ContextOverflow {
                endpoint: self.config.endpoint.clone(),
                prompt_len: 0,
            }),
            _ => Err(self.protocol(format!("HTTP {status}: {text}"))),
        }
    }

    pub fn post(&self, body: &Value) -> Result<Value> {
        let bytes = serde_json::to_vec(body).expect("JSON values serialize");
        self.retry.run(|| self.post_once(&bytes))
    }
}

fn looks_like_context_overflow(body: &str) -> bool {
    let lower = body.to_lowercase();
    lower.contains("context") && (lower.contains("length") || lower.contains("window") || lower.contains("too long"))
}

/// Sorts `items` (each carrying an `index`) into request order and checks that
/// exactly `expected` distinct indices came back.
fn by_index<'a>(client: &HttpClient, items: &'a [Value], expected: usize) -> Result<Vec<&'a Value>> {
    let mut slots: Vec<Option<&Value>> = vec![None; expected];
    for item in items {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .ok_or_else(|| client.protocol("response item without index"))? as usize;
        let slot = slots
            .get_mut(idx)
            .ok_or_else(|| client.protocol(format!("index {idx} out of range")))?;
        if slot.replace(item).is_some() {
            return Err(client.protocol(format!("index {idx} repeated")));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| client.protocol(format!("missing index {i}"))))
        .collect()
}

pub struct HttpEmbedder {
    client: HttpClient,
    normalize: bool,
    dims: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient, normalize: bool) -> Self {
        Self {
            client,
            normalize,
            dims: OnceLock::new(),
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = json!({ "model": self.client.config.model, "input": texts });
        let resp = self.client.post(&body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| self.client.protocol("response has no data array"))?;
        let mut out = Vec::with_capacity(texts.len());
        for item in by_index(&self.client, data, texts.len())? {
            let v: Vec<f32> = serde_json::from_value(item.get("embedding").cloned().unwrap_or(Value::Null))
                .map_err(|e| self.client.protocol(format!("bad embedding: {e}")))?;
            let dims = *self.dims.get_or_init(|| v.len());
            if v.len() != dims {
                return Err(self
                    .client
                    .protocol(format!("embedding dims drifted from {dims} to {}", v.len())));
            }
            let v = EmbeddingVector(v);
            out.push(if self.normalize { v.normalized() } else { v });
        }
        Ok(out)
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        validate_embed_input(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.client.config.batch_size.max(1)) {
            out.extend(self.embed_batch(chunk)?);
        }
        Ok(out)
    }
}

pub struct HttpReranker {
    client: HttpClient,
}

impl HttpReranker {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl Reranker for HttpReranker {
    fn rerank(&self, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>> {
        validate_rerank_input(docs)?;
        if docs.is_empty() {
            return Ok(Vec::new());
        }
        if docs.len() > RERANK_BATCH {
            return rerank_batched(self, query, docs);
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let body = json!({ "model": self.client.config.model, "query": query, "documents": texts });
        let resp = self.client.post(&body)?;
        let results = resp
            .get("results")
            .and_then(Value::as_array)
            .ok_or_else(|| self.client.protocol("response has no results array"))?;
        by_index(&self.client, results, docs.len())?
            .into_iter()
            .zip(docs)
            .map(|(item, doc)| {
                let relevance = item
                    .get("relevance_score")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| self.client.protocol("result without relevance_score"))?;
                Ok(RerankScore {
                    doc_id: doc.id.clone(),
                    relevance: relevance as f32,
                })
            })
            .collect()
    }
}

pub struct HttpReader {
    client: HttpClient,
}

impl HttpReader {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl Reader for HttpReader {
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>> {
        params.validate()?;
        check_context(&self.client.config.endpoint, prompt, self.client.config.context_chars)?;
        let mut body = json!({
            "model": self.client.config.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": params.n_parallel,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.client.post(&body).map_err(|e| match e {
            ClientError::ContextOverflow { endpoint, .. } => ClientError::ContextOverflow {
                endpoint,
                prompt_len: prompt.chars().count(),
            },
            other => other,
        })?;
        let choices = resp
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| self.client.protocol("response has no choices array"))?;
        by_index(&self.client, choices, params.n_parallel)?
            .into_iter()
            .map(|c| {
                c.pointer("/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| self.client.protocol("choice without message content"))
            })
            .collect()
    }
}

fn check_context(endpoint: &str, prompt: &str, budget: Option<usize>) -> Result<()> {
    if let Some(limit) = budget {
        let len = prompt.chars().count();
        if len > limit {
            return Err(ClientError::ContextOverflow {
                endpoint: endpoint.to_string(),
                prompt_len: len,
            });
        }
    }
    Ok(())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic pseudo-random vector for one token id: coordinate `j` is
/// drawn uniformly from [-1, 1) by hashing `(seed, token, j)`.
pub fn token_vector(seed: u64, token: u32, dims: usize) -> Vec<f32> {
    let base = splitmix64(seed ^ (u64::from(token) << 17));
    (0..dims)
        .map(|j| {
            let bits = splitmix64(base.wrapping_add(j as u64)) >> 40;
            (bits as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

/// Mock embedder: the normalized sum of per-token pseudo-random vectors, so
/// a text's vector depends only on its token multiset.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dims: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dims: usize, seed: u64) -> Self {
        Self { dims, seed }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0.0f32; self.dims];
        let mut tokens = DefaultTokenizer.tokenize(text).tokens;
        // Summation order fixed by sorting, so permutations give equal bits.
        tokens.sort_unstable();
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(token_vector(self.seed, t, self.dims)) {
                *a += v;
            }
        }
        EmbeddingVector(acc).normalized()
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        validate_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Mock reranker: relevance is the number of distinct query tokens that also
/// occur in the document.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapReranker;

impl OverlapReranker {
    pub fn overlap(query: &str, doc: &str) -> usize {
        let q: BTreeSet<u32> = DefaultTokenizer.tokenize(query).tokens.into_iter().collect();
        let d: HashSet<u32> = DefaultTokenizer.tokenize(doc).tokens.into_iter().collect();
        q.iter().filter(|t| d.contains(t)).count()
    }
}

impl Reranker for OverlapReranker {
    fn rerank(&self, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>> {
        validate_rerank_input(docs)?;
        Ok(docs
            .iter()
            .map(|d| RerankScore {
                doc_id: d.id.clone(),
                relevance: Self::overlap(query, &d.text) as f32,
            })
            .collect())
    }
}

/// Per-sample randomness for mocks: a pure function of the prompt, the seed,
/// and the sample index. At temperature 0 every sample shares one stream.
pub fn sample_rng(prompt: &str, params: &SamplingParams, sample: usize) -> ChaCha8Rng {
    let sample = if params.temperature == 0.0 { 0 } else { sample as u64 };
    let seed = xxh3_64_with_seed(prompt.as_bytes(), params.seed.unwrap_or(0)) ^ splitmix64(sample);
    ChaCha8Rng::seed_from_u64(seed)
}

type SampleFn = dyn Fn(&str, usize, &mut ChaCha8Rng) -> String + Send + Sync;

/// Mock reader driven by a closure `(prompt, sample_index, rng) -> completion`.
pub struct FnReader {
    f: Box<SampleFn>,
    context_chars: Option<usize>,
}

impl FnReader {
    pub fn new(f: impl Fn(&str, usize, &mut ChaCha8Rng) -> String + Send + Sync + 'static) -> Self {
        Self {
            f: Box::new(f),
            context_chars: None,
        }
    }

    pub fn with_context_chars(mut self, limit: usize) -> Self {
        self.context_chars = Some(limit);
        self
    }
}

impl Reader for FnReader {
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>> {
        params.validate()?;
        check_context("mock-reader", prompt, self.context_chars)?;
        Ok((0..params.n_parallel)
            .map(|i| (self.f)(prompt, i, &mut sample_rng(prompt, params, i)))
            .collect())
    }
}

/// One rule of [`FactReader`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRule {
    /// Substring identifying which question the prompt asks.
    pub question: String,
    /// Supporting fact; the reader answers correctly only when it is in the prompt.
    pub fact: String,
    pub answer: String,
    pub wrong: String,
}

/// Mock reader that answers correctly iff the supporting fact string occurs
/// in the prompt, and gives the rule's fixed wrong answer otherwise.
#[derive(Debug, Clone, Default)]
pub struct FactReader {
    rules: Vec<FactRule>,
    fallback: String,
}

impl FactReader {
    pub fn new(rules: Vec<FactRule>) -> Self {
        Self {
            rules,
            fallback: "I don't know.".into(),
        }
    }

    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let rules = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}: line {}: {e}", path.display(), i + 1)))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self::new(rules))
    }

    pub fn complete(&self, prompt: &str) -> String {
        match self.rules.iter().find(|r| prompt.contains(&r.question)) {
            Some(rule) if prompt.contains(&rule.fact) => {
                format!("The context states it directly. The answer is ({}).", rule.answer)
            }
            Some(rule) => format!("Best guess without support. The answer is ({}).", rule.wrong),
            None => self.fallback.clone(),
        }
    }
}

impl Reader for FactReader {
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>> {
        params.validate()?;
        Ok(vec![self.complete(prompt); params.n_parallel])
    }
}

/// Wraps a client and counts requests and items (texts embedded, documents
/// reranked, completions generated).
#[derive(Debug, Default)]
pub struct Counted<T> {
    pub inner: T,
    requests: AtomicUsize,
    items: AtomicUsize,
}

impl<T> Counted<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            requests: AtomicUsize::new(0),
            items: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn items(&self) -> usize {
        self.items.load(Ordering::SeqCst)
    }

    fn bump(&self, items: usize) {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.items.fetch_add(items, Ordering::SeqCst);
    }
}

impl<T: Embedder> Embedder for Counted<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.bump(texts.len());
        self.inner.embed(texts)
    }
}

impl<T: Reranker> Reranker for Counted<T> {
    fn rerank(&self, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>> {
        self.bump(docs.len());
        self.inner.rerank(query, docs)
    }
}

impl<T: Reader> Reader for Counted<T> {
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>> {
        self.bump(params.n_parallel);
        self.inner.generate(prompt, params)
    }
}

/// Retries any client's calls under `policy`; lets mocks be exercised through
/// the same retry path as the HTTP clients.
pub struct Retrying<T> {
    pub inner: T,
    pub policy: RetryPolicy,
}

impl<T: Reader> Reader for Retrying<T> {
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>> {
        self.policy.run(|| self.inner.generate(prompt, params))
    }
}

impl<T: Reranker> Reranker for Retrying<T> {
    fn rerank(&self, query: &str, docs: &[Document]) -> Result<Vec<RerankScore>> {
        self.policy.run(|| self.inner.rerank(query, docs))
    }
}

impl<T: Embedder> Embedder for Retrying<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.policy.run(|| self.inner.embed(texts))
    }
}

/// Uniformly random choice from `options`, for scripted mock readers.
pub fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}
