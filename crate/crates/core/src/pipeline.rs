//! Query-time retrieval: embed, search every shard, merge, optionally rerank,
//! select the documents for the prompt, and assemble the prompt.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{rerank_batched, ClientError, Embedder, Reranker};
use crate::corpus::{Document, Tokenizer};
use crate::decontam::{is_contaminated, NGramFilter};
use crate::index::{dot, search_all, IndexError, ScoredDocument, ShardIndex, DEFAULT_TOP_K};

/// Rerank depth when none is configured.
pub const DEFAULT_RERANK_DEPTH: usize = 100;
/// Documents placed in the prompt when none is configured.
pub const DEFAULT_PROMPT_K: usize = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("document {0:?} is not in the document store")]
    MissingDocument(String),
    #[error("prompt needs {needed} chars without any document text; budget is {budget}")]
    Overflow { needed: usize, budget: usize },
    #[error("prompt template {name}: {message}")]
    Template { name: String, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Documents by id, for reranking and prompt text.
#[derive(Debug, Clone, Default)]
pub struct DocStore {
    docs: HashMap<String, Document>,
}

impl DocStore {
    pub fn new(docs: impl IntoIterator<Item = Document>) -> Self {
        Self {
            docs: docs.into_iter().map(|d| (d.id.clone(), d)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }

    pub fn fetch(&self, id: &str) -> Result<&Document> {
        self.get(id).ok_or_else(|| PipelineError::MissingDocument(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_skipped: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truncated: Vec<String>,
}

impl Provenance {
    fn stage(&mut self, name: &str) {
        self.stages.push(name.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub candidates: Vec<ScoredDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranked: Option<Vec<ScoredDocument>>,
    pub selected: Vec<ScoredDocument>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub query_embedding: Option<Vec<f32>>,
}

impl RetrievalResult {
    pub fn empty(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            candidates: Vec::new(),
            reranked: None,
            selected: Vec::new(),
            provenance: Provenance::default(),
            query_embedding: None,
        }
    }

    /// The ordered list later stages draw from: the reranked list when
    /// reranking ran, else the merged candidates.
    pub fn pool(&self) -> &[ScoredDocument] {
        self.reranked.as_deref().unwrap_or(&self.candidates)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")
    }
}

/// Post-retrieval decontamination: candidates colliding with the filter are
/// dropped after the merge.
pub struct Exclusion<'a> {
    pub filter: &'a NGramFilter,
    pub tokenizer: &'a dyn Tokenizer,
}

pub struct Retriever<'a> {
    pub shards: &'a [ShardIndex],
    pub embedder: &'a dyn Embedder,
    pub docs: &'a DocStore,
    pub exclusion: Option<Exclusion<'a>>,
}

impl<'a> Retriever<'a> {
    pub fn new(shards: &'a [ShardIndex], embedder: &'a dyn Embedder, docs: &'a DocStore) -> Self {
        Self {
            shards,
            embedder,
            docs,
            exclusion: None,
        }
    }

    pub fn retrieve(&self, query: &str, k_per_shard: usize, k_merge: usize) -> Result<RetrievalResult> {
        let mut result = RetrievalResult::empty(query);
        result.provenance.stage("retrieve");
        if self.shards.is_empty() || k_merge == 0 {
            return Ok(result);
        }
        let qv = self
            .embedder
            .embed(&[query.to_string()])?
            .pop()
            .ok_or_else(|| PipelineError::Parameter("embedder returned no vector".into()))?;
        let mut candidates = search_all(self.shards, qv.as_slice(), k_per_shard.max(1), k_merge)?;
        if let Some(ex) = &self.exclusion {
            let mut kept = Vec::with_capacity(candidates.len());
            for c in candidates {
                let doc = self.docs.fetch(&c.doc_id)?;
                if is_contaminated(doc, ex.filter, ex.tokenizer).is_some() {
                    result.provenance.excluded.push(c.doc_id);
                } else {
                    kept.push(c);
                }
            }
            candidates = kept;
            result.provenance.stage("exclude");
        }
        result.candidates = candidates;
        result.query_embedding = Some(qv.0);
        Ok(result)
    }

    /// Reorders the first `top_m` pool entries by reranker relevance; ties
    /// keep their previous order. A reranker failure leaves the pool as it
    /// was and is recorded in the provenance.
    pub fn rerank_stage(&self, mut result: RetrievalResult, reranker: &dyn Reranker, top_m: usize) -> Result<RetrievalResult> {
        let head: Vec<ScoredDocument> = result.pool().iter().take(top_m).cloned().collect();
        let docs = head
            .iter()
            .map(|c| self.docs.fetch(&c.doc_id).cloned())
            .collect::<Result<Vec<Document>>>()?;
        match rerank_batched(reranker, &result.query, &docs) {
            Ok(scores) => {
                let mut ranked: Vec<(f32, ScoredDocument)> =
                    scores.into_iter().map(|s| s.relevance).zip(head).collect();
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                result.reranked = Some(ranked.into_iter().map(|(_, d)| d).collect());
                result.provenance.stage("rerank");
            }
            Err(e) => {
                result.provenance.rerank_skipped = Some(e.to_string());
            }
        }
        Ok(result)
    }
}

/// Greedy maximal marginal relevance over the pool:
/// `lambda * sim(query, d) - (1 - lambda) * max_{s in selected} sim(d, s)`,
/// with inner products of the stored embeddings as similarity. Ties go to
/// the earlier pool entry.
pub fn select_mmr(pool: &[ScoredDocument], shards: &[ShardIndex], lambda: f32, k: usize) -> Result<Vec<ScoredDocument>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PipelineError::Parameter(format!("lambda {lambda} outside [0, 1]")));
    }
    let vecs: Vec<&[f32]> = pool
        .iter()
        .map(|d| {
            shards
                .get(d.shard_ordinal as usize)
                .filter(|s| (d.row as usize) < s.len())
                .map(|s| s.vector(d.row as usize))
                .ok_or_else(|| PipelineError::MissingDocument(d.doc_id.clone()))
        })
        .collect::<Result<_>>()?;
    let n = k.min(pool.len());
    let mut taken = vec![false; pool.len()];
    // Running max similarity of each candidate to the selected set.
    let mut redundancy = vec![f32::NEG_INFINITY; pool.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, f32)> = None;
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            let penalty = if out.is_empty() { 0.0 } else { redundancy[i] };
            let score = lambda * pool[i].score - (1.0 - lambda) * penalty;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("n <= pool size");
        taken[pick] = true;
        out.push(pool[pick].clone());
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            redundancy[i] = redundancy[i].max(dot(vecs[i], vecs[pick]));
        }
    }
    Ok(out)
}

/// Seed for one bagging trial.
pub fn trial_seed(seed: u64, trial_index: usize) -> u64 {
    seed ^ (trial_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Uniform sample of `bag_size` pool entries without replacement, reproducible
/// from `(seed, trial_index)`, kept in pool order.
pub fn bag_sample(pool: &[ScoredDocument], bag_size: usize, trial_index: usize, seed: u64) -> Result<Vec<ScoredDocument>> {
    if bag_size > pool.len() {
        return Err(PipelineError::Parameter(format!(
            "bag size {bag_size} exceeds pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, trial_index));
    let mut picks = rand::seq::index::sample(&mut rng, pool.len(), bag_size).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    TopK,
    Mmr,
    Bag,
    /// MMR down to `k`, then a per-trial bag from those.
    MmrBag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub k: usize,
    pub lambda: f32,
    pub bag_size: usize,
    pub seed: u64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            mode: SelectionMode::TopK,
            k: DEFAULT_PROMPT_K,
            lambda: 0.5,
            bag_size: DEFAULT_PROMPT_K / 2,
            seed: 0,
        }
    }
}

impl SelectionPolicy {
    pub fn top_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PipelineError::Parameter(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if matches!(self.mode, SelectionMode::Bag | SelectionMode::MmrBag) && self.bag_size > self.k {
            return Err(PipelineError::Parameter(format!(
                "bag size {} exceeds k {}",
                self.bag_size, self.k
            )));
        }
        Ok(())
    }

    /// Documents for one trial. `trial_index` only matters for bagging.
    pub fn select(&self, pool: &[ScoredDocument], shards: &[ShardIndex], trial_index: usize) -> Result<Vec<ScoredDocument>> {
        self.validate()?;
        let head = &pool[..self.k.min(pool.len())];
        match self.mode {
            SelectionMode::TopK => Ok(head.to_vec()),
            SelectionMode::Mmr => select_mmr(pool, shards, self.lambda, self.k),
            SelectionMode::Bag => bag_sample(head, self.bag_size.min(head.len()), trial_index, self.seed),
            SelectionMode::MmrBag => {
                let diverse = select_mmr(pool, shards, self.lambda, self.k)?;
                bag_sample(&diverse, self.bag_size.min(diverse.len()), trial_index, self.seed)
            }
        }
    }
}

pub const DEFAULT_TEMPLATE: &str = "{documents}Question: {question}\nAnswer:";

/// Prompt text with `{documents}` and `{question}` placeholders. Each document
/// renders as a numbered block; with no documents the placeholder renders
/// empty, which is the no-retrieval prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            name: "default".into(),
            body: DEFAULT_TEMPLATE.into(),
        }
    }
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            body: body.into(),
        };
        for ph in ["{documents}", "{question}"] {
            if t.body.matches(ph).count() != 1 {
                return Err(PipelineError::Template {
                    name: t.name,
                    message: format!("must contain {ph} exactly once"),
                });
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "template".into());
        let body = std::fs::read_to_string(path).map_err(|e| PipelineError::Template {
            name: name.clone(),
            message: e.to_string(),
        })?;
        Self::new(name, body)
    }

    fn render_doc(index: usize, text: &str) -> String {
        format!("[Document {index}]\n{text}\n\n")
    }

    pub fn render(&self, question: &str, doc_texts: &[&str]) -> String {
        let docs: String = doc_texts
            .iter()
            .enumerate()
            .map(|(i, t)| Self::render_doc(i + 1, t))
            .collect();
        // Question first, so document text containing "{question}" is inert.
        let (head, tail) = self.body.split_once("{documents}").expect("validated");
        let mut out = String::with_capacity(self.body.len() + docs.len() + question.len());
        if let Some((a, b)) = head.split_once("{question}") {
            out.push_str(a);
            out.push_str(question);
            out.push_str(b);
            out.push_str(&docs);
            out.push_str(tail);
        } else {
            let (a, b) = tail.split_once("{question}").expect("validated");
            out.push_str(head);
            out.push_str(&docs);
            out.push_str(a);
            out.push_str(question);
            out.push_str(b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    /// Ids of documents cut to fit the budget.
    pub truncated: Vec<String>,
}

fn char_prefix(s: &str, chars: usize) -> &str {
    s.char_indices().nth(chars).map_or(s, |(i, _)| &s[..i])
}

/// Renders the prompt, cutting the longest documents first when the total
/// exceeds `budget_chars`: every document is capped at the largest common
/// length that fits.
pub fn assemble_prompt(
    question: &str,
    docs: &[&Document],
    template: &PromptTemplate,
    budget_chars: Option<usize>,
) -> Result<Prompt> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let full = template.render(question, &texts);
    let Some(budget) = budget_chars else {
        return Ok(Prompt {
            text: full,
            truncated: Vec::new(),
        });
    };
    if full.chars().count() <= budget {
        return Ok(Prompt {
            text: full,
            truncated: Vec::new(),
        });
    }
    let fixed = template.render(question, &vec![""; docs.len()]).chars().count();
    if fixed > budget {
        return Err(PipelineError::Overflow { needed: fixed, budget });
    }
    let avail = budget - fixed;
    let lens: Vec<usize> = texts.iter().map(|t| t.chars().count()).collect();
    let fits = |cap: usize| lens.iter().map(|&l| l.min(cap)).sum::<usize>() <= avail;
    let (mut lo, mut hi) = (0usize, lens.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let cap = lo;
    let cut: Vec<&str> = texts.iter().map(|t| char_prefix(t, cap)).collect();
    let truncated = docs
        .iter()
        .zip(&lens)
        .filter(|(_, &l)| l > cap)
        .map(|(d, _)| d.id.clone())
        .collect();
    Ok(Prompt {
        text: template.render(question, &cut),
        truncated,
    })
}

/// Default candidate depths for [`Retriever::retrieve`].
pub const DEFAULT_K_PER_SHARD: usize = DEFAULT_TOP_K;
pub const DEFAULT_K_MERGE: usize = DEFAULT_TOP_K;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{HashEmbedder, OverlapReranker, RerankScore};
    use crate::corpus::DefaultTokenizer;
    use crate::index::EmbeddingVector;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, "d", text, &DefaultTokenizer)
    }

    fn sd(id: &str, score: f32, row: u32) -> ScoredDocument {
        ScoredDocument {
            doc_id: id.into(),
            dataset: "d".into(),
            score,
            shard_ordinal: 0,
            row,
        }
    }

    #[test]
    fn zero_docs_is_the_baseline_prompt() {
        let t = PromptTemplate::default();
        let p = assemble_prompt("What?", &[], &t, None).unwrap();
        assert_eq!(p.text, "Question: What?\nAnswer:");
        assert_eq!(p.text, t.render("What?", &[]));
    }

    #[test]
    fn documents_precede_question_in_order() {
        let t = PromptTemplate::default();
        let (a, b) = (doc("a", "first text"), doc("b", "second text"));
        let p = assemble_prompt("Q?", &[&a, &b], &t, None).unwrap();
        let (ia, ib, iq) = (
            p.text.find("first text").unwrap(),
            p.text.find("second text").unwrap(),
            p.text.find("Q?").unwrap(),
        );
        assert!(ia < ib && ib < iq);
        assert!(p.text.starts_with("[Document 1]\nfirst text\n\n[Document 2]\n"));
    }

    #[test]
    fn longest_documents_are_cut_first() {
        let t = PromptTemplate::default();
        let long = doc("long", &"x".repeat(100));
        let mid = doc("mid", &"y".repeat(40));
        let short = doc("short", &"z".repeat(10));
        let fixed = t.render("Q", &["", "", ""]).chars().count();
        // Room for 10 + 40 + 50 chars: only the long one is cut, to 50.
        let p = assemble_prompt("Q", &[&long, &mid, &short], &t, Some(fixed + 100)).unwrap();
        assert_eq!(p.truncated, ["long"]);
        assert!(p.text.contains(&format!("{}\n", "x".repeat(50))));
        assert!(!p.text.contains(&"x".repeat(51)));
        assert_eq!(p.text.chars().count(), fixed + 100);
        // Tighter: both long and mid cut to 25.
        let p = assemble_prompt("Q", &[&long, &mid, &short], &t, Some(fixed + 60)).unwrap();
        assert_eq!(p.truncated, ["long", "mid"]);
        assert!(matches!(
            assemble_prompt("Q", &[&long], &t, Some(3)),
            Err(PipelineError::Overflow { .. })
        ));
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new("t", "{question}").is_err());
        assert!(PromptTemplate::new("t", "{documents}{question}{question}").is_err());
        let t = PromptTemplate::new("t", "Q: {question}\n{documents}end").unwrap();
        assert_eq!(t.render("why", &["d"]), "Q: why\n[Document 1]\nd\n\nend");
    }

    #[test]
    fn bag_sampling() {
        let pool: Vec<ScoredDocument> = (0..10).map(|i| sd(&format!("d{i}"), 1.0, i)).collect();
        assert_eq!(bag_sample(&pool, 10, 0, 1).unwrap(), pool);
        let a = bag_sample(&pool, 3, 0, 42).unwrap();
        assert_eq!(a, bag_sample(&pool, 3, 0, 42).unwrap());
        assert!(a.windows(2).all(|w| w[0].row < w[1].row));
        let differs = (1..20).any(|t| bag_sample(&pool, 3, t, 42).unwrap() != a);
        assert!(differs);
        assert!(bag_sample(&pool, 11, 0, 1).is_err());
    }

    fn unit_shard(rows: &[(&str, [f32; 2])]) -> ShardIndex {
        ShardIndex::build(
            2,
            rows.iter().map(|(id, v)| (id.to_string(), EmbeddingVector(v.to_vec()))),
            "d",
            true,
        )
        .unwrap()
    }

    #[test]
    fn mmr_with_lambda_one_is_relevance_order() {
        let s = unit_shard(&[("a", [1.0, 0.0]), ("b", [0.9, 0.1]), ("c", [0.0, 1.0])]);
        let pool = s.search(&[1.0, 0.0], 3, 0).unwrap();
        let sel = select_mmr(&pool, std::slice::from_ref(&s), 1.0, 3).unwrap();
        assert_eq!(sel, pool);
        assert_eq!(select_mmr(&pool, std::slice::from_ref(&s), 0.3, 10).unwrap().len(), 3);
        assert!(select_mmr(&pool, std::slice::from_ref(&s), 1.5, 1).is_err());
    }

    #[test]
    fn rerank_promotes_question_phrase_and_keeps_ties() {
        let docs = DocStore::new([
            doc("a", "unrelated words here"),
            doc("b", "the quick brown fox jumps"),
            doc("c", "more unrelated text"),
        ]);
        let shards: Vec<ShardIndex> = Vec::new();
        let e = HashEmbedder::new(8, 1);
        let r = Retriever::new(&shards, &e, &docs);
        let mut res = RetrievalResult::empty("quick brown fox");
        res.candidates = vec![sd("a", 0.9, 0), sd("b", 0.5, 1), sd("c", 0.4, 2)];
        let out = r.rerank_stage(res.clone(), &OverlapReranker, 3).unwrap();
        let order: Vec<&str> = out.pool().iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(order, ["b", "a", "c"]);
        // Idempotent.
        let again = r.rerank_stage(out.clone(), &OverlapReranker, 3).unwrap();
        assert_eq!(again.pool(), out.pool());
        // top_m = 1 is the identity.
        let one = r.rerank_stage(res.clone(), &OverlapReranker, 1).unwrap();
        assert_eq!(one.pool(), &res.candidates[..1]);

        struct Flat;
        impl Reranker for Flat {
            fn rerank(&self, _: &str, docs: &[Document]) -> crate::clients::Result<Vec<RerankScore>> {
                Ok(docs.iter().map(|d| RerankScore { doc_id: d.id.clone(), relevance: 0.5 }).collect())
            }
        }
        let flat = r.rerank_stage(res.clone(), &Flat, 3).unwrap();
        assert_eq!(flat.pool(), &res.candidates[..]);
    }

    #[test]
    fn reranker_outage_degrades_to_merge_order() {
        struct Down;
        impl Reranker for Down {
            fn rerank(&self, _: &str, _: &[Document]) -> crate::clients::Result<Vec<RerankScore>> {
                Err(ClientError::Transport {
                    endpoint: "http://reranker".into(),
                    message: "connection refused".into(),
                })
            }
        }
        let docs = DocStore::new([doc("a", "x")]);
        let e = HashEmbedder::new(8, 1);
        let r = Retriever::new(&[], &e, &docs);
        let mut res = RetrievalResult::empty("q");
        res.candidates = vec![sd("a", 1.0, 0)];
        let out = r.rerank_stage(res, &Down, 1).unwrap();
        assert!(out.reranked.is_none());
        assert!(out.provenance.rerank_skipped.as_deref().unwrap().contains("http://reranker"));
    }

    #[test]
    fn zero_shards_gives_empty_candidates() {
        let e = HashEmbedder::new(8, 1);
        let docs = DocStore::default();
        let r = Retriever::new(&[], &e, &docs).retrieve("anything", 100, 100).unwrap();
        assert!(r.candidates.is_empty());
    }
}
