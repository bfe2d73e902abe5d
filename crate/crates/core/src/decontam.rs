//! Token n-gram decontamination of corpora against evaluation questions.
//!
//! Every contiguous window of `n` tokens in a test question is hashed into a
//! filter. A corpus document colliding with any single window is dropped
//! whole.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::corpus::{Document, Tokenizer};

/// Window length for multiple-choice test sets.
pub const MULTIPLE_CHOICE_NGRAM: usize = 16;
/// Window length for math test sets.
pub const MATH_NGRAM: usize = 26;

const WINDOW_SEED: u64 = 0x5EED_DEC0_17A1_u64;

#[derive(Debug, Error)]
pub enum DecontamError {
    #[error("n-gram length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("{path}: {message}")]
    TestSet { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, DecontamError>;

/// One evaluation item as stored in a test-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: String,
    #[serde(default)]
    pub subject: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default)]
    pub answer: serde_json::Value,
}

impl TestItem {
    /// The text that feeds the filter: the question, optionally followed by
    /// each answer option.
    pub fn filter_text(&self, include_choices: bool) -> String {
        let mut text = self.question.clone();
        if include_choices {
            for c in self.choices.iter().flatten() {
                text.push('\n');
                text.push_str(c);
            }
        }
        text
    }
}

pub fn load_test_items(path: &Path) -> Result<Vec<TestItem>> {
    let err = |message: String| DecontamError::TestSet {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(format!("line {}: {e}", i + 1))))
        .collect()
}

fn window_hash(window: impl IntoIterator<Item = u32>) -> u64 {
    let mut bytes = Vec::with_capacity(4 * 32);
    for t in window {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    xxh3_64_with_seed(&bytes, WINDOW_SEED)
}

/// Hashes of all length-`n` token windows of a test set.
#[derive(Debug, Clone)]
pub struct NGramFilter {
    n: usize,
    /// Window hash to the indices of the test items containing it.
    grams: HashMap<u64, Vec<u32>>,
    items: usize,
    source: String,
}

impl NGramFilter {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn contains(&self, hash: u64) -> bool {
        self.grams.contains_key(&hash)
    }

    /// Number of test items the filter was built from.
    pub fn items(&self) -> usize {
        self.items
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn hash_window(tokens: &[u32]) -> u64 {
        window_hash(tokens.iter().copied())
    }
}

pub fn build_filter(
    items: &[impl AsRef<str>],
    n: usize,
    tokenizer: &dyn Tokenizer,
    source: impl Into<String>,
) -> Result<NGramFilter> {
    if n < 2 {
        return Err(DecontamError::WindowTooShort(n));
    }
    let mut grams: HashMap<u64, Vec<u32>> = HashMap::new();
    for (idx, item) in items.iter().enumerate() {
        let seq = tokenizer.tokenize(item.as_ref());
        for w in seq.tokens.windows(n) {
            let owners = grams.entry(NGramFilter::hash_window(w)).or_default();
            if owners.last() != Some(&(idx as u32)) {
                owners.push(idx as u32);
            }
        }
    }
    Ok(NGramFilter {
        n,
        grams,
        items: items.len(),
        source: source.into(),
    })
}

/// Slides a window of the filter's length across `tokens`, yielding each
/// window hash with its start offset.
fn rolling_hashes(tokens: &[u32], n: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
    let mut window: VecDeque<u32> = VecDeque::with_capacity(n);
    tokens.iter().enumerate().filter_map(move |(i, &t)| {
        if window.len() == n {
            window.pop_front();
        }
        window.push_back(t);
        (window.len() == n).then(|| (i + 1 - n, window_hash(window.iter().copied())))
    })
}

/// Token offset of the first window of `doc` found in the filter.
pub fn is_contaminated(doc: &Document, filter: &NGramFilter, tokenizer: &dyn Tokenizer) -> Option<usize> {
    let seq = tokenizer.tokenize(&doc.text);
    let first = rolling_hashes(&seq.tokens, filter.n)
        .find(|(_, h)| filter.contains(*h))
        .map(|(offset, _)| offset);
    first
}

/// Test items sharing at least one window with `doc`.
fn colliding_items(doc: &Document, filter: &NGramFilter, tokenizer: &dyn Tokenizer) -> BTreeSet<u32> {
    let seq = tokenizer.tokenize(&doc.text);
    let hits = rolling_hashes(&seq.tokens, filter.n)
        .filter_map(|(_, h)| filter.grams.get(&h))
        .flatten()
        .copied()
        .collect();
    hits
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecontamReport {
    pub source: String,
    pub ngram: usize,
    pub scanned: u64,
    pub dropped: u64,
    pub dropped_ids: Vec<String>,
    pub contaminated_questions: u64,
    pub test_items: u64,
    pub contaminated_fraction: f64,
}

/// Accumulates a report over one or more partitions of a corpus.
#[derive(Debug, Clone, Default)]
pub struct ReportBuilder {
    scanned: u64,
    dropped_ids: Vec<String>,
    hit_items: BTreeSet<u32>,
}

impl ReportBuilder {
    fn observe(&mut self, doc: &Document, hits: BTreeSet<u32>) -> bool {
        self.scanned += 1;
        let contaminated = !hits.is_empty();
        if contaminated {
            self.dropped_ids.push(doc.id.clone());
            self.hit_items.extend(hits);
        }
        contaminated
    }

    /// Concatenates `other` after `self`; partitions must be merged in input
    /// order to keep `dropped_ids` ordered.
    pub fn merge(mut self, other: ReportBuilder) -> Self {
        self.scanned += other.scanned;
        self.dropped_ids.extend(other.dropped_ids);
        self.hit_items.extend(other.hit_items);
        self
    }

    pub fn finish(self, filter: &NGramFilter) -> DecontamReport {
        let contaminated = self.hit_items.len() as u64;
        DecontamReport {
            source: filter.source.clone(),
            ngram: filter.n,
            scanned: self.scanned,
            dropped: self.dropped_ids.len() as u64,
            dropped_ids: self.dropped_ids,
            contaminated_questions: contaminated,
            test_items: filter.items as u64,
            contaminated_fraction: if filter.items == 0 {
                0.0
            } else {
                contaminated as f64 / filter.items as f64
            },
        }
    }
}

/// Streaming filter: yields the documents that survive, in input order.
/// Call [`Decontaminator::report`] once the stream is drained.
pub struct Decontaminator<'a, I> {
    docs: I,
    filter: &'a NGramFilter,
    tokenizer: &'a dyn Tokenizer,
    acc: ReportBuilder,
}

impl<'a, I> Decontaminator<'a, I> {
    pub fn report(self) -> DecontamReport {
        self.acc.finish(self.filter)
    }
}

impl<I: Iterator<Item = Document>> Iterator for Decontaminator<'_, I> {
    type Item = Document;

    fn next(&mut self) -> Option<Document> {
        loop {
            let doc = self.docs.next()?;
            let hits = colliding_items(&doc, self.filter, self.tokenizer);
            if !self.acc.observe(&doc, hits) {
                return Some(doc);
            }
        }
    }
}

pub fn decontaminate<'a, I: IntoIterator<Item = Document>>(
    docs: I,
    filter: &'a NGramFilter,
    tokenizer: &'a dyn Tokenizer,
) -> Decontaminator<'a, I::IntoIter> {
    Decontaminator {
        docs: docs.into_iter(),
        filter,
        tokenizer,
        acc: ReportBuilder::default(),
    }
}

/// Parallel variant over an in-memory slice: partitions are scanned
/// independently and their reports merged in order.
pub fn decontaminate_par(
    docs: Vec<Document>,
    filter: &NGramFilter,
    tokenizer: &dyn Tokenizer,
) -> (Vec<Document>, DecontamReport) {
    let chunk = docs.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let parts: Vec<(Vec<Document>, ReportBuilder)> = docs
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = ReportBuilder::default();
            let kept = part
                .iter()
                .filter(|d| !acc.observe(d, colliding_items(d, filter, tokenizer)))
                .cloned()
                .collect();
            (kept, acc)
        })
        .collect();
    let mut kept = Vec::new();
    let mut acc = ReportBuilder::default();
    for (part_kept, part_acc) in parts {
        kept.extend(part_kept);
        acc = acc.merge(part_acc);
    }
    (kept, acc.finish(filter))
}

/// How many test items have at least one colliding corpus document.
pub fn contamination_report<I: IntoIterator<Item = Document>>(
    test_items: &[impl AsRef<str>],
    corpus: I,
    n: usize,
    tokenizer: &dyn Tokenizer,
    source: &str,
) -> Result<DecontamReport> {
    let filter = build_filter(test_items, n, tokenizer, source)?;
    let mut stream = decontaminate(corpus, &filter, tokenizer);
    for _ in stream.by_ref() {}
    Ok(stream.report())
}
