//! Streaming corpus ingestion, tokenization, and token accounting.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: record exceeds the {limit}-byte line buffer")]
    LineTooLong { line: usize, limit: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

pub const DEFAULT_DATASET: &str = "default";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub dataset: String,
    pub text: String,
    /// Token count under the tokenizer active at ingest.
    #[serde(default)]
    pub token_count: usize,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        dataset: impl Into<String>,
        text: impl Into<String>,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let text = text.into();
        let token_count = tokenizer.tokenize(&text).len();
        Self {
            id: id.into(),
            dataset: dataset.into(),
            text,
            token_count,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    /// Byte span of each token in the source text.
    #[serde(skip)]
    pub spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub trait Tokenizer: Send + Sync {
    /// Stable identifier; token ids are only comparable under one id.
    fn id(&self) -> &str;
    fn tokenize(&self, text: &str) -> TokenSequence;
}

/// Case-insensitive word/punctuation splitter. Letter runs form one token,
/// every digit is its own token, every other non-space character is a token
/// of its own. Ids are a fixed hash of the lowercased surface form, so they
/// are stable across processes without a vocabulary file.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

impl DefaultTokenizer {
    pub const ID: &'static str = "dsrag-words-v1";

    fn token_id(surface: &str) -> u32 {
        let lower = surface.to_lowercase();
        let h = xxh3_64(lower.as_bytes());
        (h ^ (h >> 32)) as u32
    }
}

impl Tokenizer for DefaultTokenizer {
    fn id(&self) -> &str {
        Self::ID
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        let mut word_start: Option<usize> = None;
        let push = |seq: &mut TokenSequence, start: usize, end: usize| {
            seq.tokens.push(Self::token_id(&text[start..end]));
            seq.spans.push((start, end));
        };
        for (i, ch) in text.char_indices() {
            if ch.is_alphabetic() || ch == '_' {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(start) = word_start.take() {
                push(&mut seq, start, i);
            }
            if !ch.is_whitespace() {
                push(&mut seq, i, i + ch.len_utf8());
            }
        }
        if let Some(start) = word_start {
            push(&mut seq, start, text.len());
        }
        seq
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    dataset: Option<String>,
    text: Option<String>,
}

/// Default cap on a single JSONL record.
pub const DEFAULT_MAX_LINE_BYTES: usize = 64 << 20;

/// Streaming reader over a line-delimited JSON corpus. Holds one line at a
/// time; the only state that grows with the corpus is the set of seen ids.
pub struct CorpusReader<'t, R> {
    reader: R,
    tokenizer: &'t dyn Tokenizer,
    line_no: usize,
    buf: Vec<u8>,
    max_line_bytes: usize,
    seen: HashSet<String>,
    done: bool,
}

impl<'t> CorpusReader<'t, BufReader<File>> {
    pub fn open(path: &Path, tokenizer: &'t dyn Tokenizer) -> Result<Self> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(BufReader::new(file), tokenizer))
    }
}

impl<'t, R: BufRead> CorpusReader<'t, R> {
    pub fn new(reader: R, tokenizer: &'t dyn Tokenizer) -> Self {
        Self {
            reader,
            tokenizer,
            line_no: 0,
            buf: Vec::new(),
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
            seen: HashSet::new(),
            done: false,
        }
    }

    pub fn with_max_line_bytes(mut self, limit: usize) -> Self {
        self.max_line_bytes = limit;
        self
    }

    /// Capacity of the internal line buffer.
    pub fn buffer_capacity(&self) -> usize {
        self.buf.capacity()
    }

    fn read_line(&mut self) -> Result<bool> {
        self.buf.clear();
        let limit = self.max_line_bytes as u64 + 1;
        let n = (&mut self.reader)
            .take(limit)
            .read_until(b'\n', &mut self.buf)
            .map_err(|source| CorpusError::Io {
                path: PathBuf::from("<corpus>"),
                source,
            })?;
        if n == 0 {
            return Ok(false);
        }
        self.line_no += 1;
        if self.buf.last() == Some(&b'\n') {
            self.buf.pop();
        } else if n as u64 == limit {
            return Err(CorpusError::LineTooLong {
                line: self.line_no,
                limit: self.max_line_bytes,
            });
        }
        if self.buf.len() > self.max_line_bytes {
            return Err(CorpusError::LineTooLong {
                line: self.line_no,
                limit: self.max_line_bytes,
            });
        }
        Ok(true)
    }

    fn parse_line(&mut self) -> Result<Document> {
        let line = self.line_no;
        let malformed = |message: String| CorpusError::Malformed { line, message };
        let raw: RawRecord =
            serde_json::from_slice(&self.buf).map_err(|e| malformed(e.to_string()))?;
        let id = raw
            .id
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed("missing or empty \"id\"".into()))?;
        let text = raw
            .text
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed("missing or empty \"text\"".into()))?;
        if !self.seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line, id });
        }
        let dataset = raw.dataset.unwrap_or_else(|| DEFAULT_DATASET.to_string());
        Ok(Document::new(id, dataset, text, self.tokenizer))
    }
}

impl<R: BufRead> Iterator for CorpusReader<'_, R> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.read_line() {
                Ok(false) => {
                    self.done = true;
                    return None;
                }
                Ok(true) if self.buf.iter().all(u8::is_ascii_whitespace) => continue,
                Ok(true) => {
                    let doc = self.parse_line();
                    if doc.is_err() {
                        self.done = true;
                    }
                    return Some(doc);
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

pub fn ingest<'t>(path: &Path, tokenizer: &'t dyn Tokenizer) -> Result<CorpusReader<'t, BufReader<File>>> {
    CorpusReader::open(path, tokenizer)
}

/// Reads a whole corpus file into memory.
pub fn read_all(path: &Path, tokenizer: &dyn Tokenizer) -> Result<Vec<Document>> {
    ingest(path, tokenizer)?.collect()
}

pub fn write_jsonl<'a, W: std::io::Write>(
    mut out: W,
    docs: impl IntoIterator<Item = &'a Document>,
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        dataset: &'a str,
        text: &'a str,
    }
    for d in docs {
        serde_json::to_writer(
            &mut out,
            &Line {
                id: &d.id,
                dataset: &d.dataset,
                text: &d.text,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub documents: u64,
    pub tokens: u64,
}

impl Add for DatasetStats {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            documents: self.documents + rhs.documents,
            tokens: self.tokens + rhs.tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub tokens: u64,
    pub per_dataset: BTreeMap<String, DatasetStats>,
}

impl CorpusStats {
    pub fn record(&mut self, doc: &Document) {
        let tokens = doc.token_count as u64;
        self.documents += 1;
        self.tokens += tokens;
        *self.per_dataset.entry(doc.dataset.clone()).or_default() =
            self.per_dataset.get(&doc.dataset).copied().unwrap_or_default()
                + DatasetStats {
                    documents: 1,
                    tokens,
                };
    }
}

impl AddAssign<&CorpusStats> for CorpusStats {
    fn add_assign(&mut self, rhs: &CorpusStats) {
        self.documents += rhs.documents;
        self.tokens += rhs.tokens;
        for (name, s) in &rhs.per_dataset {
            let e = self.per_dataset.entry(name.clone()).or_default();
            *e = *e + *s;
        }
    }
}

impl Add for CorpusStats {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += &rhs;
        self
    }
}

pub fn corpus_stats<'a>(docs: impl IntoIterator<Item = &'a Document>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for d in docs {
        stats.record(d);
    }
    stats
}

/// Single-pass stats over a fallible document stream, stopping at the first
/// error.
pub fn corpus_stats_stream(docs: impl IntoIterator<Item = Result<Document>>) -> Result<CorpusStats> {
    let mut stats = CorpusStats::default();
    for d in docs {
        stats.record(&d?);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn read(src: &str) -> Vec<Result<Document>> {
        CorpusReader::new(Cursor::new(src.to_string()), &DefaultTokenizer).collect()
    }

    #[test]
    fn three_records_in_order() {
        let src = r#"{"id":"a","dataset":"wiki","text":"one"}
{"id":"b","dataset":"wiki","text":"two words"}
{"id":"c","dataset":"arxiv","text":"x 12"}
"#;
        let docs: Vec<Document> = read(src).into_iter().map(|d| d.unwrap()).collect();
        let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(docs[2].token_count, 3);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert!(read("").is_empty());
        assert!(read("\n\n").is_empty());
    }

    #[test]
    fn missing_text_names_the_line() {
        let src = "{\"id\":\"a\",\"text\":\"fine\"}\n{\"id\":\"b\",\"dataset\":\"x\"}\n";
        let out = read(src);
        assert!(out[0].is_ok());
        match &out[1] {
            Err(CorpusError::Malformed { line, message }) => {
                assert_eq!(*line, 2);
                assert!(message.contains("text"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn invalid_json_names_the_line() {
        let out = read("{\"id\":\"a\",\"text\":\"t\"}\nnot json\n");
        assert!(matches!(out[1], Err(CorpusError::Malformed { line: 2, .. })));
    }

    #[test]
    fn duplicate_id_is_named() {
        let src = "{\"id\":\"a\",\"text\":\"t\"}\n{\"id\":\"a\",\"text\":\"u\"}\n";
        match &read(src)[1] {
            Err(CorpusError::DuplicateId { id, line }) => {
                assert_eq!(id, "a");
                assert_eq!(*line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_dataset_gets_default_label() {
        let doc = read("{\"id\":\"a\",\"text\":\"t\"}").remove(0).unwrap();
        assert_eq!(doc.dataset, DEFAULT_DATASET);
    }

    #[test]
    fn oversized_line_is_rejected() {
        let src = format!("{{\"id\":\"a\",\"text\":\"{}\"}}\n", "x".repeat(100));
        let out: Vec<_> = CorpusReader::new(Cursor::new(src), &DefaultTokenizer)
            .with_max_line_bytes(50)
            .collect();
        assert!(matches!(out[0], Err(CorpusError::LineTooLong { line: 1, limit: 50 })));
    }

    #[test]
    fn tokenizer_basics() {
        let t = DefaultTokenizer;
        assert!(t.tokenize("").is_empty());
        let year = t.tokenize("2024");
        assert_eq!(year.len(), 4);
        assert_eq!(year.tokens[0], year.tokens[2]);
        assert_eq!(year.spans, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        let s = "The mitochondria, in 1890, was named.";
        assert_eq!(t.tokenize(s), t.tokenize(s));
        assert_eq!(t.tokenize("Hello WORLD").tokens, t.tokenize("hello world").tokens);
        // the , mitochondria ... : words + punctuation + digits
        assert_eq!(t.tokenize(s).len(), 1 + 1 + 1 + 1 + 4 + 1 + 1 + 1 + 1);
    }

    #[test]
    fn stats_sum() {
        let t = DefaultTokenizer;
        let a = Document::new("a", "d", "one two three four five", &t);
        let b = Document::new("b", "d", "1 2 3 4 5 6 7", &t);
        let s = corpus_stats([&a, &b]);
        assert_eq!((s.documents, s.tokens), (2, 12));
        assert_eq!(s.per_dataset["d"], DatasetStats { documents: 2, tokens: 12 });
        assert_eq!(corpus_stats(std::iter::empty()), CorpusStats::default());
    }
}
