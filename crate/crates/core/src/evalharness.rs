//! Benchmark evaluation: task loading, scoring, strategy runs with
//! checkpointing, and per-subject aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::clients::{ClientError, Reader, Reranker, SamplingParams};
use crate::consistency::{
    interdoc_consistency, majority_vote, normalize_math, normalize_text, sample_trials, usc_select, ConsistencyError,
    TaskKind, TrialRecord,
};
use crate::corpus::Document;
use crate::index::ScoredDocument;
use crate::pipeline::{
    assemble_prompt, PipelineError, PromptTemplate, RetrievalResult, Retriever, SelectionMode, SelectionPolicy,
    DEFAULT_K_MERGE, DEFAULT_K_PER_SHARD, DEFAULT_RERANK_DEPTH,
};

const SUBJECT_CATEGORIES: &str = include_str!("../data/mmlu_subject_categories.json");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("task {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("task {id}: {source}")]
    Task {
        id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Letter for the `i`-th option.
pub fn choice_letter(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    pub subject: String,
    pub kind: TaskKind,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    /// Canonical gold answer.
    #[serde(rename = "answer")]
    pub gold: String,
}

#[derive(Deserialize)]
struct RawTask {
    id: String,
    #[serde(default)]
    subject: String,
    #[serde(default)]
    kind: Option<TaskKind>,
    question: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    answer: serde_json::Value,
}

impl EvalTask {
    fn from_raw(raw: RawTask, default_kind: Option<TaskKind>) -> Result<Self> {
        let invalid = |message: String| EvalError::Invalid {
            id: raw.id.clone(),
            message,
        };
        if raw.subject.trim().is_empty() {
            return Err(invalid("missing subject".into()));
        }
        let kind = raw
            .kind
            .or(default_kind)
            .or_else(|| raw.choices.as_ref().map(|_| TaskKind::MultipleChoice))
            .ok_or_else(|| invalid("no kind given and none can be inferred".into()))?;
        let gold_text = match &raw.answer {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Null => return Err(invalid("missing answer".into())),
            other => return Err(invalid(format!("unsupported answer {other}"))),
        };
        let gold = match kind {
            TaskKind::MultipleChoice => {
                let n = raw.choices.as_ref().map_or(0, Vec::len);
                if !(2..=10).contains(&n) {
                    return Err(invalid(format!("multiple choice needs 2 to 10 choices, got {n}")));
                }
                // Integer answers index the choices.
                let letter = match &raw.answer {
                    serde_json::Value::Number(i) => i
                        .as_u64()
                        .filter(|&i| (i as usize) < n)
                        .map(|i| choice_letter(i as usize))
                        .ok_or_else(|| invalid(format!("answer index {i} outside {n} choices")))?,
                    _ => gold_text.trim().trim_matches(['(', ')']).to_uppercase(),
                };
                if !(0..n).any(|i| choice_letter(i) == letter) {
                    return Err(invalid(format!("gold {letter:?} is not one of {n} choice letters")));
                }
                letter
            }
            TaskKind::Math => normalize_math(&gold_text),
            TaskKind::ExactMatch => normalize_text(&gold_text),
        };
        if gold.is_empty() {
            return Err(invalid("empty answer".into()));
        }
        Ok(Self {
            id: raw.id,
            subject: raw.subject,
            kind,
            question: raw.question,
            choices: raw.choices,
            gold,
        })
    }

    /// Question text as shown to the reader: options and the answer-format
    /// instruction for the task kind.
    pub fn prompt_question(&self) -> String {
        let mut q = self.question.trim().to_string();
        match self.kind {
            TaskKind::MultipleChoice => {
                for (i, c) in self.choices.iter().flatten().enumerate() {
                    q.push_str(&format!("\n({}) {}", choice_letter(i), c));
                }
                q.push_str("\n\nFinish your response with \"The answer is (X)\" where X is the option letter.");
            }
            TaskKind::Math => q.push_str("\n\nPut the final answer in \\boxed{}."),
            TaskKind::ExactMatch => q.push_str("\n\nFinish your response with \"The answer is ...\"."),
        }
        q
    }
}

/// Reads tasks from JSON lines in file order. `default_kind` applies to
/// lines without a `kind` field.
pub fn load_tasks(path: &Path, default_kind: Option<TaskKind>) -> Result<Vec<EvalTask>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTask = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let task = EvalTask::from_raw(raw, default_kind)?;
        if !seen.insert(task.id.clone()) {
            return Err(EvalError::DuplicateId(task.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[EvalTask]) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    for t in tasks {
        let line = serde_json::to_string(t).expect("tasks serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Exact match after the task kind's normalization; abstentions are wrong.
pub fn score(predicted: Option<&str>, task: &EvalTask) -> bool {
    let Some(p) = predicted else { return false };
    match task.kind {
        TaskKind::MultipleChoice => p.trim().trim_matches(['(', ')']).eq_ignore_ascii_case(&task.gold),
        TaskKind::Math => normalize_math(p) == task.gold,
        TaskKind::ExactMatch => normalize_text(p) == task.gold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "sc")]
    SelfConsistency,
    #[serde(rename = "retrieval")]
    Retrieval,
    #[serde(rename = "retrieval+rerank")]
    RetrievalRerank,
    #[serde(rename = "retrieval+rerank+sc")]
    RetrievalRerankSc,
    #[serde(rename = "retrieval+rerank+sc+vr")]
    RetrievalRerankScVr,
    #[serde(rename = "interdoc")]
    Interdoc,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Baseline,
        Strategy::SelfConsistency,
        Strategy::Retrieval,
        Strategy::RetrievalRerank,
        Strategy::RetrievalRerankSc,
        Strategy::RetrievalRerankScVr,
        Strategy::Interdoc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::SelfConsistency => "sc",
            Strategy::Retrieval => "retrieval",
            Strategy::RetrievalRerank => "retrieval+rerank",
            Strategy::RetrievalRerankSc => "retrieval+rerank+sc",
            Strategy::RetrievalRerankScVr => "retrieval+rerank+sc+vr",
            Strategy::Interdoc => "interdoc",
        }
    }

    pub fn retrieves(self) -> bool {
        !matches!(self, Strategy::Baseline | Strategy::SelfConsistency)
    }

    pub fn reranks(self) -> bool {
        matches!(
            self,
            Strategy::RetrievalRerank | Strategy::RetrievalRerankSc | Strategy::RetrievalRerankScVr
        )
    }

    pub fn samples(self) -> bool {
        matches!(
            self,
            Strategy::SelfConsistency | Strategy::RetrievalRerankSc | Strategy::RetrievalRerankScVr
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| EvalError::Parameter(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub n_trials: usize,
    pub n_per_doc: usize,
    /// Judge-based selection for open-ended answers instead of a plain vote.
    pub judge: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub k_per_shard: usize,
    pub k_merge: usize,
    pub rerank_depth: usize,
    pub selection: SelectionPolicy,
    pub context_chars: Option<usize>,
    pub template: PromptTemplate,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Baseline,
            n_trials: 16,
            n_per_doc: 4,
            judge: false,
            temperature: 0.7,
            max_tokens: 1024,
            seed: 0,
            k_per_shard: DEFAULT_K_PER_SHARD,
            k_merge: DEFAULT_K_MERGE,
            rerank_depth: DEFAULT_RERANK_DEPTH,
            selection: SelectionPolicy::default(),
            context_chars: None,
            template: PromptTemplate::default(),
        }
    }
}

impl StrategyConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form; ties checkpoints to a config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.n_per_doc == 0 {
            return Err(EvalError::Parameter("n_trials and n_per_doc must be at least 1".into()));
        }
        self.selection.validate()?;
        Ok(())
    }

    fn task_seed(&self, task: &EvalTask) -> u64 {
        xxh3_64_with_seed(task.id.as_bytes(), self.seed)
    }

    fn params(&self, seed: u64, n: usize, sampled: bool) -> SamplingParams {
        SamplingParams {
            temperature: if sampled { self.temperature } else { 0.0 },
            max_tokens: self.max_tokens,
            seed: Some(seed),
            n_parallel: n,
        }
    }
}

/// Clients a run may call. Strategies that retrieve need `retriever`;
/// reranking strategies without `reranker` record the stage as skipped.
pub struct Services<'a> {
    pub reader: &'a dyn Reader,
    pub judge: Option<&'a dyn Reader>,
    pub retriever: Option<Retriever<'a>>,
    pub reranker: Option<&'a dyn Reranker>,
}

impl<'a> Services<'a> {
    pub fn reader_only(reader: &'a dyn Reader) -> Self {
        Self {
            reader,
            judge: None,
            retriever: None,
            reranker: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: String,
    pub subject: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub stages: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Everything behind one verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    pub strategy: Strategy,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalResult>,
    pub trials: Vec<TrialRecord>,
    pub aggregation: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointLine {
    fingerprint: String,
    result: TaskResult,
    audit: AuditRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub config_fingerprint: String,
    pub tasks: usize,
    pub abstentions: usize,
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
    pub per_subject: BTreeMap<String, SubjectScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_rollup: Option<BTreeMap<String, f64>>,
    pub per_task: BTreeMap<String, TaskResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn write_subject_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row_err = |e: csv::Error| EvalError::Parameter(e.to_string());
        w.write_record(["subject", "correct", "total", "accuracy"]).map_err(row_err)?;
        for (s, sc) in &self.per_subject {
            w.write_record([s.clone(), sc.correct.to_string(), sc.total.to_string(), format!("{:.6}", sc.accuracy)])
                .map_err(row_err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Parameter(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Unweighted mean over subjects.
pub fn macro_average(per_subject: &BTreeMap<String, f64>) -> Result<f64> {
    if per_subject.is_empty() {
        return Err(EvalError::Parameter("macro average over zero subjects".into()));
    }
    Ok(per_subject.values().sum::<f64>() / per_subject.len() as f64)
}

/// The shipped MMLU subject to category-group table.
pub fn mmlu_subject_categories() -> BTreeMap<String, String> {
    serde_json::from_str(SUBJECT_CATEGORIES).expect("shipped table parses")
}

/// Macro accuracy per category group over the subjects the table maps.
pub fn category_rollup(
    per_subject: &BTreeMap<String, SubjectScore>,
    groups: &BTreeMap<String, String>,
) -> Option<BTreeMap<String, f64>> {
    let mut by_group: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (s, sc) in per_subject {
        if let Some(g) = groups.get(s) {
            by_group.entry(g.clone()).or_default().insert(s.clone(), sc.accuracy);
        }
    }
    if by_group.is_empty() {
        return None;
    }
    Some(
        by_group
            .into_iter()
            .map(|(g, m)| (g, macro_average(&m).expect("non-empty")))
            .collect(),
    )
}

/// Aggregates verdicts into a report.
pub fn build_report(config: &StrategyConfig, results: impl IntoIterator<Item = TaskResult>) -> Result<EvalReport> {
    let per_task: BTreeMap<String, TaskResult> = results.into_iter().map(|r| (r.id.clone(), r)).collect();
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in per_task.values() {
        let e = counts.entry(r.subject.clone()).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    let per_subject: BTreeMap<String, SubjectScore> = counts
        .into_iter()
        .map(|(s, (correct, total))| {
            (
                s,
                SubjectScore {
                    correct,
                    total,
                    accuracy: correct as f64 / total as f64,
                },
            )
        })
        .collect();
    let accuracies = per_subject.iter().map(|(s, sc)| (s.clone(), sc.accuracy)).collect();
    let correct = per_task.values().filter(|r| r.correct).count();
    Ok(EvalReport {
        strategy: config.strategy,
        config_fingerprint: config.fingerprint(),
        tasks: per_task.len(),
        abstentions: per_task.values().filter(|r| r.predicted.is_none()).count(),
        macro_accuracy: macro_average(&accuracies)?,
        micro_accuracy: correct as f64 / per_task.len() as f64,
        category_rollup: category_rollup(&per_subject, &mmlu_subject_categories()),
        per_subject,
        per_task,
    })
}

pub struct EvalRun {
    pub report: EvalReport,
    /// Sorted by task id.
    pub audit: Vec<AuditRecord>,
    /// Tasks answered in this run rather than restored from the checkpoint.
    pub executed: usize,
}

impl EvalRun {
    pub fn write_audit(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for a in &self.audit {
            serde_json::to_writer(&mut buf, a).expect("audit serializes");
            buf.push(b'\n');
        }
        write_atomic(path, &buf)
    }
}

fn read_checkpoint(path: &Path, fingerprint: &str) -> Result<HashMap<String, CheckpointLine>> {
    let mut done = HashMap::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = text.rfind('\n').map_or("", |i| &text[..i]);
    for (i, line) in complete.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: CheckpointLine = serde_json::from_str(line).map_err(|e| EvalError::Checkpoint {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if entry.fingerprint != fingerprint {
            return Err(EvalError::Checkpoint {
                path: path.display().to_string(),
                message: format!("line {} was written under a different configuration", i + 1),
            });
        }
        done.insert(entry.result.id.clone(), entry);
    }
    Ok(done)
}

/// Runs `config.strategy` over `tasks` on `workers` threads. With a
/// checkpoint path, tasks already recorded there are restored without any
/// client calls and each newly finished task is appended and flushed.
pub fn run_eval(
    tasks: &[EvalTask],
    config: &StrategyConfig,
    services: &Services<'_>,
    checkpoint: Option<&Path>,
    workers: usize,
) -> Result<EvalRun> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(EvalError::Parameter("no tasks".into()));
    }
    if config.strategy.retrieves() && services.retriever.is_none() {
        return Err(EvalError::Parameter(format!("strategy {} needs a retriever", config.strategy)));
    }
    let fingerprint = config.fingerprint();
    let mut restored = match checkpoint {
        Some(p) => read_checkpoint(p, &fingerprint)?,
        None => HashMap::new(),
    };
    let sink = match checkpoint {
        Some(p) => Some(Mutex::new(
            OpenOptions::new().create(true).append(true).open(p).map_err(io_err(p))?,
        )),
        None => None,
    };
    let pending: Vec<&EvalTask> = tasks.iter().filter(|t| !restored.contains_key(&t.id)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Parameter(e.to_string()))?;
    let outcomes: Vec<Result<CheckpointLine>> = pool.install(|| {
        pending
            .par_iter()
            .map(|task| {
                let (result, audit) = run_task(task, config, services).map_err(|e| EvalError::Task {
                    id: task.id.clone(),
                    source: Box::new(e),
                })?;
                let line = CheckpointLine {
                    fingerprint: fingerprint.clone(),
                    result,
                    audit,
                };
                if let (Some(sink), Some(path)) = (&sink, checkpoint) {
                    let mut bytes = serde_json::to_vec(&line).expect("checkpoint serializes");
                    bytes.push(b'\n');
                    let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
                    f.write_all(&bytes).and_then(|_| f.flush()).map_err(io_err(path))?;
                }
                Ok(line)
            })
            .collect()
    });
    let executed = outcomes.iter().filter(|o| o.is_ok()).count();
    for o in outcomes {
        let line = o?;
        restored.insert(line.result.id.clone(), line);
    }
    let mut lines: Vec<CheckpointLine> = tasks
        .iter()
        .filter_map(|t| restored.remove(&t.id))
        .collect();
    lines.sort_by(|a, b| a.result.id.cmp(&b.result.id));
    let report = build_report(config, lines.iter().map(|l| l.result.clone()))?;
    Ok(EvalRun {
        report,
        audit: lines.into_iter().map(|l| l.audit).collect(),
        executed,
    })
}

fn doc_texts<'d>(retriever: &'d Retriever<'_>, selected: &[ScoredDocument]) -> Result<Vec<&'d Document>> {
    selected
        .iter()
        .map(|s| retriever.docs.fetch(&s.doc_id).map_err(EvalError::from))
        .collect()
}

/// One task under the configured strategy.
pub fn run_task(task: &EvalTask, config: &StrategyConfig, services: &Services<'_>) -> Result<(TaskResult, AuditRecord)> {
    let strategy = config.strategy;
    let question = task.prompt_question();
    let seed = config.task_seed(task);
    let mut stages = Vec::new();
    let mut notes = Vec::new();
    let mut truncated: Vec<String> = Vec::new();

    let mut retrieval = None;
    if strategy.retrieves() {
        let retriever = services.retriever.as_ref().expect("checked in run_eval");
        let mut r = retriever.retrieve(&task.question, config.k_per_shard, config.k_merge)?;
        if strategy.reranks() || (strategy == Strategy::Interdoc && services.reranker.is_some()) {
            match services.reranker {
                Some(rr) => r = retriever.rerank_stage(r, rr, config.rerank_depth)?,
                None => r.provenance.rerank_skipped = Some("no reranker configured".into()),
            }
        }
        stages.extend(r.provenance.stages.iter().cloned());
        if let Some(why) = &r.provenance.rerank_skipped {
            notes.push(format!("rerank skipped: {why}"));
        }
        retrieval = Some(r);
    }

    let mut sampled = strategy.samples();
    if sampled && !task.kind.supports_voting() && !config.judge {
        sampled = false;
        notes.push("self-consistency n/a for exact-match tasks".into());
    }

    let mut trials = Vec::new();
    let (predicted, aggregation) = if strategy == Strategy::Interdoc {
        let retriever = services.retriever.as_ref().expect("checked in run_eval");
        let r = retrieval.as_mut().expect("retrieved");
        let top: Vec<ScoredDocument> = r.pool().iter().take(config.selection.k).cloned().collect();
        r.selected = top.clone();
        if top.is_empty() {
            notes.push("no documents retrieved; answered without context".into());
            let prompt = assemble_prompt(&question, &[], &config.template, config.context_chars)?;
            trials = sample_trials(services.reader, &prompt.text, &config.params(seed, 1, false), task.kind, &[], 0)?;
            (trials[0].answer.clone(), serde_json::json!({"method": "single"}))
        } else {
            let docs = doc_texts(retriever, &top)?;
            let pairs: Vec<(&Document, f32)> = docs.iter().copied().zip(top.iter().map(|s| s.score)).collect();
            let out = interdoc_consistency(
                &question,
                &pairs,
                config.n_per_doc,
                services.reader,
                &config.params(seed, config.n_per_doc, true),
                &config.template,
                config.context_chars,
                task.kind,
            )?;
            stages.push("interdoc".into());
            for (d, e) in &out.failed {
                notes.push(format!("document {d} excluded: {e}"));
            }
            trials = out.trials;
            (
                out.answer,
                serde_json::json!({"method": "interdoc", "ranked": out.ranked}),
            )
        }
    } else if strategy == Strategy::RetrievalRerankScVr && sampled {
        let retriever = services.retriever.as_ref().expect("checked in run_eval");
        let r = retrieval.as_mut().expect("retrieved");
        let policy = SelectionPolicy {
            mode: SelectionMode::MmrBag,
            seed,
            ..config.selection
        };
        let shards = retriever.shards;
        let mut union: Vec<ScoredDocument> = Vec::new();
        for t in 0..config.n_trials {
            let bag = policy.select(r.pool(), shards, t)?;
            let docs = doc_texts(retriever, &bag)?;
            let prompt = assemble_prompt(&question, &docs, &config.template, config.context_chars)?;
            truncated.extend(prompt.truncated);
            let ids: Vec<String> = bag.iter().map(|d| d.doc_id.clone()).collect();
            let params = config.params(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), 1, true);
            trials.extend(sample_trials(services.reader, &prompt.text, &params, task.kind, &ids, t)?);
            for d in bag {
                if !union.iter().any(|u| u.doc_id == d.doc_id) {
                    union.push(d);
                }
            }
        }
        r.selected = union;
        stages.push("mmr+bagging".into());
        aggregate(&question, &trials, task.kind, config, services, &mut stages)?
    } else {
        let mut docs = Vec::new();
        if let Some(r) = retrieval.as_mut() {
            let retriever = services.retriever.as_ref().expect("checked in run_eval");
            let mut policy = config.selection;
            policy.seed = seed;
            r.selected = policy.select(r.pool(), retriever.shards, 0)?;
            docs = doc_texts(retriever, &r.selected)?;
        }
        let prompt = assemble_prompt(&question, &docs, &config.template, config.context_chars)?;
        truncated.extend(prompt.truncated);
        let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
        let n = if sampled { config.n_trials } else { 1 };
        trials = sample_trials(services.reader, &prompt.text, &config.params(seed, n, sampled), task.kind, &ids, 0)?;
        if sampled {
            aggregate(&question, &trials, task.kind, config, services, &mut stages)?
        } else {
            stages.push("single".into());
            (trials.first().and_then(|t| t.answer.clone()), serde_json::json!({"method": "single"}))
        }
    };

    truncated.sort();
    truncated.dedup();
    if !truncated.is_empty() {
        notes.push(format!("truncated to fit context: {}", truncated.join(", ")));
    }
    if let Some(r) = &mut retrieval {
        r.provenance.truncated = truncated;
    }
    let correct = score(predicted.as_deref(), task);
    Ok((
        TaskResult {
            id: task.id.clone(),
            subject: task.subject.clone(),
            predicted,
            correct,
            stages,
            notes,
        },
        AuditRecord {
            id: task.id.clone(),
            strategy,
            gold: task.gold.clone(),
            retrieval,
            trials,
            aggregation,
        },
    ))
}

fn aggregate(
    question: &str,
    trials: &[TrialRecord],
    kind: TaskKind,
    config: &StrategyConfig,
    services: &Services<'_>,
    stages: &mut Vec<String>,
) -> Result<(Option<String>, serde_json::Value)> {
    if config.judge && kind != TaskKind::MultipleChoice {
        let judge = services.judge.unwrap_or(services.reader);
        let out = usc_select(question, trials, judge)?;
        stages.push("usc".into());
        let trace = serde_json::json!({"method": "usc", "chosen": out.chosen, "fallback": out.fallback});
        return Ok((out.answer, trace));
    }
    let (answer, tally) = majority_vote(trials)?;
    stages.push("majority_vote".into());
    Ok((answer, serde_json::json!({"method": "majority_vote", "tally": tally})))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedReport {
    pub strategy: Strategy,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub macro_accuracy: Vec<f64>,
    pub micro_accuracy: Vec<f64>,
    pub mean_macro: f64,
    pub mean_micro: f64,
}

/// Mean accuracy over `runs` evaluations seeded `config.seed + r`.
pub fn run_repeated(
    tasks: &[EvalTask],
    config: &StrategyConfig,
    services: &Services<'_>,
    runs: usize,
    workers: usize,
) -> Result<RepeatedReport> {
    if runs == 0 {
        return Err(EvalError::Parameter("at least one run".into()));
    }
    let mut out = RepeatedReport {
        strategy: config.strategy,
        runs,
        seeds: Vec::new(),
        macro_accuracy: Vec::new(),
        micro_accuracy: Vec::new(),
        mean_macro: 0.0,
        mean_micro: 0.0,
    };
    for r in 0..runs {
        let cfg = StrategyConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..config.clone()
        };
        let run = run_eval(tasks, &cfg, services, None, workers)?;
        out.seeds.push(cfg.seed);
        out.macro_accuracy.push(run.report.macro_accuracy);
        out.micro_accuracy.push(run.report.micro_accuracy);
    }
    out.mean_macro = out.macro_accuracy.iter().sum::<f64>() / runs as f64;
    out.mean_micro = out.micro_accuracy.iter().sum::<f64>() / runs as f64;
    Ok(out)
}
