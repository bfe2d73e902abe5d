//! Answer extraction and aggregation over sampled completions: majority
//! voting, judge-based selection for open-ended answers, and per-document
//! consistency ranking.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, Reader, SamplingParams};
use crate::corpus::Document;
use crate::pipeline::{assemble_prompt, PromptTemplate};

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("every document failed: {}", .0.iter().map(|(d, e)| format!("{d}: {e}")).collect::<Vec<_>>().join("; "))]
    AllDocumentsFailed(Vec<(String, String)>),
}

pub type Result<T> = std::result::Result<T, ConsistencyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    ExactMatch,
    Math,
}

impl TaskKind {
    /// Whether sampling several answers and voting makes sense.
    pub fn supports_voting(self) -> bool {
        !matches!(self, TaskKind::ExactMatch)
    }
}

static MC_FINAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:answer)\s*(?:(?i:is)\s*:?|:)\s*(?:(?i:option)\s*)?[\(\[*]*([A-J])\b").unwrap()
});
static MC_BOXED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\\boxed\{\s*(?:\\text\{)?\s*\(?([A-J])\)?\s*\}?\s*\}").unwrap());
static MC_BARE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[\(\[]?([A-J])[\)\]]?[.:]?\s*$").unwrap());
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:/\d+)?").unwrap());
static PLAIN_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(-?)(\d+)(?:\.(\d+))?$").unwrap());
static TEXT_FINAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)answer\s*(?:is|:)\s*:?\s*").unwrap());

/// Canonical answer from a completion, or `None` when nothing parses.
pub fn extract_answer(completion: &str, kind: TaskKind) -> Option<String> {
    match kind {
        TaskKind::MultipleChoice => extract_choice(completion),
        TaskKind::Math => extract_math(completion),
        TaskKind::ExactMatch => extract_text(completion),
    }
}

fn extract_choice(completion: &str) -> Option<String> {
    let last = |re: &Regex| {
        re.captures_iter(completion)
            .last()
            .map(|c| (c.get(0).unwrap().start(), c[1].to_string()))
    };
    match (last(&MC_FINAL), last(&MC_BOXED)) {
        (Some(a), Some(b)) => Some(if a.0 > b.0 { a.1 } else { b.1 }),
        (a, b) => a.or(b).map(|(_, l)| l),
    }
    .or_else(|| MC_BARE.captures(completion).map(|c| c[1].to_string()))
}

/// Contents of the last `\boxed{...}`, with nested braces balanced.
pub fn last_boxed(text: &str) -> Option<&str> {
    let start = text.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn extract_math(completion: &str) -> Option<String> {
    let raw = match last_boxed(completion) {
        Some(b) => b.to_string(),
        None => NUMBER.find_iter(completion).last()?.as_str().to_string(),
    };
    let n = normalize_math(&raw);
    (!n.is_empty()).then_some(n)
}

/// Math answer normalization: drops whitespace, `$` and `\!`, thousands
/// separators, leading zeros and trailing fractional zeros. No symbolic
/// equivalence, so `0.5` and `1/2` stay distinct.
pub fn normalize_math(raw: &str) -> String {
    let mut s: String = raw
        .replace("\\!", "")
        .replace("\\dfrac", "\\frac")
        .replace("\\tfrac", "\\frac")
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '$')
        .collect();
    if let Some(inner) = s.strip_prefix("\\text{").and_then(|r| r.strip_suffix('}')) {
        s = inner.to_string();
    }
    let unsep = s.replace(',', "");
    if let Some(c) = PLAIN_NUMBER.captures(&unsep) {
        let int = c[2].trim_start_matches('0');
        let int = if int.is_empty() { "0" } else { int };
        let frac = c.get(3).map_or("", |m| m.as_str().trim_end_matches('0'));
        let sign = if &c[1] == "-" && (int != "0" || !frac.is_empty()) { "-" } else { "" };
        return if frac.is_empty() {
            format!("{sign}{int}")
        } else {
            format!("{sign}{int}.{frac}")
        };
    }
    s
}

/// Case-folded, whitespace-collapsed text with surrounding quotes and
/// trailing sentence punctuation removed.
pub fn normalize_text(raw: &str) -> String {
    let folded = raw.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', '!', '?'])
        .trim_matches(['"', '\'', '*', '`'])
        .trim()
        .to_string()
}

fn extract_text(completion: &str) -> Option<String> {
    let span = match TEXT_FINAL.find_iter(completion).last() {
        Some(m) => completion[m.end()..].lines().next().unwrap_or(""),
        None => completion.lines().rev().find(|l| !l.trim().is_empty())?,
    };
    let n = normalize_text(span);
    (!n.is_empty()).then_some(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub doc_context: Vec<String>,
    pub completion: String,
    pub answer: Option<String>,
}

impl TrialRecord {
    pub fn new(trial_index: usize, doc_context: Vec<String>, completion: String, kind: TaskKind) -> Self {
        let answer = extract_answer(&completion, kind);
        Self {
            trial_index,
            doc_context,
            completion,
            answer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

impl VoteTally {
    pub fn add(&mut self, answer: &str) {
        *self.counts.entry(answer.to_string()).or_default() += 1;
        self.total += 1;
    }

    /// Most frequent answer; the lexicographically smallest among ties.
    pub fn winner(&self) -> Option<(&str, usize)> {
        // BTreeMap iterates ascending, so the first maximum is the smallest key.
        self.counts
            .iter()
            .fold(None, |best: Option<(&str, usize)>, (a, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((a.as_str(), c)),
            })
    }
}

/// Winning answer and tally; `None` is an abstention (no trial parsed).
pub fn majority_vote(trials: &[TrialRecord]) -> Result<(Option<String>, VoteTally)> {
    if trials.is_empty() {
        return Err(ConsistencyError::Parameter("majority vote over zero trials".into()));
    }
    Ok(vote(trials.iter().map(|t| t.answer.as_deref())))
}

/// Tally of the parsed answers among `answers`.
pub fn vote<'a>(answers: impl IntoIterator<Item = Option<&'a str>>) -> (Option<String>, VoteTally) {
    let mut tally = VoteTally::default();
    for a in answers.into_iter().flatten() {
        tally.add(a);
    }
    (tally.winner().map(|(a, _)| a.to_string()), tally)
}

/// Draws `params.n_parallel` completions for one prompt.
pub fn sample_trials(
    reader: &dyn Reader,
    prompt: &str,
    params: &SamplingParams,
    kind: TaskKind,
    doc_context: &[String],
    first_index: usize,
) -> std::result::Result<Vec<TrialRecord>, ClientError> {
    let completions = reader.generate(prompt, params)?;
    Ok(completions
        .into_iter()
        .enumerate()
        .map(|(i, c)| TrialRecord::new(first_index + i, doc_context.to_vec(), c, kind))
        .collect())
}

pub const USC_INSTRUCTION: &str = "Evaluate these responses.\nSelect the most consistent response based on majority consensus.\nStart your answer with \"The most consistent response is Response X\" (without quotes).";

static USC_CHOICE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)most consistent response is\s*:?\s*\**\s*response\s*(\d+)").unwrap());

pub fn usc_prompt(question: &str, candidates: &[TrialRecord]) -> String {
    let mut p = format!("I have generated the following responses to the question: {question}\n\n");
    for (i, c) in candidates.iter().enumerate() {
        p.push_str(&format!("Response {}: {}\n\n", i + 1, c.completion.trim()));
    }
    p.push_str(USC_INSTRUCTION);
    p
}

/// 1-based response number named by a judge completion.
pub fn parse_usc_choice(judgement: &str) -> Option<usize> {
    USC_CHOICE.captures(judgement).and_then(|c| c[1].parse().ok())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UscOutcome {
    pub answer: Option<String>,
    /// Index into the candidates of the chosen response.
    pub chosen: Option<usize>,
    /// Why the judge was bypassed or overruled by a majority vote.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

/// Asks `judge` which candidate is most consistent with the rest and returns
/// its answer. Single or unanimous candidates skip the judge; any judge
/// failure falls back to a majority vote.
pub fn usc_select(question: &str, candidates: &[TrialRecord], judge: &dyn Reader) -> Result<UscOutcome> {
    let first = candidates
        .first()
        .ok_or_else(|| ConsistencyError::Parameter("judge selection over zero candidates".into()))?;
    if candidates.iter().all(|c| c.answer.is_some() && c.answer == first.answer) {
        return Ok(UscOutcome {
            answer: first.answer.clone(),
            chosen: Some(0),
            fallback: None,
        });
    }
    let fallback = |reason: String| -> Result<UscOutcome> {
        let (answer, _) = majority_vote(candidates)?;
        let chosen = candidates.iter().position(|c| c.answer.is_some() && c.answer == answer);
        Ok(UscOutcome {
            answer,
            chosen,
            fallback: Some(reason),
        })
    };
    let params = SamplingParams::greedy();
    let judgement = match judge.generate(&usc_prompt(question, candidates), &params) {
        Ok(mut v) if !v.is_empty() => v.swap_remove(0),
        Ok(_) => return fallback("judge returned no completion".into()),
        Err(e) => return fallback(format!("judge failed: {e}")),
    };
    match parse_usc_choice(&judgement) {
        Some(n) if (1..=candidates.len()).contains(&n) && candidates[n - 1].answer.is_some() => Ok(UscOutcome {
            answer: candidates[n - 1].answer.clone(),
            chosen: Some(n - 1),
            fallback: None,
        }),
        Some(n) => fallback(format!("judge chose unusable response {n}")),
        None => fallback("judge named no response".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocConsistency {
    pub doc_id: String,
    pub score: f32,
    pub tally: VoteTally,
    pub top_answer: Option<String>,
    pub top_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterdocOutcome {
    pub answer: Option<String>,
    pub ranked: Vec<DocConsistency>,
    pub trials: Vec<TrialRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<(String, String)>,
}

/// Runs `n_per_doc` trials with each document alone in context, ranks the
/// documents by (top count desc, retrieval score desc, doc id asc), and
/// answers with the top document's modal answer.
#[allow(clippy::too_many_arguments)]
pub fn interdoc_consistency(
    question: &str,
    docs: &[(&Document, f32)],
    n_per_doc: usize,
    reader: &dyn Reader,
    params: &SamplingParams,
    template: &PromptTemplate,
    budget_chars: Option<usize>,
    kind: TaskKind,
) -> Result<InterdocOutcome> {
    if docs.is_empty() {
        return Err(ConsistencyError::Parameter("no documents".into()));
    }
    if n_per_doc == 0 {
        return Err(ConsistencyError::Parameter("n_per_doc must be at least 1".into()));
    }
    let params = SamplingParams {
        n_parallel: n_per_doc,
        ..params.clone()
    };
    let groups: Vec<std::result::Result<Vec<TrialRecord>, String>> = docs
        .par_iter()
        .enumerate()
        .map(|(d, (doc, _))| {
            let prompt = assemble_prompt(question, &[doc], template, budget_chars).map_err(|e| e.to_string())?;
            sample_trials(reader, &prompt.text, &params, kind, std::slice::from_ref(&doc.id), d * n_per_doc)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut ranked = Vec::new();
    let mut trials = Vec::new();
    let mut failed = Vec::new();
    for ((doc, score), group) in docs.iter().zip(groups) {
        match group {
            Ok(group) => {
                let (top_answer, tally) = vote(group.iter().map(|t| t.answer.as_deref()));
                let top_count = tally.winner().map_or(0, |(_, c)| c);
                ranked.push(DocConsistency {
                    doc_id: doc.id.clone(),
                    score: *score,
                    tally,
                    top_answer,
                    top_count,
                });
                trials.extend(group);
            }
            Err(e) => failed.push((doc.id.clone(), e)),
        }
    }
    if ranked.is_empty() {
        return Err(ConsistencyError::AllDocumentsFailed(failed));
    }
    ranked.sort_by(|a, b| {
        b.top_count
            .cmp(&a.top_count)
            .then(b.score.total_cmp(&a.score))
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    Ok(InterdocOutcome {
        answer: ranked[0].top_answer.clone(),
        ranked,
        trials,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{pick, Counted, FnReader};
    use crate::corpus::DefaultTokenizer;

    fn trials(answers: &[Option<&str>]) -> Vec<TrialRecord> {
        answers
            .iter()
            .enumerate()
            .map(|(i, a)| TrialRecord {
                trial_index: i,
                doc_context: vec![],
                completion: a.map_or("no idea".into(), |a| format!("The answer is {a}")),
                answer: a.map(str::to_string),
            })
            .collect()
    }

    #[test]
    fn canonical_patterns() {
        use TaskKind::*;
        assert_eq!(extract_answer("Thinking... The answer is (C).", MultipleChoice).as_deref(), Some("C"));
        assert_eq!(extract_answer("so \\boxed{042}", Math).as_deref(), Some("42"));
        assert_eq!(extract_answer("x = 3.50", Math).as_deref(), Some("3.5"));
        assert_eq!(extract_answer("\\boxed{\\frac{1}{2}}", Math).as_deref(), Some("\\frac{1}{2}"));
        assert_eq!(extract_answer("The answer is Paris.", ExactMatch).as_deref(), Some("paris"));
        assert_eq!(extract_answer("no letter here", MultipleChoice), None);
        assert_eq!(extract_answer("   ", ExactMatch), None);
    }

    #[test]
    fn votes() {
        let (a, t) = majority_vote(&trials(&[Some("A"), Some("A"), Some("B")])).unwrap();
        assert_eq!(a.as_deref(), Some("A"));
        assert_eq!(t.counts, BTreeMap::from([("A".into(), 2), ("B".into(), 1)]));
        assert_eq!(majority_vote(&trials(&[Some("B"), Some("A")])).unwrap().0.as_deref(), Some("A"));
        let (a, t) = majority_vote(&trials(&[None, None])).unwrap();
        assert_eq!((a, t.total), (None, 0));
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn usc_pass_through_and_fallback() {
        let never = FnReader::new(|_, _, _| panic!("judge must not be called"));
        let same = trials(&[Some("x"), Some("x")]);
        assert_eq!(usc_select("q", &same, &never).unwrap().answer.as_deref(), Some("x"));
        let one = trials(&[Some("y")]);
        assert_eq!(usc_select("q", &one, &never).unwrap().answer.as_deref(), Some("y"));

        let picks_two = FnReader::new(|_, _, _| "The most consistent response is Response 2".into());
        let mixed = trials(&[Some("a"), Some("b"), Some("a")]);
        let out = usc_select("q", &mixed, &picks_two).unwrap();
        assert_eq!((out.answer.as_deref(), out.chosen), (Some("b"), Some(1)));

        let rambles = FnReader::new(|_, _, _| "hard to say".into());
        let out = usc_select("q", &mixed, &rambles).unwrap();
        assert_eq!(out.answer.as_deref(), Some("a"));
        assert!(out.fallback.is_some());
    }

    #[test]
    fn interdoc_prefers_the_consistent_document() {
        let d1 = Document::new("d1", "x", "steady fact", &DefaultTokenizer);
        let d2 = Document::new("d2", "x", "noisy text", &DefaultTokenizer);
        let reader = Counted::new(FnReader::new(|prompt, _, rng| {
            let letter = if prompt.contains("steady") { "A" } else { pick(rng, &["A", "B", "C", "D"]) };
            format!("The answer is ({letter})")
        }));
        let out = interdoc_consistency(
            "Q?",
            &[(&d2, 0.9), (&d1, 0.1)],
            8,
            &reader,
            &SamplingParams::default(),
            &PromptTemplate::default(),
            None,
            TaskKind::MultipleChoice,
        )
        .unwrap();
        assert_eq!(out.ranked[0].doc_id, "d1");
        assert_eq!(out.answer.as_deref(), Some("A"));
        assert_eq!(reader.items(), 16);
        assert_eq!(out.trials.len(), 16);
    }

    #[test]
    fn interdoc_ties_go_to_retrieval_score() {
        let a = Document::new("a", "x", "alpha", &DefaultTokenizer);
        let b = Document::new("b", "x", "beta", &DefaultTokenizer);
        let reader = FnReader::new(|prompt, _, _| if prompt.contains("alpha") { "(B)".into() } else { "(C)".into() });
        let out = interdoc_consistency(
            "Q?",
            &[(&a, 0.2), (&b, 0.7)],
            3,
            &reader,
            &SamplingParams::default(),
            &PromptTemplate::default(),
            None,
            TaskKind::MultipleChoice,
        )
        .unwrap();
        assert_eq!(out.ranked[0].doc_id, "b");
        assert_eq!(out.answer.as_deref(), Some("C"));
    }
}
