use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dsrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsrag"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status, stdout(&o), stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_jsonl(path: &Path, rows: impl IntoIterator<Item = Value>) {
    let text: Vec<String> = rows.into_iter().map(|v| v.to_string()).collect();
    fs::write(path, text.join("\n") + "\n").unwrap();
}

/// Deterministic pseudo-words so fixtures never share n-grams by accident.
fn word(seed: usize) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    let mut x = seed.wrapping_mul(2654435761).wrapping_add(12345);
    (0..6)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            letters[(x >> 33) % 26] as char
        })
        .collect()
}

fn words(from: usize, n: usize) -> String {
    (from..from + n).map(word).collect::<Vec<_>>().join(" ")
}

const SUBJECTS: [&str; 3] = ["astronomy", "philosophy", "marketing"];

/// Corpus with one fact document per task plus noise, the matching rule file
/// for the fact reader, and the task file.
struct FactFixture {
    dir: tempfile::TempDir,
}

impl FactFixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let letters = ["A", "B", "C", "D"];
        let mut docs = Vec::new();
        let mut rules = Vec::new();
        let mut tasks = Vec::new();
        for i in 0..12 {
            let key = words(1000 + i * 20, 8);
            let value = word(5000 + i);
            let question = format!("In the archive, what is the {key} value?");
            let fact = format!("{key} value is {value}");
            docs.push(json!({"id": format!("fact{i:02}"), "dataset": "wiki", "text": format!("Archive entry: the {fact}.")}));
            rules.push(json!({"question": question, "fact": fact, "answer": letters[i % 4], "wrong": letters[(i + 1) % 4]}));
            tasks.push(json!({
                "id": format!("t{i:02}"),
                "subject": SUBJECTS[i % 3],
                "question": question,
                "choices": ["first", "second", "third", "fourth"],
                "answer": letters[i % 4],
            }));
        }
        for i in 0..150 {
            docs.push(json!({"id": format!("noise{i:03}"), "dataset": "web", "text": words(20_000 + i * 12, 12)}));
        }
        write_jsonl(&dir.path().join("corpus.jsonl"), docs);
        write_jsonl(&dir.path().join("rules.jsonl"), rules);
        write_jsonl(&dir.path().join("tasks.jsonl"), tasks);
        let f = Self { dir };
        let config = format!(
            "corpus = {:?}\nshards = {:?}\ntest_set = {:?}\nworkers = 3\n\n[embedder]\nkind = \"hash\"\ndims = 64\nseed = 9\n\n[reader]\nkind = \"facts\"\nrules = {:?}\n",
            f.path("corpus.jsonl"),
            f.path("index"),
            f.path("tasks.jsonl"),
            f.path("rules.jsonl"),
        );
        fs::write(f.path("config.toml"), config).unwrap();
        ok(dsrag(&["build-index", "-c", p(&f.path("config.toml")), "--out", p(&f.path("index"))]));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn eval(&self, strategy: &str, run: &str, extra: &[&str]) -> Value {
        let run_dir = self.path(run);
        let config = self.path("config.toml");
        let mut args = vec!["eval", "-c", p(&config), "--strategy", strategy, "--run-dir", p(&run_dir)];
        args.extend(extra);
        ok(dsrag(&args));
        serde_json::from_slice(&fs::read(run_dir.join("report.json")).unwrap()).unwrap()
    }
}

#[test]
fn build_index_splits_into_shards_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_jsonl(&corpus, (0..300).map(|i| json!({"id": format!("d{i:03}"), "text": words(i * 5, 5)})));
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = ok(dsrag(&["build-index", "--corpus", p(&corpus), "--out", p(&out), "--shard-size", "100"]));
        assert!(stdout(&o).starts_with("3 shards, 300 documents"), "{}", stdout(&o));
        let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["shards"].as_array().unwrap().len(), 3);
        for s in manifest["shards"].as_array().unwrap() {
            assert!(out.join(s["file"].as_str().unwrap()).exists());
            assert_eq!(s["count"], 100);
        }
        hashes.push(fs::read(out.join("manifest.json")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn unreachable_embedder_fails_naming_the_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_jsonl(&corpus, [json!({"id": "a", "text": "hello there"})]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}/v1");
    let config = dir.path().join("config.toml");
    fs::write(
        &config,
        format!("[embedder]\nkind = \"http\"\nendpoint = {endpoint:?}\nmodel = \"m\"\ntimeout_secs = 2\nmax_retries = 0\n"),
    )
    .unwrap();
    let out = dir.path().join("index");
    let o = dsrag(&["build-index", "-c", p(&config), "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("127.0.0.1:{port}")), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn decontaminate_drops_planted_overlaps() {
    let dir = tempfile::tempdir().unwrap();
    let test_set = dir.path().join("test.jsonl");
    let questions: Vec<String> = (0..3).map(|i| words(100 + i * 40, 30)).collect();
    write_jsonl(
        &test_set,
        questions.iter().enumerate().map(|(i, q)| json!({"id": format!("q{i}"), "question": q, "answer": "x"})),
    );
    let mut docs: Vec<Value> = (0..40).map(|i| json!({"id": format!("clean{i}"), "text": words(9000 + i * 40, 40)})).collect();
    for (i, q) in questions.iter().enumerate() {
        let span: Vec<&str> = q.split(' ').skip(5).take(16).collect();
        docs.push(json!({"id": format!("plant{i}"), "text": format!("{} {} {}", words(7000 + i * 9, 4), span.join(" "), words(8000, 3))}));
    }
    let corpus = dir.path().join("corpus.jsonl");
    write_jsonl(&corpus, docs);

    let run = |extra: &[&str]| {
        let out = dir.path().join("clean.jsonl");
        let report = dir.path().join("report.json");
        let mut args = vec!["decontaminate", "--corpus", p(&corpus), "--test-set", p(&test_set)];
        args.extend(["--out", p(&out), "--report", p(&report)]);
        args.extend(extra);
        ok(dsrag(&args));
        let report: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        let kept = fs::read_to_string(&out).unwrap().lines().count();
        (report, kept)
    };

    let (report, kept) = run(&[]);
    assert_eq!(report["ngram"], 16);
    assert_eq!(report["dropped"], 3);
    assert_eq!(report["dropped_ids"], json!(["plant0", "plant1", "plant2"]));
    assert_eq!(kept, 40);

    let (report, kept) = run(&["--math"]);
    assert_eq!(report["ngram"], 26);
    assert_eq!(report["dropped"], 0);
    assert_eq!(kept, 43);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = dsrag(&["eval", "--test-set", p(&missing), "--run-dir", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope.jsonl"));

    let o = dsrag(&["build-index", "--corpus", p(&missing), "--out", p(&dir.path().join("i"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = dsrag(&["eval", "--strategy", "telepathy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_shows_retrieval_lift_and_resumes_identically() {
    let f = FactFixture::new();
    let baseline = f.eval("baseline", "base", &[]);
    assert_eq!(baseline["micro_accuracy"], 0.0);
    assert_eq!(baseline["tasks"], 12);

    let retrieval = f.eval("retrieval", "ret", &[]);
    assert_eq!(retrieval["micro_accuracy"], 1.0);
    assert_eq!(retrieval["macro_accuracy"], 1.0);
    let run_dir = f.path("ret");
    for name in ["config.toml", "checkpoint.jsonl", "report.json", "subjects.csv", "audit.jsonl", "manifest.json"] {
        assert!(run_dir.join(name).exists(), "{name}");
    }

    // Rerunning over a complete checkpoint restores every task.
    let first = fs::read(run_dir.join("report.json")).unwrap();
    let checkpoint = fs::read(run_dir.join("checkpoint.jsonl")).unwrap();
    f.eval("retrieval", "ret", &["--workers", "1"]);
    assert_eq!(fs::read(run_dir.join("report.json")).unwrap(), first);
    assert_eq!(fs::read(run_dir.join("checkpoint.jsonl")).unwrap(), checkpoint);

    // Interrupted run: keep half the checkpoint and resume.
    let partial = f.path("partial");
    fs::create_dir_all(&partial).unwrap();
    let half: Vec<&str> = std::str::from_utf8(&checkpoint).unwrap().lines().take(6).collect();
    fs::write(partial.join("checkpoint.jsonl"), half.join("\n") + "\n").unwrap();
    f.eval("retrieval", "partial", &[]);
    assert_eq!(fs::read(partial.join("report.json")).unwrap(), first);

    // A different config cannot resume someone else's checkpoint.
    let o = dsrag(&[
        "eval",
        "-c",
        p(&f.path("config.toml")),
        "--strategy",
        "baseline",
        "--run-dir",
        p(&run_dir),
    ]);
    assert!(!o.status.success());

    let o = ok(dsrag(&[
        "report",
        p(&f.path("base/report.json")),
        p(&run_dir.join("report.json")),
        "--csv",
        p(&f.path("summary.csv")),
    ]));
    let text = stdout(&o);
    assert!(text.contains("baseline") && text.contains("retrieval"), "{text}");
    let csv = fs::read_to_string(f.path("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn retrieve_prints_the_fact_document_first() {
    let f = FactFixture::new();
    let rules = fs::read_to_string(f.path("rules.jsonl")).unwrap();
    let first: Value = serde_json::from_str(rules.lines().next().unwrap()).unwrap();
    let o = ok(dsrag(&["retrieve", "-c", p(&f.path("config.toml")), "-q", first["question"].as_str().unwrap()]));
    let result: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(result["candidates"][0]["doc_id"], "fact00");
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/fits").join(name)
}

#[test]
fn fit_reproduces_the_shipped_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let o = ok(dsrag(&[
        "fit",
        "--points",
        p(&shipped("mmlu_all.csv")),
        "--category",
        "All",
        "--out",
        p(&out),
    ]));
    let fit: Value = serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap();
    let slope = fit["curve"]["slope"].as_f64().unwrap();
    assert!((0.78..=0.82).contains(&slope), "{slope}");
    let report = &fit["multipliers"]["retrieval"];
    assert!((report["mean"].as_f64().unwrap() - 4.86).abs() < 0.05, "{}", stdout(&o));
    assert!(out.join("curve.csv").exists() && out.join("multipliers.csv").exists());

    // Fitted curve turns report accuracies into compute multipliers.
    let write_report = |name: &str, strategy: &str, acc: f64| {
        let path = dir.path().join(name);
        let report = json!({
            "strategy": strategy, "config_fingerprint": "x", "tasks": 1, "abstentions": 0,
            "macro_accuracy": acc, "micro_accuracy": acc,
            "per_subject": {"s": {"correct": 1, "total": 1, "accuracy": acc}},
            "category_rollup": null, "per_task": {},
        });
        fs::write(&path, report.to_string()).unwrap();
        path
    };
    let base = write_report("base.json", "baseline", 0.716);
    let method = write_report("method.json", "retrieval+rerank", 0.777);
    let o = ok(dsrag(&["report", p(&base), p(&method), "--curve", p(&out.join("fit.json"))]));
    let line = stdout(&o).lines().find(|l| l.starts_with("retrieval+rerank")).unwrap().to_string();
    let mult: f64 = line.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!((mult - 3.56).abs() / 3.56 < 0.05, "{line}");
}

#[test]
fn fit_needs_three_baseline_points() {
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("points.csv");
    fs::write(&points, "flops,accuracy,label\n1e21,0.4,baseline\n1e22,0.6,baseline\n").unwrap();
    let o = dsrag(&["fit", "--points", p(&points), "--category", "All"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least 3 points"), "{}", stderr(&o));
}
