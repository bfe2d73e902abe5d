use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use dsrag::clients::{Embedder, Reranker};
use dsrag::corpus::{ingest, read_all, write_jsonl, DefaultTokenizer, Document, Tokenizer};
use dsrag::decontam::{build_filter, decontaminate, load_test_items, MATH_NGRAM};
use dsrag::evalharness::{load_tasks, run_eval, run_repeated, EvalReport, Services};
use dsrag::index::{EmbeddingVector, ShardIndex};
use dsrag::pipeline::{DocStore, Exclusion, PromptTemplate, Retriever};
use dsrag::scalinglaw::{
    fit_sigmoid, method_efficiency, mmlu_category_bounds, multiplier_table, read_points_csv, sample_curve,
    split_labeled, MultiplierReport, SigmoidCurve,
};

use crate::config::{require, require_existing, DecontamStage, RunConfig, UsageError};

pub const MANIFEST: &str = "manifest.json";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializes");
    v.push(b'\n');
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub dataset: String,
    pub window: usize,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub tokenizer: String,
    pub embedder: String,
    pub dims: usize,
    pub normalized: bool,
    pub shard_size: usize,
    pub corpus_sha256: String,
    pub documents: usize,
    pub shards: Vec<ShardEntry>,
}

fn shard_file_name(dataset: &str, window: usize) -> String {
    let safe: String = dataset
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}-{window:04}.ragm")
}

/// Embeds the corpus and writes one shard per (dataset, window) plus a
/// manifest. Output is assembled in a sibling directory and moved into
/// place only when complete.
pub fn build_index(cfg: &RunConfig, out: &Path) -> Result<IndexManifest> {
    let corpus = require_existing(cfg.corpus.as_ref(), "corpus")?;
    if cfg.shard_size == 0 {
        return Err(UsageError("shard_size must be positive".into()).into());
    }
    let embedder = cfg.embedder()?;
    let staging = out.with_extension("building");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
    let built = write_shards(cfg, corpus, embedder.as_ref(), &staging);
    match built {
        Ok(manifest) => {
            if out.exists() {
                fs::remove_dir_all(out).with_context(|| format!("replacing {}", out.display()))?;
            }
            fs::rename(&staging, out).with_context(|| format!("moving index into {}", out.display()))?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_shards(cfg: &RunConfig, corpus: &Path, embedder: &dyn Embedder, dir: &Path) -> Result<IndexManifest> {
    let tok = DefaultTokenizer;
    let docs = read_all(corpus, &tok)?;
    let mut by_dataset: BTreeMap<&str, Vec<&Document>> = BTreeMap::new();
    for d in &docs {
        by_dataset.entry(d.dataset.as_str()).or_default().push(d);
    }
    let mut shards = Vec::new();
    let mut dims = None;
    for (dataset, group) in by_dataset {
        for (window, chunk) in group.chunks(cfg.shard_size).enumerate() {
            let mut rows = Vec::with_capacity(chunk.len());
            for batch in chunk.chunks(cfg.embedder_batch()) {
                let texts: Vec<String> = batch.iter().map(|d| d.text.clone()).collect();
                let vecs = embedder.embed(&texts)?;
                rows.extend(batch.iter().map(|d| d.id.clone()).zip(vecs));
            }
            let d = *dims.get_or_insert_with(|| rows.first().map_or(0, |(_, v): &(String, EmbeddingVector)| v.dims()));
            let shard = ShardIndex::build(d, rows, dataset, cfg.normalize)?;
            let file = shard_file_name(dataset, window);
            let path = dir.join(&file);
            shard.save(&path)?;
            info!(shard = %file, count = shard.len(), "wrote shard");
            shards.push(ShardEntry {
                sha256: sha256_file(&path)?,
                file,
                dataset: dataset.to_string(),
                window,
                count: shard.len(),
            });
        }
    }
    let manifest = IndexManifest {
        tokenizer: tok.id().to_string(),
        embedder: cfg.embedder_description(),
        dims: dims.unwrap_or(0),
        normalized: cfg.normalize,
        shard_size: cfg.shard_size,
        corpus_sha256: sha256_file(corpus)?,
        documents: docs.len(),
        shards,
    };
    fs::write(dir.join(MANIFEST), json_bytes(&manifest))?;
    Ok(manifest)
}

pub fn load_shards(dir: &Path) -> Result<(IndexManifest, Vec<ShardIndex>)> {
    let mpath = dir.join(MANIFEST);
    let manifest: IndexManifest = serde_json::from_slice(
        &fs::read(&mpath).with_context(|| format!("reading {}", mpath.display()))?,
    )
    .with_context(|| format!("parsing {}", mpath.display()))?;
    let shards = manifest
        .shards
        .iter()
        .map(|s| ShardIndex::load(&dir.join(&s.file)).with_context(|| format!("loading shard {}", s.file)))
        .collect::<Result<_>>()?;
    Ok((manifest, shards))
}

#[derive(Debug, Clone)]
pub struct DecontamArgs {
    pub corpus: Option<PathBuf>,
    pub test_set: Option<PathBuf>,
    pub out: PathBuf,
    pub report: PathBuf,
    pub ngram: usize,
    pub include_choices: bool,
}

/// Streams the corpus through the filter, writing the kept documents and a
/// report.
pub fn decontaminate_cmd(args: &DecontamArgs) -> Result<dsrag::decontam::DecontamReport> {
    let corpus = require_existing(args.corpus.as_ref(), "corpus")?;
    let test_set = require_existing(args.test_set.as_ref(), "test set")?;
    let tok = DefaultTokenizer;
    let items = load_test_items(test_set)?;
    let texts: Vec<String> = items.iter().map(|i| i.filter_text(args.include_choices)).collect();
    let filter = build_filter(&texts, args.ngram, &tok, test_set.display().to_string())?;

    let staging = args.out.with_extension("partial");
    let result = (|| -> Result<dsrag::decontam::DecontamReport> {
        let mut read_error = None;
        let docs = ingest(corpus, &tok)?.map_while(|r| r.map_err(|e| read_error = Some(e)).ok());
        let mut stream = decontaminate(docs, &filter, &tok);
        let mut out = BufWriter::new(fs::File::create(&staging)?);
        for doc in stream.by_ref() {
            write_jsonl(&mut out, [&doc])?;
        }
        out.flush()?;
        let report = stream.report();
        if let Some(e) = read_error {
            return Err(e.into());
        }
        Ok(report)
    })();
    match result {
        Ok(report) => {
            fs::rename(&staging, &args.out)?;
            write_atomic(&args.report, &json_bytes(&report))?;
            Ok(report)
        }
        Err(e) => {
            let _ = fs::remove_file(&staging);
            Err(e)
        }
    }
}

/// Loaded index, documents and optional exclusion filter for query-time work.
pub struct RetrievalContext {
    pub shards: Vec<ShardIndex>,
    pub docs: DocStore,
    pub embedder: Box<dyn Embedder>,
    pub filter: Option<dsrag::decontam::NGramFilter>,
}

impl RetrievalContext {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let shard_dir = require_existing(cfg.shards.as_ref(), "shards directory")?;
        let corpus = require_existing(cfg.corpus.as_ref(), "corpus")?;
        let (manifest, shards) = load_shards(shard_dir)?;
        let tok = DefaultTokenizer;
        let docs = read_all(corpus, &tok)?;
        if manifest.corpus_sha256 != sha256_file(corpus)? {
            tracing::warn!(corpus = %corpus.display(), "corpus differs from the one the index was built from");
        }
        let filter = match cfg.decontam.stage {
            DecontamStage::Off => None,
            DecontamStage::Post => {
                let src = cfg
                    .decontam
                    .test_set
                    .as_ref()
                    .or(cfg.test_set.as_ref())
                    .ok_or_else(|| UsageError("post-retrieval decontamination needs a test set".into()))?;
                let items = load_test_items(src)?;
                let texts: Vec<String> = items.iter().map(|i| i.filter_text(cfg.decontam.include_choices)).collect();
                Some(build_filter(&texts, cfg.decontam.ngram, &tok, src.display().to_string())?)
            }
        };
        Ok(Self {
            shards,
            docs: DocStore::new(docs),
            embedder: cfg.embedder()?,
            filter,
        })
    }

    pub fn retriever(&self) -> Retriever<'_> {
        let mut r = Retriever::new(&self.shards, self.embedder.as_ref(), &self.docs);
        r.exclusion = self.filter.as_ref().map(|filter| Exclusion {
            filter,
            tokenizer: &DefaultTokenizer,
        });
        r
    }
}

pub fn retrieve_cmd(cfg: &RunConfig, query: &str) -> Result<dsrag::pipeline::RetrievalResult> {
    let ctx = RetrievalContext::load(cfg)?;
    let retriever = ctx.retriever();
    let s = &cfg.strategy;
    let mut result = retriever.retrieve(query, s.k_per_shard, s.k_merge)?;
    let reranker = cfg.reranker()?;
    if let Some(rr) = &reranker {
        result = retriever.rerank_stage(result, rr.as_ref() as &dyn Reranker, s.rerank_depth)?;
    }
    result.selected = s.selection.select(result.pool(), &ctx.shards, 0)?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub strategy: String,
    pub outputs: BTreeMap<String, String>,
}

pub fn resolve_template(cfg: &mut RunConfig) -> Result<()> {
    if let Some(path) = &cfg.template {
        cfg.strategy.template = PromptTemplate::load(path)?;
    }
    Ok(())
}

/// Runs the configured strategy and writes the resolved config, report,
/// per-subject CSV, audit log and run manifest into the run directory.
pub fn eval_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    let test_set = require_existing(cfg.test_set.as_ref(), "test set")?;
    let run_dir = require(cfg.run_dir.as_ref(), "run directory")?;
    if cfg.reader.is_none() {
        return Err(UsageError("a reader must be configured".into()).into());
    }
    let tasks = load_tasks(test_set, cfg.task_kind)?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let config_text = cfg.to_toml();
    write_atomic(&run_dir.join("config.toml"), config_text.as_bytes())?;

    let reader = cfg.reader()?;
    let judge = cfg.judge()?;
    let reranker = cfg.reranker()?;
    let ctx = if cfg.strategy.strategy.retrieves() {
        Some(RetrievalContext::load(cfg)?)
    } else {
        None
    };
    let services = Services {
        reader: reader.as_ref(),
        judge: judge.as_deref(),
        retriever: ctx.as_ref().map(RetrievalContext::retriever),
        reranker: reranker.as_deref(),
    };
    info!(strategy = %cfg.strategy.strategy, tasks = tasks.len(), workers = cfg.workers, "evaluating");
    let checkpoint = run_dir.join("checkpoint.jsonl");
    let run = run_eval(&tasks, &cfg.strategy, &services, Some(&checkpoint), cfg.workers)?;
    info!(executed = run.executed, restored = tasks.len() - run.executed, "evaluation finished");

    let mut outputs = BTreeMap::new();
    let report_path = run_dir.join("report.json");
    run.report.write(&report_path)?;
    outputs.insert("report.json".to_string(), sha256_file(&report_path)?);
    let csv_path = run_dir.join("subjects.csv");
    run.report.write_subject_csv(&csv_path)?;
    outputs.insert("subjects.csv".to_string(), sha256_file(&csv_path)?);
    let audit_path = run_dir.join("audit.jsonl");
    run.write_audit(&audit_path)?;
    outputs.insert("audit.jsonl".to_string(), sha256_file(&audit_path)?);
    if cfg.runs > 1 {
        let repeated = run_repeated(&tasks, &cfg.strategy, &services, cfg.runs, cfg.workers)?;
        let p = run_dir.join("repeated.json");
        write_atomic(&p, &json_bytes(&repeated))?;
        outputs.insert("repeated.json".to_string(), sha256_file(&p)?);
    }
    let manifest = RunManifest {
        config_sha256: cfg.hash(),
        strategy: cfg.strategy.strategy.to_string(),
        outputs,
    };
    write_atomic(&run_dir.join(MANIFEST), &json_bytes(&manifest))?;
    Ok(run.report)
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub points: PathBuf,
    pub baseline_label: String,
    pub category: Option<String>,
    pub ymin: Option<f64>,
    pub ymax: Option<f64>,
    /// Fixed curve instead of a fit.
    pub slope: Option<f64>,
    pub midpoint: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub curve: SigmoidCurve,
    pub fitted: bool,
    pub residual_ss: Option<f64>,
    pub iterations: Option<usize>,
    pub multipliers: BTreeMap<String, MultiplierReport>,
}

pub fn fit_cmd(args: &FitArgs) -> Result<FitOutput> {
    if !args.points.exists() {
        return Err(UsageError(format!("points file {} does not exist", args.points.display())).into());
    }
    let (ymin, ymax) = match (&args.category, args.ymin, args.ymax) {
        (_, Some(lo), Some(hi)) => (lo, hi),
        (Some(cat), lo, hi) => {
            let table = mmlu_category_bounds();
            let b = table
                .get(cat)
                .ok_or_else(|| UsageError(format!("unknown category {cat:?}; known: {:?}", table.keys().collect::<Vec<_>>())))?;
            (lo.unwrap_or(b.ymin), hi.unwrap_or(b.ymax))
        }
        _ => return Err(UsageError("give --category or both --ymin and --ymax".into()).into()),
    };
    let file = fs::File::open(&args.points)?;
    let points = read_points_csv(file)?;
    let (base, methods) = split_labeled(&points, &args.baseline_label)?;
    let (curve, residual_ss, iterations, fitted) = match (args.slope, args.midpoint) {
        (Some(a), Some(m)) => (SigmoidCurve::new(ymin, ymax, a, m)?, None, None, false),
        (None, None) => {
            let fit = fit_sigmoid(&base, ymin, ymax)?;
            (fit.curve, Some(fit.residual_ss), Some(fit.iterations), true)
        }
        _ => return Err(UsageError("--slope and --midpoint go together".into()).into()),
    };
    let multipliers = methods
        .iter()
        .map(|(label, rows)| Ok((label.clone(), multiplier_table(&curve, rows)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let output = FitOutput {
        curve,
        fitted,
        residual_ss,
        iterations,
        multipliers,
    };
    if let Some(dir) = &args.out {
        write_fit_outputs(dir, &output, &base)?;
    }
    Ok(output)
}

fn write_fit_outputs(dir: &Path, fit: &FitOutput, base: &[dsrag::scalinglaw::CurvePoint]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("fit.json"), &json_bytes(fit))?;

    let lo = base.iter().map(|p| p.flops).fold(f64::INFINITY, f64::min) / 10.0;
    let hi = base.iter().map(|p| p.flops).fold(0.0, f64::max) * 100.0;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["flops", "accuracy"])?;
    for (x, y) in sample_curve(&fit.curve, lo, hi, 200) {
        w.write_record([format!("{x:e}"), format!("{y:.6}")])?;
    }
    write_atomic(&dir.join("curve.csv"), &w.into_inner()?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "budget", "base_accuracy", "method_accuracy", "matched_compute", "ratio"])?;
    for (label, rep) in &fit.multipliers {
        for r in &rep.rows {
            w.write_record([
                label.clone(),
                format!("{:e}", r.budget),
                format!("{}", r.base_acc),
                format!("{}", r.method_acc),
                format!("{:e}", r.matched_compute),
                format!("{:.6}", r.ratio),
            ])?;
        }
    }
    write_atomic(&dir.join("multipliers.csv"), &w.into_inner()?)?;
    Ok(())
}

pub fn print_fit(fit: &FitOutput, out: &mut impl Write) -> std::io::Result<()> {
    let c = &fit.curve;
    writeln!(
        out,
        "curve: ymin {:.4} ymax {:.4} slope {:.5} midpoint 10^{:.4} = {:.4e}{}",
        c.ymin,
        c.ymax,
        c.slope,
        c.midpoint,
        10f64.powf(c.midpoint),
        if fit.fitted { "" } else { " (fixed)" }
    )?;
    for (label, rep) in &fit.multipliers {
        writeln!(out, "{label}:")?;
        writeln!(out, "  {:>10} {:>8} {:>8} {:>12} {:>8}", "budget", "base", "method", "matched", "ratio")?;
        for r in &rep.rows {
            writeln!(
                out,
                "  {:>10.3e} {:>8.4} {:>8.4} {:>12.3e} {:>8.2}",
                r.budget, r.base_acc, r.method_acc, r.matched_compute, r.ratio
            )?;
        }
        writeln!(
            out,
            "  mean {:.2}  geomean {:.2}  median {:.2}",
            rep.mean, rep.geometric_mean, rep.median
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: String,
    pub strategy: String,
    pub tasks: usize,
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
    pub categories: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_multiplier: Option<f64>,
}

/// Side-by-side summary of report files. With a fitted curve, each
/// strategy's macro accuracy is converted to a compute multiplier relative
/// to the baseline report.
pub fn report_cmd(reports: &[PathBuf], curve: Option<&Path>) -> Result<Vec<ReportRow>> {
    if reports.is_empty() {
        return Err(UsageError("at least one report is required".into()).into());
    }
    let mut rows = Vec::new();
    for p in reports {
        let r: EvalReport = serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?;
        rows.push(ReportRow {
            source: p.display().to_string(),
            strategy: r.strategy.to_string(),
            tasks: r.tasks,
            macro_accuracy: r.macro_accuracy,
            micro_accuracy: r.micro_accuracy,
            categories: r.category_rollup.unwrap_or_default(),
            compute_multiplier: None,
        });
    }
    if let Some(curve_path) = curve {
        let fit: FitOutput = serde_json::from_slice(&fs::read(curve_path)?)
            .with_context(|| format!("parsing {}", curve_path.display()))?;
        let Some(base) = rows.iter().find(|r| r.strategy == "baseline").map(|r| r.macro_accuracy) else {
            bail!("compute multipliers need a baseline report among the inputs");
        };
        let methods: Vec<(String, f64)> = rows
            .iter()
            .filter(|r| r.strategy != "baseline")
            .map(|r| (r.source.clone(), r.macro_accuracy))
            .collect();
        let eff: BTreeMap<String, f64> = method_efficiency(&fit.curve, base, &methods)?.into_iter().collect();
        for r in &mut rows {
            r.compute_multiplier = if r.strategy == "baseline" { Some(1.0) } else { eff.get(&r.source).copied() };
        }
    }
    Ok(rows)
}

pub fn print_report_rows(rows: &[ReportRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<24} {:>6} {:>8} {:>8} {:>10}  categories", "strategy", "tasks", "macro", "micro", "multiplier")?;
    for r in rows {
        let mult = r.compute_multiplier.map_or("-".to_string(), |m| format!("{m:.2}"));
        let cats: Vec<String> = r.categories.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        writeln!(
            out,
            "{:<24} {:>6} {:>8.4} {:>8.4} {:>10}  {}",
            r.strategy,
            r.tasks,
            r.macro_accuracy,
            r.micro_accuracy,
            mult,
            cats.join(" ")
        )?;
    }
    Ok(())
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let cats: std::collections::BTreeSet<&String> = rows.iter().flat_map(|r| r.categories.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string(), "strategy".into(), "tasks".into(), "macro".into(), "micro".into(), "multiplier".into()];
    header.extend(cats.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.source.clone(),
            r.strategy.clone(),
            r.tasks.to_string(),
            format!("{:.6}", r.macro_accuracy),
            format!("{:.6}", r.micro_accuracy),
            r.compute_multiplier.map_or(String::new(), |m| format!("{m:.6}")),
        ];
        rec.extend(cats.iter().map(|c| r.categories.get(*c).map_or(String::new(), |v| format!("{v:.6}"))));
        w.write_record(&rec)?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// The math preset window.
pub const MATH_PRESET: usize = MATH_NGRAM;
