use dsrag::clients::{Embedder, FnReader, HashEmbedder, OverlapReranker};
use dsrag::consistency::TaskKind;
use dsrag::corpus::{DefaultTokenizer, Document};
use dsrag::decontam::build_filter;
use dsrag::evalharness::{run_eval, EvalTask, Services, Strategy, StrategyConfig};
use dsrag::index::{dot, EmbeddingVector, ShardIndex};
use dsrag::pipeline::{bag_sample, select_mmr, DocStore, Exclusion, Retriever, SelectionPolicy};

const VOCAB: &[&str] = &[
    "river", "stone", "cloud", "engine", "garden", "signal", "copper", "violin", "harbor", "lantern", "meadow",
    "circuit", "falcon", "glacier", "orchard", "prism",
];

fn synthetic_docs(n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..6).map(|j| VOCAB[(i * 7 + j * j * 3 + i / 5) % VOCAB.len()]).collect();
            let dataset = ["web", "wiki", "code"][i % 3];
            Document::new(format!("doc{i:04}"), dataset, format!("{} {i}", words.join(" ")), &DefaultTokenizer)
        })
        .collect()
}

fn embed_shard(e: &HashEmbedder, docs: &[&Document], dataset: &str) -> ShardIndex {
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let vecs = e.embed(&texts).unwrap();
    ShardIndex::build(e.dims, docs.iter().map(|d| d.id.clone()).zip(vecs), dataset, true).unwrap()
}

#[test]
fn sharded_retrieval_equals_single_index() {
    let e = HashEmbedder::new(32, 11);
    let docs = synthetic_docs(300);
    let store = DocStore::new(docs.clone());
    let shards: Vec<ShardIndex> = ["code", "web", "wiki"]
        .iter()
        .map(|ds| embed_shard(&e, &docs.iter().filter(|d| d.dataset == *ds).collect::<Vec<_>>(), ds))
        .collect();
    let single = [embed_shard(&e, &docs.iter().collect::<Vec<_>>(), "all")];
    for q in ["river stone engine", "falcon glacier 17", "prism orchard lantern meadow"] {
        let a = Retriever::new(&shards, &e, &store).retrieve(q, 100, 100).unwrap();
        let b = Retriever::new(&single, &e, &store).retrieve(q, 100, 100).unwrap();
        let key = |r: &dsrag::pipeline::RetrievalResult| -> Vec<(String, f32)> {
            r.candidates.iter().map(|c| (c.doc_id.clone(), c.score)).collect()
        };
        assert_eq!(key(&a), key(&b), "query {q}");
    }
}

#[test]
fn exact_match_document_ranks_first() {
    let e = HashEmbedder::new(32, 2);
    let docs = synthetic_docs(60);
    let store = DocStore::new(docs.clone());
    let shard = [embed_shard(&e, &docs.iter().collect::<Vec<_>>(), "all")];
    let target = &docs[23];
    let r = Retriever::new(&shard, &e, &store).retrieve(&target.text, 10, 10).unwrap();
    assert_eq!(r.candidates[0].doc_id, target.id);
    assert!((r.candidates[0].score - 1.0).abs() < 1e-5);
}

#[test]
fn overlap_reranker_lifts_the_literal_phrase() {
    let e = HashEmbedder::new(32, 5);
    let mut docs = synthetic_docs(40);
    docs.push(Document::new("needle", "web", "who painted the night watch", &DefaultTokenizer));
    let store = DocStore::new(docs.clone());
    let shard = [embed_shard(&e, &docs.iter().collect::<Vec<_>>(), "all")];
    let r = Retriever::new(&shard, &e, &store);
    let res = r.retrieve("who painted the night watch", 41, 41).unwrap();
    let reranked = r.rerank_stage(res, &OverlapReranker, 41).unwrap();
    assert_eq!(reranked.pool()[0].doc_id, "needle");
    let again = r.rerank_stage(reranked.clone(), &OverlapReranker, 41).unwrap();
    assert_eq!(again.pool(), reranked.pool());
}

#[test]
fn post_retrieval_exclusion_drops_overlapping_documents() {
    let e = HashEmbedder::new(32, 5);
    let docs = vec![
        Document::new("leak", "web", "the quick brown fox jumps over the lazy dog today", &DefaultTokenizer),
        Document::new("clean", "web", "a quick survey of foxes and dogs", &DefaultTokenizer),
    ];
    let store = DocStore::new(docs.clone());
    let shard = [embed_shard(&e, &docs.iter().collect::<Vec<_>>(), "all")];
    let filter = build_filter(&["quick brown fox jumps over the lazy dog"], 8, &DefaultTokenizer, "t").unwrap();
    let mut r = Retriever::new(&shard, &e, &store);
    r.exclusion = Some(Exclusion {
        filter: &filter,
        tokenizer: &DefaultTokenizer,
    });
    let res = r.retrieve("quick brown fox", 10, 10).unwrap();
    let ids: Vec<&str> = res.candidates.iter().map(|c| c.doc_id.as_str()).collect();
    assert_eq!(ids, ["clean"]);
    assert_eq!(res.provenance.excluded, ["leak"]);
}

#[test]
fn mmr_matches_brute_force_on_duplicates() {
    let q = [1.0f32, 0.0, 0.0];
    let dup = EmbeddingVector(vec![0.9, 0.435_889_9, 0.0]).normalized();
    let distinct = EmbeddingVector(vec![0.6, 0.0, 0.8]).normalized();
    let shard = ShardIndex::build(
        3,
        [("dup1".to_string(), dup.clone()), ("dup2".to_string(), dup), ("other".to_string(), distinct)],
        "x",
        true,
    )
    .unwrap();
    let pool = shard.search(&q, 3, 0).unwrap();
    let lambda = 0.5f32;
    let picked = select_mmr(&pool, std::slice::from_ref(&shard), lambda, 2).unwrap();

    // Best pair under relevance minus pairwise redundancy.
    let value = |i: usize, j: usize| {
        lambda * (pool[i].score + pool[j].score)
            - (1.0 - lambda) * dot(shard.vector(pool[i].row as usize), shard.vector(pool[j].row as usize))
    };
    let best = (0..3)
        .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
        .map(|(i, j)| value(i, j))
        .fold(f32::NEG_INFINITY, f32::max);
    let pos = |id: &str| pool.iter().position(|c| c.doc_id == id).unwrap();
    let got: Vec<&str> = picked.iter().map(|d| d.doc_id.as_str()).collect();
    // The two duplicates tie, so either may come first.
    assert!(got[0].starts_with("dup"));
    assert_eq!(got[1], "other");
    assert!((value(pos(got[0]), pos(got[1])) - best).abs() < 1e-6);

    let whole = select_mmr(&pool, std::slice::from_ref(&shard), lambda, 10).unwrap();
    assert_eq!(whole.len(), 3);
}

#[test]
fn bagging_is_uniform() {
    let shard = ShardIndex::build(
        2,
        (0..10).map(|i| (format!("d{i}"), EmbeddingVector(vec![1.0, i as f32]))),
        "x",
        false,
    )
    .unwrap();
    let pool = shard.search(&[1.0, 0.0], 10, 0).unwrap();
    let mut counts = [0usize; 10];
    let draws = 10_000;
    for t in 0..draws {
        for d in bag_sample(&pool, 3, t, 99).unwrap() {
            counts[d.row as usize] += 1;
        }
    }
    for (i, c) in counts.iter().enumerate() {
        let f = *c as f64 / draws as f64;
        assert!((f - 0.3).abs() <= 0.02, "doc {i} frequency {f}");
    }
}

#[test]
fn zero_documents_reduces_to_baseline() {
    let e = HashEmbedder::new(16, 1);
    let docs = synthetic_docs(30);
    let store = DocStore::new(docs.clone());
    let shard = [embed_shard(&e, &docs.iter().collect::<Vec<_>>(), "all")];
    let reader = FnReader::new(|p, _, rng| {
        let letters = ["A", "B", "C", "D"];
        let i = (p.len() + rand::Rng::random_range(rng, 0..4)) % 4;
        format!("The answer is ({})", letters[i])
    });
    let tasks: Vec<EvalTask> = (0..8)
        .map(|i| EvalTask {
            id: format!("q{i}"),
            subject: "s".into(),
            kind: TaskKind::MultipleChoice,
            question: format!("river engine {i}?"),
            choices: Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
            gold: "A".into(),
        })
        .collect();
    let base = run_eval(
        &tasks,
        &StrategyConfig::for_strategy(Strategy::Baseline),
        &Services::reader_only(&reader),
        None,
        2,
    )
    .unwrap();
    let cfg = StrategyConfig {
        selection: SelectionPolicy::top_k(0),
        ..StrategyConfig::for_strategy(Strategy::Retrieval)
    };
    let services = Services {
        retriever: Some(Retriever::new(&shard, &e, &store)),
        ..Services::reader_only(&reader)
    };
    let zero = run_eval(&tasks, &cfg, &services, None, 2).unwrap();
    for (a, b) in base.audit.iter().zip(&zero.audit) {
        assert_eq!(a.trials, b.trials);
    }
    let preds = |r: &dsrag::evalharness::EvalReport| -> Vec<Option<String>> {
        r.per_task.values().map(|t| t.predicted.clone()).collect()
    };
    assert_eq!(preds(&base.report), preds(&zero.report));
}
