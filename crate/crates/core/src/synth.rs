//! Deterministic topic-structured toy collection.
//!
//! Each document has a primary topic and sometimes a secondary one. Tokens
//! come from the topic vocabularies or a shared background vocabulary, with
//! Zipf-like weights inside each. Queries are a few terms of one topic.
//! Judgments: grade 2 for documents of the query's primary topic containing
//! at least half of the query terms, grade 1 for the rest of that topic.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, write_corpus, Document, Query, QuerySet};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::seeding;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub topics: usize,
    pub terms_per_topic: usize,
    pub background_terms: usize,
    pub docs: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// Chance a token comes from the primary topic.
    pub topic_token_rate: f64,
    /// Chance a document also draws from a secondary topic.
    pub secondary_topic_rate: f64,
    pub train_queries: usize,
    pub unlabeled_queries: usize,
    pub eval_queries: usize,
    pub min_query_len: usize,
    pub max_query_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            topics: 20,
            terms_per_topic: 30,
            background_terms: 400,
            docs: 2000,
            min_doc_len: 30,
            max_doc_len: 80,
            topic_token_rate: 0.35,
            secondary_topic_rate: 0.3,
            train_queries: 200,
            unlabeled_queries: 2000,
            eval_queries: 50,
            min_query_len: 2,
            max_query_len: 4,
            seed: 2017,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCollection {
    pub docs: Vec<Document>,
    /// Queries for teacher training. Judged, for the fully supervised setup.
    pub train_queries: QuerySet,
    pub train_qrels: Qrels,
    /// Unjudged queries for the student.
    pub unlabeled_queries: QuerySet,
    pub eval_queries: QuerySet,
    pub eval_qrels: Qrels,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn make_words(count: usize, rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("non-empty vocabulary")
}

struct Topics {
    words: Vec<Vec<String>>,
    background: Vec<String>,
}

pub fn generate(config: &ToyConfig) -> Result<ToyCollection> {
    let mut rng = seeding::stream_rng(config.seed, 0);
    let mut taken = BTreeSet::new();
    let topics = Topics {
        words: (0..config.topics)
            .map(|_| make_words(config.terms_per_topic, &mut rng, &mut taken))
            .collect(),
        background: make_words(config.background_terms, &mut rng, &mut taken),
    };
    let topic_dist = zipf(config.terms_per_topic);
    let bg_dist = zipf(config.background_terms);

    let mut doc_rng = seeding::stream_rng(config.seed, 1);
    let mut doc_topics = Vec::with_capacity(config.docs);
    let mut docs = Vec::with_capacity(config.docs);
    for i in 0..config.docs {
        let primary = i % config.topics;
        let secondary = if doc_rng.gen::<f64>() < config.secondary_topic_rate {
            Some((primary + doc_rng.gen_range(1..config.topics)) % config.topics)
        } else {
            None
        };
        let len = doc_rng.gen_range(config.min_doc_len..=config.max_doc_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let r: f64 = doc_rng.gen();
            let word = if r < config.topic_token_rate {
                &topics.words[primary][topic_dist.sample(&mut doc_rng)]
            } else if r < config.topic_token_rate * 1.5 && secondary.is_some() {
                &topics.words[secondary.unwrap()][topic_dist.sample(&mut doc_rng)]
            } else {
                &topics.background[bg_dist.sample(&mut doc_rng)]
            };
            words.push(word.as_str());
        }
        doc_topics.push(primary);
        docs.push(Document::new(format!("D{i:05}"), words.join(" ")));
    }

    let doc_terms: Vec<BTreeSet<String>> = docs.iter().map(|d| tokenize(&d.text).into_iter().collect()).collect();

    let make_queries = |prefix: &str, count: usize, stream: u64| -> Result<(QuerySet, Qrels)> {
        let mut qrng = seeding::stream_rng(config.seed, stream);
        let mut queries = Vec::with_capacity(count);
        let mut qrels = Qrels::new();
        for i in 0..count {
            let topic = qrng.gen_range(0..config.topics);
            let len = qrng.gen_range(config.min_query_len..=config.max_query_len);
            let mut terms: Vec<String> = Vec::with_capacity(len);
            while terms.len() < len {
                // Skip the two most frequent topic terms so queries are not trivial.
                let k = qrng.gen_range(2..config.terms_per_topic.min(15).max(3));
                let w = &topics.words[topic][k];
                if !terms.contains(w) {
                    terms.push(w.clone());
                }
            }
            let id = format!("{prefix}{i:04}");
            for (d, doc) in docs.iter().enumerate() {
                if doc_topics[d] != topic {
                    continue;
                }
                let present = terms.iter().filter(|t| doc_terms[d].contains(*t)).count();
                let grade = if 2 * present >= terms.len() { 2 } else { 1 };
                qrels.insert(&id, &doc.id, grade)?;
            }
            queries.push(Query { id, terms });
        }
        Ok((QuerySet::new(queries)?, qrels))
    };

    let (train_queries, train_qrels) = make_queries("T", config.train_queries, 2)?;
    let (unlabeled_queries, _) = make_queries("U", config.unlabeled_queries, 3)?;
    let (eval_queries, eval_qrels) = make_queries("E", config.eval_queries, 4)?;
    Ok(ToyCollection {
        docs,
        train_queries,
        train_qrels,
        unlabeled_queries,
        eval_queries,
        eval_qrels,
    })
}

pub fn format_queries(queries: &QuerySet) -> String {
    let mut out = String::new();
    for q in queries.iter() {
        let _ = writeln!(out, "{}\t{}", q.id, q.terms.join(" "));
    }
    out
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, docs) in qrels.queries() {
        for (d, g) in docs {
            let _ = writeln!(out, "{q} 0 {d} {g}");
        }
    }
    out
}

/// Model settings sized for the toy collection: the reference layer count,
/// learning rate and teacher dropout, with small widths so a full run takes
/// seconds on one core.
pub const TOY_RUN_CONFIG: &str = "\
teacher.embedding_dim = 32
teacher.hidden_size = 64
teacher.batch_size = 64
teacher.epochs = 10
student.embedding_dim = 32
student.hidden_size = 32
student.dropout = 0
student.batch_size = 64
student.epochs = 10
";

/// File names [`write_fixture`] uses, relative to its directory.
pub const FIXTURE_FILES: [(&str, &str); 6] = [
    ("corpus", "corpus.jsonl"),
    ("queries.train", "queries_train.tsv"),
    ("qrels.train", "qrels_train.txt"),
    ("queries.unlabeled", "queries_unlabeled.tsv"),
    ("queries.eval", "queries_eval.tsv"),
    ("qrels", "qrels_eval.txt"),
];

/// Writes the collection into `dir` plus a `toy.conf` pointing at it.
///
/// The config sets only paths and `seed`; `extra` lines are appended as-is.
pub fn write_fixture(dir: &Path, toy: &ToyCollection, seed: u64, extra: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let contents = [
        write_corpus(&toy.docs),
        format_queries(&toy.train_queries),
        format_qrels(&toy.train_qrels),
        format_queries(&toy.unlabeled_queries),
        format_queries(&toy.eval_queries),
        format_qrels(&toy.eval_qrels),
    ];
    let mut conf = String::new();
    for ((key, file), text) in FIXTURE_FILES.iter().zip(contents) {
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(conf, "{key} = {file}");
    }
    let _ = writeln!(conf, "seed = {seed}");
    conf.push_str(extra);
    let path = dir.join("toy.conf");
    std::fs::write(&path, conf).map_err(|e| Error::io(&path, e))
}
