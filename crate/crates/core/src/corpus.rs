//! Tokenization, the inverted index, IDF and BM25 weak supervision.
//!
//! The index keeps both directions: postings per term for retrieval and a
//! per-document bag of `(term, tf)` pairs that the neural ranker reads when
//! it builds document representations.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::TrainingInstance;
use crate::seeding;

/// BM25 term-frequency saturation.
pub const BM25_K1: f64 = 1.2;
/// BM25 length normalization.
pub const BM25_B: f64 = 0.75;

/// Extra draws allowed per requested pair when tied labels are discarded.
pub const TIE_RETRIES_PER_PAIR: usize = 2;

/// Lowercases `text` and splits it on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Bijection between term strings and dense indices `0..len()`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from terms in the given order, skipping repeats.
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::new();
        for t in terms {
            vocab.insert(t.into());
        }
        vocab
    }

    /// Returns the index of `term`, assigning the next free one if unseen.
    pub fn insert(&mut self, term: String) -> u32 {
        if let Some(&id) = self.lookup.get(&term) {
            return id;
        }
        let id = self.terms.len() as u32;
        self.lookup.insert(term.clone(), id);
        self.terms.push(term);
        id
    }

    pub fn get(&self, term: &str) -> Option<u32> {
        self.lookup.get(term).copied()
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    vocabulary: Vocabulary,
    doc_ids: Vec<String>,
    doc_lookup: HashMap<String, u32>,
    /// Forward index: per document, `(term, tf)` sorted by term.
    doc_terms: Vec<Vec<(u32, u32)>>,
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
}

/// Builds the index. Document indices follow input order.
pub fn build_index(documents: &[Document]) -> Result<InvertedIndex> {
    let mut vocabulary = Vocabulary::new();
    let mut doc_ids = Vec::with_capacity(documents.len());
    let mut doc_lookup = HashMap::with_capacity(documents.len());
    let mut doc_terms = Vec::with_capacity(documents.len());

    for (i, doc) in documents.iter().enumerate() {
        if doc.id.is_empty() {
            return Err(Error::Invalid(format!("document {i} has an empty id")));
        }
        if doc_lookup.insert(doc.id.clone(), i as u32).is_some() {
            return Err(Error::DuplicateDocId(doc.id.clone()));
        }
        doc_ids.push(doc.id.clone());
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for tok in tokenize(&doc.text) {
            *counts.entry(vocabulary.insert(tok)).or_default() += 1;
        }
        let mut bag: Vec<(u32, u32)> = counts.into_iter().collect();
        bag.sort_unstable();
        doc_terms.push(bag);
    }

    Ok(InvertedIndex::assemble(vocabulary, doc_ids, doc_lookup, doc_terms))
}

impl InvertedIndex {
    fn assemble(
        vocabulary: Vocabulary,
        doc_ids: Vec<String>,
        doc_lookup: HashMap<String, u32>,
        doc_terms: Vec<Vec<(u32, u32)>>,
    ) -> Self {
        let mut postings = vec![Vec::new(); vocabulary.len()];
        let mut doc_lengths = Vec::with_capacity(doc_terms.len());
        for (d, bag) in doc_terms.iter().enumerate() {
            let mut len = 0u32;
            for &(term, tf) in bag {
                postings[term as usize].push(Posting { doc: d as u32, tf });
                len += tf;
            }
            doc_lengths.push(len);
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        InvertedIndex {
            vocabulary,
            doc_ids,
            doc_lookup,
            doc_terms,
            postings,
            doc_lengths,
            avg_doc_length,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn doc_id(&self, doc: usize) -> Option<&str> {
        self.doc_ids.get(doc).map(String::as_str)
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_index(&self, doc_id: &str) -> Option<usize> {
        self.doc_lookup.get(doc_id).map(|&d| d as usize)
    }

    /// `(term, tf)` pairs of a document, sorted by term index.
    pub fn doc_terms(&self, doc: usize) -> &[(u32, u32)] {
        &self.doc_terms[doc]
    }

    /// Postings of `term`, sorted by document index. Unseen terms have none.
    pub fn postings(&self, term: &str) -> &[Posting] {
        match self.vocabulary.get(term) {
            Some(id) => &self.postings[id as usize],
            None => &[],
        }
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    fn tf(&self, term: u32, doc: usize) -> u32 {
        let bag = &self.doc_terms[doc];
        match bag.binary_search_by_key(&term, |&(t, _)| t) {
            Ok(pos) => bag[pos].1,
            Err(_) => 0,
        }
    }

    fn check_doc(&self, doc: usize) -> Result<()> {
        if doc >= self.doc_count() {
            return Err(Error::DocIndexOutOfRange {
                index: doc,
                count: self.doc_count(),
            });
        }
        Ok(())
    }

    /// Smoothed IDF `ln((N + 1) / (df + 1))`, used to initialize term weights.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_freq(term) as f64;
        ((n + 1.0) / (df + 1.0)).ln()
    }

    fn bm25_idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn bm25_term(&self, df: usize, tf: u32, doc: usize) -> f64 {
        let tf = f64::from(tf);
        let dl = f64::from(self.doc_lengths[doc]);
        let norm = 1.0 - BM25_B + BM25_B * dl / self.avg_doc_length;
        self.bm25_idf(df) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
    }

    /// BM25 score of one document. Repeated query terms count once per occurrence.
    pub fn bm25_score<S: AsRef<str>>(&self, query: &[S], doc: usize) -> Result<f64> {
        self.check_doc(doc)?;
        let mut score = 0.0;
        for term in query {
            let Some(id) = self.vocabulary.get(term.as_ref()) else {
                continue;
            };
            let tf = self.tf(id, doc);
            if tf > 0 {
                score += self.bm25_term(self.postings[id as usize].len(), tf, doc);
            }
        }
        Ok(score)
    }

    /// Documents matching at least one query term, best first, at most `depth`.
    ///
    /// Ties are broken by ascending document id. Scores are bitwise equal to
    /// [`InvertedIndex::bm25_score`] since contributions accumulate in query order.
    pub fn retrieve<S: AsRef<str>>(&self, query: &[S], depth: usize) -> Vec<(usize, f64)> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in query {
            let Some(id) = self.vocabulary.get(term.as_ref()) else {
                continue;
            };
            let plist = &self.postings[id as usize];
            for p in plist {
                *acc.entry(p.doc).or_insert(0.0) += self.bm25_term(plist.len(), p.tf, p.doc as usize);
            }
        }
        let mut hits: Vec<(usize, f64)> = acc.into_iter().map(|(d, s)| (d as usize, s)).collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        hits.truncate(depth);
        hits
    }

    /// Document indices of [`InvertedIndex::retrieve`], without scores.
    pub fn candidate_pool<S: AsRef<str>>(&self, query: &[S], depth: usize) -> Vec<usize> {
        self.retrieve(query, depth).into_iter().map(|(d, _)| d).collect()
    }

    pub(crate) fn from_parts(
        vocabulary: Vocabulary,
        doc_ids: Vec<String>,
        doc_terms: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        let mut doc_lookup = HashMap::with_capacity(doc_ids.len());
        for (i, id) in doc_ids.iter().enumerate() {
            if doc_lookup.insert(id.clone(), i as u32).is_some() {
                return Err(Error::DuplicateDocId(id.clone()));
            }
        }
        for bag in &doc_terms {
            if bag.iter().any(|&(t, tf)| t as usize >= vocabulary.len() || tf == 0) {
                return Err(Error::Checkpoint("document bag references an invalid term".into()));
            }
            if bag.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Checkpoint("document bag is not sorted".into()));
            }
        }
        Ok(Self::assemble(vocabulary, doc_ids, doc_lookup, doc_terms))
    }
}

const INDEX_MAGIC: &[u8; 4] = b"MRIX";
pub const INDEX_VERSION: u32 = 1;

impl InvertedIndex {
    /// Binary image: magic `MRIX`, version, vocabulary in index order, then per
    /// document its id and `(term, tf)` bag. Postings and statistics are
    /// rebuilt on load.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u64(self.vocabulary.len() as u64);
        for t in self.vocabulary.terms() {
            w.str(t);
        }
        w.u64(self.doc_ids.len() as u64);
        for (id, bag) in self.doc_ids.iter().zip(&self.doc_terms) {
            w.str(id);
            w.u32(bag.len() as u32);
            for &(t, tf) in bag {
                w.u32(t);
                w.u32(tf);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Checkpoint(format!("unsupported index version {version}")));
        }
        let n_terms = r.u64()? as usize;
        let mut vocabulary = Vocabulary::new();
        for _ in 0..n_terms {
            vocabulary.insert(r.str()?);
        }
        if vocabulary.len() != n_terms {
            return Err(Error::Checkpoint("index vocabulary repeats a term".into()));
        }
        let n_docs = r.u64()? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_terms = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            doc_ids.push(r.str()?);
            let len = r.u32()? as usize;
            let mut bag = Vec::with_capacity(len.min(1 << 16));
            for _ in 0..len {
                bag.push((r.u32()?, r.u32()?));
            }
            doc_terms.push(bag);
        }
        r.finish()?;
        Self::from_parts(vocabulary, doc_ids, doc_terms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub terms: Vec<String>,
}

/// Ordered queries with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let mut seen = HashSet::new();
        for q in &queries {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::DuplicateQueryId(q.id.clone()));
            }
        }
        Ok(QuerySet { queries })
    }

    /// Tokenizes raw `(id, text)` pairs.
    pub fn from_texts<I, A, B>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: AsRef<str>,
    {
        Self::new(
            items
                .into_iter()
                .map(|(id, text)| Query {
                    id: id.into(),
                    terms: tokenize(text.as_ref()),
                })
                .collect(),
        )
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn get(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }
}

/// Instances produced by an annotation pass plus what was left out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotation {
    pub instances: Vec<TrainingInstance>,
    /// Queries whose candidate pool held fewer than two documents.
    pub skipped_queries: Vec<String>,
    /// Sampled pairs dropped because both labels were equal.
    pub discarded_ties: usize,
}

/// Parameters shared by every pool-and-pair annotation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSampling {
    pub pool_size: usize,
    pub pairs_per_query: usize,
    pub seed: u64,
}

impl PairSampling {
    pub fn new(pool_size: usize, pairs_per_query: usize, seed: u64) -> Result<Self> {
        if pool_size < 2 {
            return Err(Error::Config(format!("pool_size must be at least 2, got {pool_size}")));
        }
        Ok(PairSampling {
            pool_size,
            pairs_per_query,
            seed,
        })
    }
}

/// Scores every document of a query's candidate pool.
///
/// Called once per query with the query's position in its set, its terms, and
/// the pooled document indices in BM25 order. Returns one score per document.
pub trait PoolScorer: Sync {
    fn score_pool(&self, query_pos: usize, query: &[String], pool: &[usize]) -> Result<Vec<f64>>;
}

/// BM25 as a pool scorer.
pub struct Bm25Scorer<'a>(pub &'a InvertedIndex);

impl PoolScorer for Bm25Scorer<'_> {
    fn score_pool(&self, _query_pos: usize, query: &[String], pool: &[usize]) -> Result<Vec<f64>> {
        pool.iter().map(|&d| self.0.bm25_score(query, d)).collect()
    }
}

/// Weak supervision: BM25 pools each query and labels sampled pairs with BM25 scores.
pub fn annotate_queries(
    index: &InvertedIndex,
    queries: &QuerySet,
    pool_size: usize,
    pairs_per_query: usize,
    seed: u64,
) -> Result<Annotation> {
    let sampling = PairSampling::new(pool_size, pairs_per_query, seed)?;
    annotate_with(index, queries, sampling, &Bm25Scorer(index))
}

/// Pools each query with BM25, labels the pool with `labeler`, and samples
/// unordered pairs without replacement. Every query draws from its own
/// seeded stream so results do not depend on the worker count.
pub fn annotate_with(
    index: &InvertedIndex,
    queries: &QuerySet,
    sampling: PairSampling,
    labeler: &dyn PoolScorer,
) -> Result<Annotation> {
    let per_query: Vec<Result<QueryAnnotation>> = queries
        .queries()
        .par_iter()
        .enumerate()
        .map(|(pos, query)| annotate_one(index, pos, query, sampling, labeler))
        .collect();

    let mut out = Annotation::default();
    for (result, query) in per_query.into_iter().zip(queries.iter()) {
        match result? {
            QueryAnnotation::Skipped => out.skipped_queries.push(query.id.clone()),
            QueryAnnotation::Pairs { instances, ties } => {
                out.instances.extend(instances);
                out.discarded_ties += ties;
            }
        }
    }
    Ok(out)
}

enum QueryAnnotation {
    Skipped,
    Pairs {
        instances: Vec<TrainingInstance>,
        ties: usize,
    },
}

fn annotate_one(
    index: &InvertedIndex,
    pos: usize,
    query: &Query,
    sampling: PairSampling,
    labeler: &dyn PoolScorer,
) -> Result<QueryAnnotation> {
    let pool = index.candidate_pool(&query.terms, sampling.pool_size);
    if pool.len() < 2 {
        return Ok(QueryAnnotation::Skipped);
    }
    let labels = labeler.score_pool(pos, &query.terms, &pool)?;
    if labels.len() != pool.len() {
        return Err(Error::Dimension(format!(
            "labeler returned {} labels for a pool of {}",
            labels.len(),
            pool.len()
        )));
    }

    let mut rng = seeding::stream_rng(sampling.seed, pos as u64);
    let pairs = sample_pairs(pool.len(), &mut rng, |i, j| labels[i] != labels[j], sampling.pairs_per_query);

    let instances = pairs
        .accepted
        .into_iter()
        .map(|(i, j)| TrainingInstance {
            query_id: query.id.clone(),
            query: query.terms.clone(),
            doc1: index.doc_ids[pool[i]].clone(),
            doc2: index.doc_ids[pool[j]].clone(),
            s1: labels[i],
            s2: labels[j],
        })
        .collect();
    Ok(QueryAnnotation::Pairs {
        instances,
        ties: pairs.rejected,
    })
}

pub(crate) struct SampledPairs {
    pub accepted: Vec<(usize, usize)>,
    pub rejected: usize,
}

/// Draws unordered pairs `(i, j)`, `i < j < n`, uniformly without replacement
/// until `wanted` pass `keep` or the retry budget is spent.
pub(crate) fn sample_pairs<R: Rng>(
    n: usize,
    rng: &mut R,
    keep: impl Fn(usize, usize) -> bool,
    wanted: usize,
) -> SampledPairs {
    let total = n * n.saturating_sub(1) / 2;
    let budget = total.min(wanted.saturating_mul(1 + TIE_RETRIES_PER_PAIR));
    let mut seen = HashSet::with_capacity(budget);
    let mut out = SampledPairs {
        accepted: Vec::with_capacity(wanted.min(total)),
        rejected: 0,
    };
    let mut draws = 0;
    while out.accepted.len() < wanted && draws < budget {
        let k = rng.gen_range(0..total);
        if !seen.insert(k) {
            continue;
        }
        draws += 1;
        let (i, j) = unrank_pair(k, n);
        if keep(i, j) {
            out.accepted.push((i, j));
        } else {
            out.rejected += 1;
        }
    }
    out
}

/// Maps `k` in `0..n(n-1)/2` to the k-th pair `(i, j)` with `i < j` in row order.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    text: String,
}

/// Parses line-delimited `{"id": ..., "text": ...}` records. Blank lines are skipped.
pub fn parse_corpus(text: &str, context: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(context, n + 1, e.to_string()))?;
        docs.push(Document {
            id: rec.id,
            text: rec.text,
        });
    }
    Ok(docs)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn write_corpus(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        let line = serde_json::json!({ "id": d.id, "text": d.text });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Parses `query_id<TAB>query text` lines.
pub fn parse_queries(text: &str, context: &str) -> Result<QuerySet> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(context, n + 1, "expected `query_id<TAB>text`"))?;
        if id.is_empty() {
            return Err(Error::parse(context, n + 1, "empty query id"));
        }
        items.push(Query {
            id: id.to_string(),
            terms: tokenize(body),
        });
    }
    QuerySet::new(items)
}

pub fn read_queries(path: &Path) -> Result<QuerySet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_queries(&text, &path.display().to_string())
}

/// Renders instances as `query_id doc1 doc2 s1 s2`, tab-separated, 6 decimals.
pub fn format_annotations(instances: &[TrainingInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            inst.query_id, inst.doc1, inst.doc2, inst.s1, inst.s2
        );
    }
    out
}

/// Reads annotation lines back, resolving query terms through `queries`.
///
/// Lines whose printed labels are equal are dropped and counted.
pub fn parse_annotations(text: &str, queries: &QuerySet, context: &str) -> Result<Annotation> {
    let lookup: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut out = Annotation::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(context, n + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let query = lookup
            .get(fields[0])
            .ok_or_else(|| Error::parse(context, n + 1, format!("unknown query id `{}`", fields[0])))?;
        let parse_score = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(context, n + 1, format!("bad score `{s}`")))
        };
        let s1 = parse_score(fields[3])?;
        let s2 = parse_score(fields[4])?;
        if s1 == s2 {
            out.discarded_ties += 1;
            continue;
        }
        out.instances.push(TrainingInstance {
            query_id: query.id.clone(),
            query: query.terms.clone(),
            doc1: fields[1].to_string(),
            doc2: fields[2].to_string(),
            s1,
            s2,
        });
    }
    Ok(out)
}
