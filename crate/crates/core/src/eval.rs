//! TREC-style evaluation: MAP, P@k and nDCG@k over run files and qrels.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Cutoff used for the P@k and nDCG@k columns.
pub const CUTOFF: usize = 20;

/// Relevance judgments: query -> doc -> grade. Grade >= 1 counts as relevant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment; a second grade for the same pair is rejected.
    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) -> Result<()> {
        let q = self.judgments.entry(query.to_string()).or_default();
        if q.insert(doc.to_string(), grade).is_some() {
            return Err(Error::Invalid(format!("duplicate judgment for ({query}, {doc})")));
        }
        Ok(())
    }

    pub fn query(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, u32>)> {
        self.judgments.iter()
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

/// Ranked output per query. Entries are kept in rank order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunList {
    queries: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a query's ranking. Entries must already be in rank order.
    pub fn insert(&mut self, query: &str, ranked: Vec<(String, f64)>) -> Result<()> {
        let mut seen = HashSet::new();
        for (doc, _) in &ranked {
            if !seen.insert(doc.as_str()) {
                return Err(Error::Invalid(format!("document `{doc}` ranked twice for query `{query}`")));
            }
        }
        if ranked.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::Invalid(format!("scores for query `{query}` are not non-increasing")));
        }
        self.queries.insert(query.to_string(), ranked);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&[(String, f64)]> {
        self.queries.get(query).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &Vec<(String, f64)>)> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

fn grade(judged: &BTreeMap<String, u32>, doc: &str) -> u32 {
    judged.get(doc).copied().unwrap_or(0)
}

fn relevant_count(judged: &BTreeMap<String, u32>) -> usize {
    judged.values().filter(|&&g| g >= 1).count()
}

/// Mean of precision at each relevant retrieved document, divided by the
/// total number of relevant documents. Zero when nothing is relevant.
pub fn average_precision<S: AsRef<str>>(run: &[S], judged: &BTreeMap<String, u32>) -> f64 {
    let total = relevant_count(judged);
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, doc) in run.iter().enumerate() {
        if grade(judged, doc.as_ref()) >= 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

/// Relevant documents in the top `k`, divided by `k` even for shorter runs.
pub fn precision_at_k<S: AsRef<str>>(run: &[S], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = run
        .iter()
        .take(k)
        .filter(|d| grade(judged, d.as_ref()) >= 1)
        .count();
    hits as f64 / k as f64
}

/// DCG@k with raw-grade gain and `log2(rank + 1)` discount, normalized by the
/// DCG of the judged grades sorted descending.
pub fn ndcg_at_k<S: AsRef<str>>(run: &[S], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg: f64 = run
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| f64::from(grade(judged, d.as_ref())) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| f64::from(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub average_precision: f64,
    pub precision: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Leave queries without relevant documents out of the means.
    pub skip_empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub map: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub query_count: usize,
    /// Run queries without judgments.
    pub unjudged_queries: Vec<String>,
}

impl MetricReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.query_count == 0 {
            out.push("no queries were evaluated".to_string());
        }
        if !self.unjudged_queries.is_empty() {
            out.push(format!(
                "{} run queries have no judgments and were ignored",
                self.unjudged_queries.len()
            ));
        }
        out
    }
}

/// Evaluates every run query that has judgments; means are arithmetic over them.
pub fn evaluate(run: &RunList, qrels: &Qrels, options: EvalOptions) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut unjudged = Vec::new();
    for (qid, ranked) in run.queries() {
        let Some(judged) = qrels.query(qid) else {
            unjudged.push(qid.clone());
            continue;
        };
        if options.skip_empty && relevant_count(judged) == 0 {
            continue;
        }
        let docs: Vec<&str> = ranked.iter().map(|(d, _)| d.as_str()).collect();
        per_query.insert(
            qid.clone(),
            QueryMetrics {
                average_precision: average_precision(&docs, judged),
                precision: precision_at_k(&docs, judged, CUTOFF),
                ndcg: ndcg_at_k(&docs, judged, CUTOFF),
            },
        );
    }
    let n = per_query.len();
    let mean = |f: fn(&QueryMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_query.values().map(f).sum::<f64>() / n as f64
        }
    };
    MetricReport {
        map: mean(|m| m.average_precision),
        precision: mean(|m| m.precision),
        ndcg: mean(|m| m.ndcg),
        query_count: n,
        per_query,
        unjudged_queries: unjudged,
    }
}

/// Parses `query_id 0 doc_id grade` lines.
pub fn parse_qrels(text: &str, context: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(context, n + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| Error::parse(context, n + 1, format!("grade `{}` is not a non-negative integer", fields[3])))?;
        qrels
            .insert(fields[0], fields[2], grade)
            .map_err(|e| Error::parse(context, n + 1, e.to_string()))?;
    }
    Ok(qrels)
}

/// Parses `query_id Q0 doc_id rank score tag` lines. Within a query, ranks
/// must increase and scores must not increase in file order.
pub fn parse_run(text: &str, context: &str) -> Result<RunList> {
    let mut queries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    let mut last_rank: BTreeMap<String, i64> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(context, n + 1, msg);
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let (qid, doc) = (fields[0], fields[2]);
        let rank: i64 = fields[3]
            .parse()
            .map_err(|_| err(format!("rank `{}` is not an integer", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| err(format!("score `{}` is not a finite number", fields[4])))?;
        if !seen.insert((qid.to_string(), doc.to_string())) {
            return Err(err(format!("document `{doc}` repeated for query `{qid}`")));
        }
        if let Some(&prev) = last_rank.get(qid) {
            if rank <= prev {
                return Err(err(format!("rank {rank} does not follow rank {prev} for query `{qid}`")));
            }
        }
        last_rank.insert(qid.to_string(), rank);
        let entries = queries.entry(qid.to_string()).or_default();
        if let Some(&(_, prev)) = entries.last() {
            if score > prev {
                return Err(err(format!("score {score} exceeds the previous score {prev} for query `{qid}`")));
            }
        }
        entries.push((doc.to_string(), score));
    }
    Ok(RunList { queries })
}

/// Renders a run in TREC format with 1-based ranks.
pub fn format_run(run: &RunList, tag: &str) -> String {
    let mut out = String::new();
    for (qid, ranked) in run.queries() {
        for (i, (doc, score)) in ranked.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {doc} {} {score:.6} {tag}", i + 1);
        }
    }
    out
}

pub fn evaluate_run(run_path: &Path, qrels_path: &Path, options: EvalOptions) -> Result<MetricReport> {
    let run_text = std::fs::read_to_string(run_path).map_err(|e| Error::io(run_path, e))?;
    let qrels_text = std::fs::read_to_string(qrels_path).map_err(|e| Error::io(qrels_path, e))?;
    let run = parse_run(&run_text, &run_path.display().to_string())?;
    let qrels = parse_qrels(&qrels_text, &qrels_path.display().to_string())?;
    Ok(evaluate(&run, &qrels, options))
}

/// A fixed-width table with one row per model and MAP, P@20, nDCG@20 columns.
pub fn format_metric_table(rows: &[(String, &MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "Model", "MAP", "P@20", "nDCG@20");
    for (name, r) in rows {
        let _ = writeln!(out, "{name:<width$}  {:>7.4}  {:>7.4}  {:>7.4}", r.map, r.precision, r.ndcg);
    }
    out
}
