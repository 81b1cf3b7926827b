//! Scoring BM25 candidate pools: re-ranked runs and pairwise agreement
//! between two scorers.

use rayon::prelude::*;

use crate::corpus::{InvertedIndex, PoolScorer, QuerySet};
use crate::error::Result;
use crate::eval::RunList;
use crate::model::{sort_ranked, DocEncoder, RankModelParams};

/// A trained model scoring pooled documents.
pub struct ModelScorer<'a> {
    params: &'a RankModelParams,
    encoder: DocEncoder<'a>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a RankModelParams, index: &'a InvertedIndex) -> Self {
        ModelScorer {
            params,
            encoder: DocEncoder::new(params, index),
        }
    }
}

impl PoolScorer for ModelScorer<'_> {
    fn score_pool(&self, _query_pos: usize, query: &[String], pool: &[usize]) -> Result<Vec<f64>> {
        self.params.score_docs(&self.encoder, query, pool)
    }
}

/// Re-ranks the BM25 top-`depth` of every query with `scorer`.
///
/// Queries matching no document get an empty ranking.
pub fn rerank(scorer: &dyn PoolScorer, index: &InvertedIndex, queries: &QuerySet, depth: usize) -> Result<RunList> {
    let ranked: Vec<Result<Vec<(String, f64)>>> = queries
        .queries()
        .par_iter()
        .enumerate()
        .map(|(pos, q)| {
            let pool = index.candidate_pool(&q.terms, depth);
            let scores = scorer.score_pool(pos, &q.terms, &pool)?;
            let mut out: Vec<(String, f64)> = pool
                .iter()
                .zip(scores)
                .map(|(&d, s)| (index.doc_ids()[d].clone(), s))
                .collect();
            sort_ranked(&mut out, |s| s);
            Ok(out)
        })
        .collect();
    let mut run = RunList::new();
    for (q, r) in queries.iter().zip(ranked) {
        run.insert(&q.id, r?)?;
    }
    Ok(run)
}

/// Pair counts from comparing a candidate scorer against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Agreement {
    /// Pairs on which the reference expresses a preference.
    pub pairs: usize,
    /// Pairs the candidate orders the same way (candidate ties disagree).
    pub agreed: usize,
}

impl Agreement {
    /// Fraction of agreeing pairs; 1.0 when there is nothing to compare.
    pub fn rate(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.agreed as f64 / self.pairs as f64
        }
    }
}

/// Exhaustive pairwise comparison over each query's BM25 top-`pool_size`.
pub fn pairwise_agreement(
    reference: &dyn PoolScorer,
    candidate: &dyn PoolScorer,
    index: &InvertedIndex,
    queries: &QuerySet,
    pool_size: usize,
) -> Result<Agreement> {
    let per_query: Vec<Result<Agreement>> = queries
        .queries()
        .par_iter()
        .enumerate()
        .map(|(pos, q)| {
            let pool = index.candidate_pool(&q.terms, pool_size);
            let r = reference.score_pool(pos, &q.terms, &pool)?;
            let c = candidate.score_pool(pos, &q.terms, &pool)?;
            let mut acc = Agreement::default();
            for i in 0..pool.len() {
                for j in i + 1..pool.len() {
                    let want = (r[i] - r[j]).signum();
                    if r[i] == r[j] {
                        continue;
                    }
                    acc.pairs += 1;
                    if c[i] != c[j] && (c[i] - c[j]).signum() == want {
                        acc.agreed += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = Agreement::default();
    for a in per_query {
        let a = a?;
        total.pairs += a.pairs;
        total.agreed += a.agreed;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, Bm25Scorer, Document};

    struct Negated<'a>(Bm25Scorer<'a>);

    impl PoolScorer for Negated<'_> {
        fn score_pool(&self, pos: usize, query: &[String], pool: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0.score_pool(pos, query, pool)?.into_iter().map(|s| -s).collect())
        }
    }

    fn index() -> InvertedIndex {
        build_index(&[
            Document::new("a", "red red red blue"),
            Document::new("b", "red blue green"),
            Document::new("c", "red"),
            Document::new("d", "green"),
        ])
        .unwrap()
    }

    #[test]
    fn agreement_with_self_and_reverse() {
        let idx = index();
        let qs = QuerySet::from_texts([("q1", "red"), ("q2", "green blue")]).unwrap();
        let bm25 = Bm25Scorer(&idx);
        let same = pairwise_agreement(&bm25, &bm25, &idx, &qs, 10).unwrap();
        assert!(same.pairs > 0);
        assert_eq!(same.rate(), 1.0);
        let rev = pairwise_agreement(&bm25, &Negated(Bm25Scorer(&idx)), &idx, &qs, 10).unwrap();
        assert_eq!(rev.agreed, 0);
    }

    #[test]
    fn rerank_with_bm25_matches_retrieval_order() {
        let idx = index();
        let qs = QuerySet::from_texts([("q1", "red"), ("q2", "nothing")]).unwrap();
        let run = rerank(&Bm25Scorer(&idx), &idx, &qs, 10).unwrap();
        let ids: Vec<&str> = run.get("q1").unwrap().iter().map(|(d, _)| d.as_str()).collect();
        let expected: Vec<&str> = idx
            .retrieve(&["red"], 10)
            .into_iter()
            .map(|(d, _)| idx.doc_id(d).unwrap())
            .collect();
        assert_eq!(ids, expected);
        assert!(run.get("q2").unwrap().is_empty());
    }
}
