use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;

use mimicrank::corpus::{annotate_queries, build_index, tokenize, Document, QuerySet};
use mimicrank::eval::{average_precision, ndcg_at_k, precision_at_k};
use mimicrank::model::{hinge_loss, init_params, rank, rank_by, RankModelConfig, TrainingInstance};
use mimicrank::pate::{aggregate_scores, partition_data};

const WORDS: [&str; 8] = ["ash", "birch", "cedar", "elm", "fir", "oak", "pine", "yew"];

fn corpus() -> impl Strategy<Value = Vec<Document>> {
    prop::collection::vec(prop::collection::vec(0..WORDS.len(), 1..12), 1..15).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, ws)| {
                let text: Vec<&str> = ws.into_iter().map(|w| WORDS[w]).collect();
                Document::new(format!("doc{i:02}"), text.join(" "))
            })
            .collect()
    })
}

fn query() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0..WORDS.len() + 2, 1..5).prop_map(|ws| {
        ws.into_iter()
            .map(|w| WORDS.get(w).map_or_else(|| format!("unseen{w}"), |s| s.to_string()))
            .collect()
    })
}

fn small_config() -> RankModelConfig {
    RankModelConfig {
        embedding_dim: 3,
        hidden_layers: 2,
        hidden_size: 4,
        dropout_keep: 1.0,
        learning_rate: 1e-3,
        batch_size: 4,
        train_embeddings: true,
        train_term_weights: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idf_stays_within_bounds(docs in corpus(), q in query()) {
        let idx = build_index(&docs).unwrap();
        let upper = ((docs.len() + 1) as f64).ln();
        for t in &q {
            let idf = idx.idf(t);
            prop_assert!((0.0..=upper).contains(&idf), "idf({t}) = {idf} outside [0, {upper}]");
        }
    }

    #[test]
    fn bm25_is_additive_over_query_terms(docs in corpus(), q1 in query(), q2 in query()) {
        let idx = build_index(&docs).unwrap();
        let both: Vec<String> = q1.iter().chain(&q2).cloned().collect();
        for d in 0..idx.doc_count() {
            let whole = idx.bm25_score(&both, d).unwrap();
            let parts = idx.bm25_score(&q1, d).unwrap() + idx.bm25_score(&q2, d).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
            let terms = tokenize(&docs[d].text);
            if !both.iter().any(|t| terms.contains(t)) {
                prop_assert_eq!(whole, 0.0);
            }
        }
    }

    #[test]
    fn postings_match_naive_recount(docs in corpus()) {
        let idx = build_index(&docs).unwrap();
        let mut naive: HashMap<String, u64> = HashMap::new();
        for d in &docs {
            for t in tokenize(&d.text) {
                *naive.entry(t).or_default() += 1;
            }
        }
        for (term, count) in naive {
            let total: u64 = idx.postings(&term).iter().map(|p| u64::from(p.tf)).sum();
            prop_assert_eq!(total, count);
        }
    }

    #[test]
    fn index_rebuild_is_byte_stable(docs in corpus()) {
        let a = build_index(&docs).unwrap().to_bytes();
        prop_assert_eq!(&a, &build_index(&docs).unwrap().to_bytes());
        let back = mimicrank::corpus::InvertedIndex::from_bytes(&a).unwrap();
        prop_assert_eq!(back.to_bytes(), a);
    }

    #[test]
    fn annotation_never_emits_ties(docs in corpus(), qs in prop::collection::vec(query(), 1..4), seed in any::<u64>()) {
        let idx = build_index(&docs).unwrap();
        let texts: Vec<(String, String)> = qs.iter().enumerate().map(|(i, q)| (format!("q{i}"), q.join(" "))).collect();
        let queries = QuerySet::from_texts(texts).unwrap();
        let ann = annotate_queries(&idx, &queries, 10, 6, seed).unwrap();
        for inst in &ann.instances {
            prop_assert!(inst.s1 != inst.s2);
            prop_assert!(inst.doc1 != inst.doc2);
        }
    }

    #[test]
    fn partition_covers_input_disjointly(n_inst in 1usize..60, n in 1usize..6, seed in any::<u64>()) {
        prop_assume!(n <= n_inst);
        let instances: Vec<TrainingInstance> = (0..n_inst)
            .map(|i| TrainingInstance {
                query_id: format!("q{}", i % 7),
                query: vec!["oak".into()],
                doc1: format!("a{i}"),
                doc2: format!("b{i}"),
                s1: i as f64,
                s2: -1.0,
            })
            .collect();
        let part = partition_data(&instances, n, seed).unwrap();
        prop_assert_eq!(part.shards.len(), n);
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for shard in &part.shards {
            prop_assert!(shard.len() >= n_inst / n && shard.len() <= n_inst / n + 1);
            for inst in shard {
                *seen.entry(inst.doc1.clone()).or_default() += 1;
            }
        }
        prop_assert_eq!(seen.len(), n_inst);
        prop_assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn noise_free_aggregate_is_the_exact_mean(scores in prop::collection::vec(-1.0f64..1.0, 1..8), seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        for s in &scores {
            sum += s;
        }
        let mean = sum / scores.len() as f64;
        prop_assert_eq!(aggregate_scores(&scores, 0.0, &mut rng).to_bits(), mean.to_bits());
    }

    #[test]
    fn metrics_are_bounded_and_ideal_is_best(
        grades in prop::collection::vec(0u32..4, 1..30),
        perm_seed in any::<u64>(),
    ) {
        let judged: BTreeMap<String, u32> = grades.iter().enumerate().map(|(i, g)| (format!("d{i}"), *g)).collect();
        let mut run: Vec<String> = judged.keys().cloned().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(run.as_mut_slice(), &mut rng);
        let mut ideal = run.clone();
        ideal.sort_by_key(|d| std::cmp::Reverse(judged[d]));
        for v in [average_precision(&run, &judged), precision_at_k(&run, &judged, 20), ndcg_at_k(&run, &judged, 20)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(ndcg_at_k(&run, &judged, 20) <= ndcg_at_k(&ideal, &judged, 20) + 1e-12);
        if grades.iter().any(|&g| g > 0) {
            prop_assert!((ndcg_at_k(&ideal, &judged, 20) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_doc_id_names(grades in prop::collection::vec(0u32..3, 1..25), salt in "[a-z]{1,4}") {
        let judged: BTreeMap<String, u32> = grades.iter().enumerate().map(|(i, g)| (format!("d{i}"), *g)).collect();
        let run: Vec<String> = (0..grades.len()).rev().map(|i| format!("d{i}")).collect();
        let rename = |d: &String| format!("{salt}-{}", d.chars().rev().collect::<String>());
        let judged2: BTreeMap<String, u32> = judged.iter().map(|(d, g)| (rename(d), *g)).collect();
        let run2: Vec<String> = run.iter().map(rename).collect();
        prop_assert_eq!(average_precision(&run, &judged), average_precision(&run2, &judged2));
        prop_assert_eq!(ndcg_at_k(&run, &judged, 20), ndcg_at_k(&run2, &judged2, 20));
    }

    #[test]
    fn promoting_a_relevant_doc_never_hurts(grades in prop::collection::vec(0u32..3, 2..30), at in any::<prop::sample::Index>()) {
        let judged: BTreeMap<String, u32> = grades.iter().enumerate().map(|(i, g)| (format!("d{i}"), *g)).collect();
        let run: Vec<String> = (0..grades.len()).map(|i| format!("d{i}")).collect();
        let i = at.index(grades.len() - 1) + 1;
        prop_assume!(grades[i] > grades[i - 1]);
        let mut better = run.clone();
        better.swap(i - 1, i);
        prop_assert!(average_precision(&better, &judged) >= average_precision(&run, &judged) - 1e-12);
        prop_assert!(ndcg_at_k(&better, &judged, 20) >= ndcg_at_k(&run, &judged, 20) - 1e-12);
        if i < 20 {
            prop_assert!(precision_at_k(&better, &judged, 20) >= precision_at_k(&run, &judged, 20));
        }
    }

    #[test]
    fn represent_is_linear(docs in corpus(), a in query(), b in query(), c in -3.0f64..3.0, seed in any::<u64>()) {
        let idx = build_index(&docs).unwrap();
        let params = init_params(&small_config(), idx.vocabulary(), None, &idx, seed).unwrap();
        let mut scaled = params.clone();
        for w in &mut scaled.term_weights {
            *w *= c;
        }
        let base = params.represent(&a);
        for (x, y) in scaled.represent(&a).iter().zip(&base) {
            prop_assert!((x - c * y).abs() < 1e-12);
        }
        let joined: Vec<String> = a.iter().chain(&b).cloned().collect();
        let rb = params.represent(&b);
        for ((j, x), y) in params.represent(&joined).iter().zip(&base).zip(&rb) {
            prop_assert!((j - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_bounded_and_hinge_is_nonnegative(docs in corpus(), q in query(), seed in any::<u64>()) {
        let idx = build_index(&docs).unwrap();
        let params = init_params(&small_config(), idx.vocabulary(), None, &idx, seed).unwrap();
        let mut batch = Vec::new();
        let mut scores = Vec::new();
        for (i, d) in docs.iter().enumerate().skip(1) {
            let terms = tokenize(&d.text);
            let first = tokenize(&docs[0].text);
            let (s1, s2) = (params.score(&q, &first).unwrap(), params.score(&q, &terms).unwrap());
            prop_assert!(s1 > -1.0 && s1 < 1.0 && s2 > -1.0 && s2 < 1.0);
            batch.push(TrainingInstance {
                query_id: "q".into(),
                query: q.clone(),
                doc1: docs[0].id.clone(),
                doc2: d.id.clone(),
                s1: (i % 2) as f64,
                s2: 0.5,
            });
            scores.push((s1, s2));
        }
        prop_assume!(!batch.is_empty());
        let loss = hinge_loss(&batch, &scores).unwrap();
        prop_assert!(loss >= 0.0);
        let satisfied = batch
            .iter()
            .zip(&scores)
            .all(|(b, (x, y))| (b.s1 - b.s2).signum() * (x - y) >= 1.0);
        prop_assert_eq!(loss == 0.0, satisfied);
    }

    #[test]
    fn ranking_is_invariant_to_monotone_transforms(docs in corpus(), q in query(), seed in any::<u64>(), k in 0.1f64..10.0) {
        let idx = build_index(&docs).unwrap();
        let params = init_params(&small_config(), idx.vocabulary(), None, &idx, seed).unwrap();
        let cands: Vec<(String, Vec<String>)> = docs.iter().map(|d| (d.id.clone(), tokenize(&d.text))).collect();
        let plain = rank(&params, &q, &cands, cands.len()).unwrap();
        let warped = rank_by(&params, &q, &cands, cands.len(), |s| (k * s).exp() + s.powi(3)).unwrap();
        let ids = |r: &[(String, f64)]| r.iter().map(|(d, _)| d.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&plain), ids(&warped));
    }
}

#[test]
fn hinge_is_zero_exactly_at_margin() {
    let inst = TrainingInstance {
        query_id: "q".into(),
        query: vec![],
        doc1: "a".into(),
        doc2: "b".into(),
        s1: 1.0,
        s2: 0.0,
    };
    assert_eq!(hinge_loss(&[inst.clone()], &[(0.5, -0.5)]).unwrap(), 0.0);
    assert!(hinge_loss(&[inst], &[(0.5, -0.4)]).unwrap() > 0.0);
}
