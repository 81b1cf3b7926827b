//! The pairwise neural ranker.
//!
//! A query or document is represented as the weighted sum of its term
//! embeddings, `Σ ω(t)·ε(t)` over its tokens. The scorer is a ReLU stack
//! over `[query ‖ document]` ending in a single tanh unit. Training feeds both
//! documents of a pair through the same parameters and minimizes the batch
//! hinge loss `mean(max(0, 1 - sign(s1 - s2)·(S1 - S2)))`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::corpus::{InvertedIndex, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, DenseLayer, Dropout, GradientStore, Matrix};
use crate::seeding;

/// Range of the uniform initializer for embeddings not found in a file.
pub const EMBEDDING_INIT_RANGE: f64 = 0.1;

// Initialization draws from streams disjoint from the training streams (0, 1),
// so one seed can drive both.
const INIT_EMBEDDING_STREAM: u64 = 100;
const INIT_DENSE_STREAM: u64 = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct RankModelConfig {
    pub embedding_dim: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    /// Probability of keeping a hidden unit during training.
    pub dropout_keep: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_embeddings: bool,
    pub train_term_weights: bool,
}

impl RankModelConfig {
    /// 3 x 512 hidden, dropout 0.2, 500-d embeddings, lr 1e-3, batch 512.
    pub fn teacher() -> Self {
        RankModelConfig {
            embedding_dim: 500,
            hidden_layers: 3,
            hidden_size: 512,
            dropout_keep: 0.8,
            learning_rate: 1e-3,
            batch_size: 512,
            train_embeddings: true,
            train_term_weights: true,
        }
    }

    /// 3 x 128 hidden, dropout 0.1, 300-d embeddings, lr 1e-3, batch 512.
    pub fn student() -> Self {
        RankModelConfig {
            embedding_dim: 300,
            hidden_size: 128,
            dropout_keep: 0.9,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.hidden_layers == 0 || self.hidden_size == 0 {
            return bad("hidden_layers and hidden_size must be positive");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

impl Default for RankModelConfig {
    fn default() -> Self {
        Self::teacher()
    }
}

/// One pairwise example: a query, two documents, and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub query_id: String,
    pub query: Vec<String>,
    pub doc1: String,
    pub doc2: String,
    pub s1: f64,
    pub s2: f64,
}

impl TrainingInstance {
    /// `sign(s1 - s2)`; zero for tied labels.
    pub fn preference(&self) -> f64 {
        if self.s1 > self.s2 {
            1.0
        } else if self.s1 < self.s2 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Term multiset over a model vocabulary: `(term index, count)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermBag(pub Vec<(u32, f64)>);

/// Trainable state: embeddings, term weights, and the dense scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankModelParams {
    pub config: RankModelConfig,
    pub vocabulary: Vocabulary,
    /// `|V| x m`, one row per term.
    pub embeddings: Matrix,
    pub term_weights: Vec<f64>,
    pub layers: Vec<DenseLayer>,
}

/// Parsed word-vector file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Parses `token v1 .. vm` lines with an optional `<count> <dim>` header.
/// The first occurrence of a repeated token wins.
pub fn parse_embeddings(text: &str, context: &str) -> Result<EmbeddingTable> {
    let mut dim: Option<usize> = None;
    let mut vectors = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if n == 0 && fields.len() == 2 {
            if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                dim = Some(d);
                continue;
            }
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(context, n + 1, format!("bad value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    context,
                    n + 1,
                    format!("vector has {} values, expected {d}", values.len()),
                ))
            }
            None if values.is_empty() => return Err(Error::parse(context, n + 1, "token without values")),
            None => dim = Some(values.len()),
            _ => {}
        }
        vectors.entry(fields[0].to_string()).or_insert(values);
    }
    Ok(EmbeddingTable {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, &path.display().to_string())
}

/// Initializes a model over `vocabulary`.
///
/// Embeddings come from `embeddings` where the token exists and are otherwise
/// uniform in `±0.1`; term weights start at the smoothed IDF from `index`;
/// dense layers use Glorot-uniform weights with zero biases.
pub fn init_params(
    config: &RankModelConfig,
    vocabulary: &Vocabulary,
    embeddings: Option<&EmbeddingTable>,
    index: &InvertedIndex,
    seed: u64,
) -> Result<RankModelParams> {
    config.validate()?;
    let m = config.embedding_dim;
    if let Some(table) = embeddings {
        if table.dim != m {
            return Err(Error::Dimension(format!(
                "embedding file has dimension {}, config expects {m}",
                table.dim
            )));
        }
    }

    let mut emb_rng = seeding::stream_rng(seed, INIT_EMBEDDING_STREAM);
    let mut table = Matrix::zeros(vocabulary.len(), m);
    for (t, term) in vocabulary.terms().iter().enumerate() {
        let row = table.row_mut(t);
        match embeddings.and_then(|e| e.vectors.get(term)) {
            Some(v) => row.copy_from_slice(v),
            None => {
                for x in row.iter_mut() {
                    *x = emb_rng.gen_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE);
                }
            }
        }
    }

    let term_weights = vocabulary.terms().iter().map(|t| index.idf(t)).collect();

    let mut dense_rng = seeding::stream_rng(seed, INIT_DENSE_STREAM);
    let mut layers = Vec::with_capacity(config.hidden_layers + 1);
    let mut in_dim = 2 * m;
    for _ in 0..config.hidden_layers {
        layers.push(DenseLayer::glorot(in_dim, config.hidden_size, Activation::Relu, &mut dense_rng));
        in_dim = config.hidden_size;
    }
    layers.push(DenseLayer::glorot(in_dim, 1, Activation::Tanh, &mut dense_rng));

    Ok(RankModelParams {
        config: config.clone(),
        vocabulary: vocabulary.clone(),
        embeddings: table,
        term_weights,
        layers,
    })
}

impl RankModelParams {
    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.embedding_dim();
        if self.embeddings.rows() != self.vocabulary.len() || self.term_weights.len() != self.vocabulary.len() {
            return Err(Error::Dimension("embedding rows and term weights must match vocabulary size".into()));
        }
        if m != self.config.embedding_dim {
            return Err(Error::Dimension(format!(
                "embedding width {m} differs from configured {}",
                self.config.embedding_dim
            )));
        }
        match (self.layers.first(), self.layers.last()) {
            (Some(first), Some(last)) if first.in_dim() == 2 * m && last.out_dim() == 1 => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "dense stack must map {} inputs to a single output",
                    2 * m
                )))
            }
        }
        let finite = self.embeddings.as_slice().iter().all(|v| v.is_finite())
            && self.term_weights.iter().all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.weights.as_slice().iter().chain(&l.bias).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Maps terms to a bag over this model's vocabulary, dropping unknown terms.
    pub fn encode<S: AsRef<str>>(&self, terms: &[S]) -> TermBag {
        let mut counts: Vec<(u32, f64)> = Vec::new();
        for t in terms {
            if let Some(id) = self.vocabulary.get(t.as_ref()) {
                match counts.iter_mut().find(|(k, _)| *k == id) {
                    Some(entry) => entry.1 += 1.0,
                    None => counts.push((id, 1.0)),
                }
            }
        }
        counts.sort_by_key(|&(k, _)| k);
        TermBag(counts)
    }

    /// Weighted sum of embeddings; the zero vector for an empty bag.
    pub fn represent_bag(&self, bag: &TermBag) -> Vec<f64> {
        let mut out = vec![0.0; self.embedding_dim()];
        for &(t, c) in &bag.0 {
            let w = c * self.term_weights[t as usize];
            for (o, &e) in out.iter_mut().zip(self.embeddings.row(t as usize)) {
                *o += w * e;
            }
        }
        out
    }

    pub fn represent<S: AsRef<str>>(&self, terms: &[S]) -> Vec<f64> {
        self.represent_bag(&self.encode(terms))
    }

    fn score_reprs(&self, query: &[f64], doc: &[f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(query.len() + doc.len());
        x.extend_from_slice(query);
        x.extend_from_slice(doc);
        let (out, _) = nn::forward(&self.layers, &x, Dropout::Off)?;
        out.first()
            .copied()
            .ok_or_else(|| Error::Dimension("dense stack has no output".into()))
    }

    pub fn score_bags(&self, query: &TermBag, doc: &TermBag) -> Result<f64> {
        self.score_reprs(&self.represent_bag(query), &self.represent_bag(doc))
    }

    /// Pointwise score of a query-document pair, in `[-1, 1]`.
    pub fn score<S: AsRef<str>, T: AsRef<str>>(&self, query: &[S], doc: &[T]) -> Result<f64> {
        self.score_bags(&self.encode(query), &self.encode(doc))
    }

    /// Scores indexed documents against one query, reusing the query representation.
    pub fn score_docs<S: AsRef<str>>(&self, encoder: &DocEncoder<'_>, query: &[S], docs: &[usize]) -> Result<Vec<f64>> {
        let q = self.represent(query);
        docs.iter()
            .map(|&d| self.score_reprs(&q, &self.represent_bag(&encoder.bag(d)?)))
            .collect()
    }

    fn trainable_count(&self) -> usize {
        self.embeddings.as_slice().len()
            + self.term_weights.len()
            + self
                .layers
                .iter()
                .map(|l| l.weights.as_slice().len() + l.bias.len())
                .sum::<usize>()
    }

    /// All parameters in a fixed order: embeddings, term weights, then each
    /// layer's weights and bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        out.extend_from_slice(self.embeddings.as_slice());
        out.extend_from_slice(&self.term_weights);
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.trainable_count() {
            return Err(Error::Dimension(format!(
                "flat vector of {} for {} parameters",
                theta.len(),
                self.trainable_count()
            )));
        }
        let mut rest = theta;
        let mut fill = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        fill(self.embeddings.as_mut_slice());
        fill(&mut self.term_weights);
        for l in &mut self.layers {
            fill(l.weights.as_mut_slice());
            fill(&mut l.bias);
        }
        Ok(())
    }

    /// Offsets of the three parameter groups inside [`RankModelParams::to_flat`].
    pub fn flat_layout(&self) -> FlatLayout {
        let emb = self.embeddings.as_slice().len();
        FlatLayout {
            embeddings: 0..emb,
            term_weights: emb..emb + self.term_weights.len(),
            dense: emb + self.term_weights.len()..self.trainable_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatLayout {
    pub embeddings: std::ops::Range<usize>,
    pub term_weights: std::ops::Range<usize>,
    pub dense: std::ops::Range<usize>,
}

/// Converts indexed documents into bags over a model vocabulary.
pub struct DocEncoder<'a> {
    index: &'a InvertedIndex,
    /// `None` when the model and index share a vocabulary.
    remap: Option<Vec<Option<u32>>>,
}

impl<'a> DocEncoder<'a> {
    pub fn new(params: &RankModelParams, index: &'a InvertedIndex) -> Self {
        let remap = if params.vocabulary.terms() == index.vocabulary().terms() {
            None
        } else {
            Some(
                index
                    .vocabulary()
                    .terms()
                    .iter()
                    .map(|t| params.vocabulary.get(t))
                    .collect(),
            )
        };
        DocEncoder { index, remap }
    }

    pub fn index(&self) -> &'a InvertedIndex {
        self.index
    }

    pub fn bag(&self, doc: usize) -> Result<TermBag> {
        if doc >= self.index.doc_count() {
            return Err(Error::DocIndexOutOfRange {
                index: doc,
                count: self.index.doc_count(),
            });
        }
        let terms = self.index.doc_terms(doc);
        let mut bag: Vec<(u32, f64)> = match &self.remap {
            None => terms.iter().map(|&(t, tf)| (t, f64::from(tf))).collect(),
            Some(map) => terms
                .iter()
                .filter_map(|&(t, tf)| map[t as usize].map(|m| (m, f64::from(tf))))
                .collect(),
        };
        bag.sort_by_key(|&(t, _)| t);
        Ok(TermBag(bag))
    }

    pub fn bag_by_id(&self, doc_id: &str) -> Result<TermBag> {
        let d = self
            .index
            .doc_index(doc_id)
            .ok_or_else(|| Error::UnknownDocId(doc_id.to_string()))?;
        self.bag(d)
    }
}

/// A training instance resolved to term bags.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub query: TermBag,
    pub doc1: TermBag,
    pub doc2: TermBag,
    pub s1: f64,
    pub s2: f64,
}

impl EncodedInstance {
    pub fn from_terms<S: AsRef<str>>(params: &RankModelParams, query: &[S], doc1: &[S], doc2: &[S], s1: f64, s2: f64) -> Self {
        EncodedInstance {
            query: params.encode(query),
            doc1: params.encode(doc1),
            doc2: params.encode(doc2),
            s1,
            s2,
        }
    }

    fn preference(&self) -> f64 {
        (self.s1 - self.s2).signum()
    }
}

pub fn encode_instances(
    params: &RankModelParams,
    instances: &[TrainingInstance],
    index: &InvertedIndex,
) -> Result<Vec<EncodedInstance>> {
    let encoder = DocEncoder::new(params, index);
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.s1 == inst.s2 {
                return Err(Error::TiedLabels { index: i, label: inst.s1 });
            }
            if !(inst.s1.is_finite() && inst.s2.is_finite()) {
                return Err(Error::NonFinite(format!("labels of instance {i}")));
            }
            Ok(EncodedInstance {
                query: params.encode(&inst.query),
                doc1: encoder.bag_by_id(&inst.doc1)?,
                doc2: encoder.bag_by_id(&inst.doc2)?,
                s1: inst.s1,
                s2: inst.s2,
            })
        })
        .collect()
}

/// Batch hinge loss given model scores `(S1, S2)` for each instance.
pub fn hinge_loss(batch: &[TrainingInstance], pair_scores: &[(f64, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if batch.len() != pair_scores.len() {
        return Err(Error::Dimension(format!(
            "{} instances but {} score pairs",
            batch.len(),
            pair_scores.len()
        )));
    }
    let mut total = 0.0;
    for (i, (inst, &(a, b))) in batch.iter().zip(pair_scores).enumerate() {
        if inst.s1 == inst.s2 {
            return Err(Error::TiedLabels { index: i, label: inst.s1 });
        }
        total += (1.0 - inst.preference() * (a - b)).max(0.0);
    }
    Ok(total / batch.len() as f64)
}

/// Gradients for every parameter group of a [`RankModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub embeddings: Matrix,
    pub term_weights: Vec<f64>,
    pub layers: GradientStore,
}

impl ParamGradients {
    pub fn zeros_like(params: &RankModelParams) -> Self {
        ParamGradients {
            embeddings: Matrix::zeros(params.embeddings.rows(), params.embeddings.cols()),
            term_weights: vec![0.0; params.term_weights.len()],
            layers: GradientStore::zeros_like(&params.layers),
        }
    }

    fn clear(&mut self) {
        self.embeddings.as_mut_slice().fill(0.0);
        self.term_weights.fill(0.0);
        for w in &mut self.layers.weights {
            w.as_mut_slice().fill(0.0);
        }
        for b in &mut self.layers.bias {
            b.fill(0.0);
        }
    }

    /// Same ordering as [`RankModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.embeddings.as_slice());
        out.extend_from_slice(&self.term_weights);
        for (w, b) in self.layers.weights.iter().zip(&self.layers.bias) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

fn accumulate_repr_grad(params: &RankModelParams, grads: &mut ParamGradients, bag: &TermBag, g: &[f64]) {
    for &(t, c) in &bag.0 {
        let t = t as usize;
        let w = params.term_weights[t];
        let e = params.embeddings.row(t);
        grads.term_weights[t] += c * e.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        for (ge, &gi) in grads.embeddings.row_mut(t).iter_mut().zip(g) {
            *ge += c * w * gi;
        }
    }
}

/// Hinge loss of a batch and its gradient, added into `grads`.
///
/// With `dropout` set, each of the two pointwise passes draws its own mask.
/// At the hinge kink (margin exactly zero) the subgradient is zero.
pub fn batch_loss_and_gradients_into(
    params: &RankModelParams,
    batch: &[EncodedInstance],
    mut dropout: Option<(&[f64], &mut dyn rand::RngCore)>,
    grads: &mut ParamGradients,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let m = params.embedding_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (i, inst) in batch.iter().enumerate() {
        let y = inst.preference();
        if y == 0.0 {
            return Err(Error::TiedLabels { index: i, label: inst.s1 });
        }
        let rq = params.represent_bag(&inst.query);
        let r1 = params.represent_bag(&inst.doc1);
        let r2 = params.represent_bag(&inst.doc2);
        let x1: Vec<f64> = rq.iter().chain(&r1).copied().collect();
        let x2: Vec<f64> = rq.iter().chain(&r2).copied().collect();

        let mut run = |x: &[f64]| -> Result<(f64, nn::ForwardCache)> {
            let mode = match &mut dropout {
                Some((keep, rng)) => Dropout::Train { keep, rng: &mut **rng },
                None => Dropout::Off,
            };
            let (out, cache) = nn::forward(&params.layers, x, mode)?;
            Ok((out[0], cache))
        };
        let (s1, c1) = run(&x1)?;
        let (s2, c2) = run(&x2)?;

        let margin = 1.0 - y * (s1 - s2);
        if margin > 0.0 {
            loss += margin * scale;
            let g1 = nn::backward_into(&params.layers, &c1, &[-y * scale], &mut grads.layers)?;
            let g2 = nn::backward_into(&params.layers, &c2, &[y * scale], &mut grads.layers)?;
            let gq: Vec<f64> = g1[..m].iter().zip(&g2[..m]).map(|(a, b)| a + b).collect();
            accumulate_repr_grad(params, grads, &inst.query, &gq);
            accumulate_repr_grad(params, grads, &inst.doc1, &g1[m..]);
            accumulate_repr_grad(params, grads, &inst.doc2, &g2[m..]);
        }
    }
    Ok(loss)
}

/// Dropout-free batch loss and gradients.
pub fn batch_loss_and_gradients(params: &RankModelParams, batch: &[EncodedInstance]) -> Result<(f64, ParamGradients)> {
    let mut grads = ParamGradients::zeros_like(params);
    let loss = batch_loss_and_gradients_into(params, batch, None, &mut grads)?;
    Ok((loss, grads))
}

/// Dropout-free batch loss.
pub fn batch_loss(params: &RankModelParams, batch: &[EncodedInstance]) -> Result<f64> {
    let mut total = 0.0;
    for inst in batch {
        let q = params.represent_bag(&inst.query);
        let a = params.score_reprs(&q, &params.represent_bag(&inst.doc1))?;
        let b = params.score_reprs(&q, &params.represent_bag(&inst.doc2))?;
        total += (1.0 - inst.preference() * (a - b)).max(0.0);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: RankModelParams,
    /// Mean per-instance loss of each epoch, as seen during its updates.
    pub loss_trace: Vec<f64>,
}

/// Training stopped on a non-finite value. `last_good` holds the parameters
/// from before the failing step.
#[derive(Debug)]
pub struct TrainError {
    pub source: Error,
    pub last_good: Box<RankModelParams>,
    pub epoch: usize,
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted in epoch {}: {}", self.epoch, self.source)
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.source
    }
}

/// Pairwise training with Adam. Each epoch reshuffles with a seeded stream;
/// the final partial batch is kept.
///
/// Instances are put in a canonical order first, so the result depends on the
/// multiset of instances and the seed, not on input order.
pub fn train(
    params: RankModelParams,
    instances: &[TrainingInstance],
    index: &InvertedIndex,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if epochs == 0 {
        return Ok(TrainOutcome {
            params,
            loss_trace: Vec::new(),
        });
    }
    if instances.is_empty() {
        return Err(Error::Invalid("no training instances".into()));
    }
    params.config.validate()?;
    params.validate()?;
    let mut ordered: Vec<&TrainingInstance> = instances.iter().collect();
    ordered.sort_by(|a, b| canonical_key(a).cmp(&canonical_key(b)));
    let ordered: Vec<TrainingInstance> = ordered.into_iter().cloned().collect();
    let encoded = encode_instances(&params, &ordered, index)?;
    train_encoded(params, &encoded, epochs, seed).map_err(Error::from)
}

fn canonical_key(i: &TrainingInstance) -> (&str, &str, &str, u64, u64) {
    (&i.query_id, &i.doc1, &i.doc2, i.s1.to_bits(), i.s2.to_bits())
}

pub fn train_encoded(
    mut params: RankModelParams,
    instances: &[EncodedInstance],
    epochs: usize,
    seed: u64,
) -> std::result::Result<TrainOutcome, TrainError> {
    let config = params.config.clone();
    let keep = vec![config.dropout_keep; params.layers.len() - 1];
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut shuffle_rng = seeding::stream_rng(seed, 0);
    let mut dropout_rng = seeding::stream_rng(seed, 1);
    let mut adam = Adam::new(config.learning_rate);
    let mut grads = ParamGradients::zeros_like(&params);
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut trace = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| instances[i].clone()));
            grads.clear();
            let fail = |source: Error, params: &RankModelParams| TrainError {
                source,
                last_good: Box::new(params.clone()),
                epoch,
            };
            let loss = batch_loss_and_gradients_into(
                &params,
                &batch,
                Some((&keep, &mut dropout_rng)),
                &mut grads,
            )
            .map_err(|e| fail(e, &params))?;
            if !loss.is_finite() {
                return Err(fail(Error::NonFinite(format!("batch loss {loss}")), &params));
            }
            epoch_loss += loss * batch.len() as f64;
            apply_step(&mut params, &grads, &mut adam).map_err(|e| fail(e, &params))?;
        }
        trace.push(epoch_loss / instances.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

fn apply_step(params: &mut RankModelParams, grads: &ParamGradients, adam: &mut Adam) -> Result<()> {
    let config = &params.config;
    let (train_emb, train_tw) = (config.train_embeddings, config.train_term_weights);
    let mut tensors: Vec<&mut [f64]> = Vec::new();
    let mut gs: Vec<&[f64]> = Vec::new();
    if train_emb {
        tensors.push(params.embeddings.as_mut_slice());
        gs.push(grads.embeddings.as_slice());
    }
    if train_tw {
        tensors.push(&mut params.term_weights);
        gs.push(&grads.term_weights);
    }
    for (l, (gw, gb)) in params
        .layers
        .iter_mut()
        .zip(grads.layers.weights.iter().zip(&grads.layers.bias))
    {
        tensors.push(l.weights.as_mut_slice());
        gs.push(gw.as_slice());
        tensors.push(&mut l.bias);
        gs.push(gb);
    }
    adam.step(&mut tensors, &gs)
}

/// Sorts candidates by score, best first, ties by ascending id, then truncates.
pub fn rank<S: AsRef<str>, T: AsRef<str>>(
    params: &RankModelParams,
    query: &[S],
    candidates: &[(String, Vec<T>)],
    cutoff: usize,
) -> Result<Vec<(String, f64)>> {
    rank_by(params, query, candidates, cutoff, |s| s)
}

/// [`rank`] comparing `transform(score)` instead of the raw score.
pub fn rank_by<S: AsRef<str>, T: AsRef<str>>(
    params: &RankModelParams,
    query: &[S],
    candidates: &[(String, Vec<T>)],
    cutoff: usize,
    transform: impl Fn(f64) -> f64,
) -> Result<Vec<(String, f64)>> {
    let q = params.represent(query);
    let mut scored = candidates
        .iter()
        .map(|(id, terms)| Ok((id.clone(), params.score_reprs(&q, &params.represent(terms))?)))
        .collect::<Result<Vec<_>>>()?;
    sort_ranked(&mut scored, transform);
    scored.truncate(cutoff);
    Ok(scored)
}

pub(crate) fn sort_ranked(scored: &mut [(String, f64)], transform: impl Fn(f64) -> f64) {
    scored.sort_by(|a, b| {
        transform(b.1)
            .total_cmp(&transform(a.1))
            .then_with(|| a.0.cmp(&b.0))
    });
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn config_to_writer(w: &mut Writer, c: &RankModelConfig) {
    w.u64(c.embedding_dim as u64);
    w.u64(c.hidden_layers as u64);
    w.u64(c.hidden_size as u64);
    w.f64(c.dropout_keep);
    w.f64(c.learning_rate);
    w.u64(c.batch_size as u64);
    w.u8(c.train_embeddings as u8);
    w.u8(c.train_term_weights as u8);
}

fn config_from_reader(r: &mut Reader<'_>) -> Result<RankModelConfig> {
    Ok(RankModelConfig {
        embedding_dim: r.u64()? as usize,
        hidden_layers: r.u64()? as usize,
        hidden_size: r.u64()? as usize,
        dropout_keep: r.f64()?,
        learning_rate: r.f64()?,
        batch_size: r.u64()? as usize,
        train_embeddings: r.u8()? != 0,
        train_term_weights: r.u8()? != 0,
    })
}

impl RankModelParams {
    /// Self-describing checkpoint: config, vocabulary, embeddings, term
    /// weights, and the layer block, all floats little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        config_to_writer(&mut w, &self.config);
        w.u64(self.vocabulary.len() as u64);
        for t in self.vocabulary.terms() {
            w.str(t);
        }
        w.u64(self.embeddings.rows() as u64);
        w.u64(self.embeddings.cols() as u64);
        w.f64s(self.embeddings.as_slice());
        w.f64s(&self.term_weights);
        nn::write_layers(&mut w, &self.layers);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = config_from_reader(&mut r)?;
        let n = r.u64()? as usize;
        let mut vocabulary = Vocabulary::new();
        for _ in 0..n {
            vocabulary.insert(r.str()?);
        }
        if vocabulary.len() != n {
            return Err(Error::Checkpoint("vocabulary contains repeated terms".into()));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let embeddings = Matrix::from_vec(rows, cols, r.f64s()?)?;
        let term_weights = r.f64s()?;
        let layers = nn::read_layers(&mut r)?;
        r.finish()?;
        let params = RankModelParams {
            config,
            vocabulary,
            embeddings,
            term_weights,
            layers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, Document};

    fn tiny_config(m: usize, hidden: usize, layers: usize) -> RankModelConfig {
        RankModelConfig {
            embedding_dim: m,
            hidden_layers: layers,
            hidden_size: hidden,
            dropout_keep: 1.0,
            learning_rate: 1e-2,
            batch_size: 4,
            train_embeddings: true,
            train_term_weights: true,
        }
    }

    fn tiny_index() -> InvertedIndex {
        build_index(&[
            Document::new("d1", "apple banana apple"),
            Document::new("d2", "banana cherry"),
            Document::new("d3", "cherry date elder"),
            Document::new("d4", "apple elder fig"),
        ])
        .unwrap()
    }

    fn zero_dense(params: &mut RankModelParams) {
        for l in &mut params.layers {
            l.weights.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    fn hand_params() -> RankModelParams {
        let idx = tiny_index();
        let mut p = init_params(&tiny_config(2, 1, 1), idx.vocabulary(), None, &idx, 0).unwrap();
        p.embeddings.as_mut_slice().fill(0.0);
        p.term_weights.fill(0.0);
        p
    }

    #[test]
    fn table_one_defaults() {
        let t = RankModelConfig::teacher();
        assert_eq!((t.hidden_layers, t.hidden_size, t.embedding_dim, t.batch_size), (3, 512, 500, 512));
        assert_eq!(t.learning_rate, 1e-3);
        assert!((1.0 - t.dropout_keep - 0.2).abs() < 1e-12);
        let s = RankModelConfig::student();
        assert_eq!((s.hidden_layers, s.hidden_size, s.embedding_dim, s.batch_size), (3, 128, 300, 512));
        assert!((1.0 - s.dropout_keep - 0.1).abs() < 1e-12);
    }

    #[test]
    fn represent_examples() {
        let mut p = hand_params();
        let a = p.vocabulary.get("apple").unwrap() as usize;
        let b = p.vocabulary.get("banana").unwrap() as usize;
        p.embeddings.row_mut(a).copy_from_slice(&[1.0, 0.0]);
        p.embeddings.row_mut(b).copy_from_slice(&[0.0, 1.0]);
        p.term_weights[a] = 2.0;
        p.term_weights[b] = 3.0;
        assert_eq!(p.represent(&["apple", "banana"]), vec![2.0, 3.0]);

        p.term_weights[a] = 1.0;
        assert_eq!(p.represent(&["apple"]), vec![1.0, 0.0]);
        assert_eq!(p.represent(&["zzz", "yyy"]), vec![0.0, 0.0]);
        assert_eq!(p.represent::<&str>(&[]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_dense_scores_zero() {
        let idx = tiny_index();
        let mut p = init_params(&tiny_config(4, 8, 3), idx.vocabulary(), None, &idx, 1).unwrap();
        zero_dense(&mut p);
        assert_eq!(p.score(&["apple"], &["banana", "cherry"]).unwrap(), 0.0);
        assert_eq!(p.score(&["fig"], &["date"]).unwrap(), 0.0);
    }

    #[test]
    fn score_matches_hand_forward_pass() {
        let mut p = hand_params();
        let a = p.vocabulary.get("apple").unwrap() as usize;
        p.embeddings.row_mut(a).copy_from_slice(&[0.5, -1.0]);
        p.term_weights[a] = 1.5;
        // One hidden unit: relu(w1·x + b1), then tanh(w2·h + b2).
        let w1 = [0.3, -0.2, 0.7, 0.4];
        p.layers[0].weights.as_mut_slice().copy_from_slice(&w1);
        p.layers[0].bias[0] = 0.1;
        p.layers[1].weights.as_mut_slice()[0] = 1.3;
        p.layers[1].bias[0] = -0.2;

        let q = [0.75, -1.5];
        let d = [1.5, -3.0]; // "apple apple"
        let x = [q[0], q[1], d[0], d[1]];
        let h = (w1.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + 0.1).max(0.0);
        let expected = (1.3 * h - 0.2).tanh();
        let got = p.score(&["apple"], &["apple", "apple"]).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert_eq!(got, p.score(&["apple"], &["apple", "apple"]).unwrap());
    }

    fn inst(s1: f64, s2: f64) -> TrainingInstance {
        TrainingInstance {
            query_id: "q".into(),
            query: vec!["apple".into()],
            doc1: "d1".into(),
            doc2: "d2".into(),
            s1,
            s2,
        }
    }

    #[test]
    fn hinge_loss_examples() {
        assert_eq!(hinge_loss(&[inst(2.0, 1.0)], &[(0.5, -0.5)]).unwrap(), 0.0);
        assert_eq!(hinge_loss(&[inst(2.0, 1.0)], &[(0.3, 0.3)]).unwrap(), 1.0);
        assert_eq!(hinge_loss(&[inst(1.0, 2.0)], &[(0.3, 0.3)]).unwrap(), 1.0);
        assert_eq!(hinge_loss(&[inst(1.0, 2.0)], &[(0.5, 0.0)]).unwrap(), 1.5);
        let batch = [inst(2.0, 1.0), inst(1.0, 2.0)];
        assert_eq!(hinge_loss(&batch, &[(0.5, -0.5), (0.5, 0.0)]).unwrap(), 0.75);
        assert!(matches!(
            hinge_loss(&[inst(1.0, 1.0)], &[(0.0, 0.0)]),
            Err(Error::TiedLabels { index: 0, .. })
        ));
        assert!(hinge_loss(&[], &[]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let idx = tiny_index();
        for seed in 0..5 {
            let params = init_params(&tiny_config(3, 5, 1 + seed as usize % 3), idx.vocabulary(), None, &idx, seed).unwrap();
            let batch = vec![
                EncodedInstance::from_terms(&params, &["apple", "fig"], &["apple", "banana", "apple"], &["cherry"], 2.0, 0.5),
                EncodedInstance::from_terms(&params, &["elder"], &["date", "elder"], &["apple", "elder", "fig"], 0.1, 0.9),
            ];
            let (_, grads) = batch_loss_and_gradients(&params, &batch).unwrap();
            let analytic = grads.to_flat();
            let theta = params.to_flat();
            let coords: Vec<usize> = (0..theta.len()).collect();
            let mut scratch = params.clone();
            let report = nn::finite_difference_check(
                |t| {
                    scratch.set_flat(t).unwrap();
                    batch_loss(&scratch, &batch).unwrap()
                },
                &theta,
                &analytic,
                &coords,
                1e-5,
            );
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let idx = tiny_index();
        let p = init_params(&tiny_config(3, 4, 2), idx.vocabulary(), None, &idx, 3).unwrap();
        let out = train(p.clone(), &[inst(1.0, 0.0)], &idx, 0, 9).unwrap();
        assert_eq!(out.params, p);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn single_instance_loss_decreases() {
        let idx = tiny_index();
        let mut cfg = tiny_config(4, 8, 2);
        cfg.learning_rate = 1e-3;
        let p = init_params(&cfg, idx.vocabulary(), None, &idx, 4).unwrap();
        let out = train(p, &[inst(1.0, 0.0)], &idx, 400, 1).unwrap();
        let trace = &out.loss_trace;
        assert!(trace.windows(2).all(|w| w[1] <= w[0]), "not monotone: {trace:?}");
        assert!(*trace.last().unwrap() < 0.05, "final loss {}", trace.last().unwrap());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let idx = tiny_index();
        let mut cfg = tiny_config(4, 6, 2);
        cfg.dropout_keep = 0.7;
        cfg.batch_size = 2;
        let p = init_params(&cfg, idx.vocabulary(), None, &idx, 5).unwrap();
        let data = vec![inst(1.0, 0.0), inst(0.0, 1.0), inst(3.0, 2.0)];
        let a = train(p.clone(), &data, &idx, 5, 77).unwrap();
        let b = train(p, &data, &idx, 5, 77).unwrap();
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_trace), bits(&b.loss_trace));
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    }

    #[test]
    fn training_ignores_input_order() {
        let idx = tiny_index();
        let mut cfg = tiny_config(4, 6, 2);
        cfg.batch_size = 2;
        let p = init_params(&cfg, idx.vocabulary(), None, &idx, 5).unwrap();
        let mut data = vec![inst(1.0, 0.0), inst(0.0, 1.0), inst(3.0, 2.0)];
        data[2].doc2 = "d4".into();
        let a = train(p.clone(), &data, &idx, 3, 1).unwrap();
        data.reverse();
        let b = train(p, &data, &idx, 3, 1).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    }

    #[test]
    fn frozen_embeddings_stay_put() {
        let idx = tiny_index();
        let mut cfg = tiny_config(3, 4, 1);
        cfg.train_embeddings = false;
        cfg.train_term_weights = false;
        let p = init_params(&cfg, idx.vocabulary(), None, &idx, 6).unwrap();
        let out = train(p.clone(), &[inst(1.0, 0.0)], &idx, 3, 2).unwrap();
        assert_eq!(out.params.embeddings, p.embeddings);
        assert_eq!(out.params.term_weights, p.term_weights);
        assert_ne!(out.params.layers, p.layers);
    }

    #[test]
    fn rank_examples() {
        let idx = tiny_index();
        let mut p = init_params(&tiny_config(3, 4, 1), idx.vocabulary(), None, &idx, 8).unwrap();
        let one = vec![("x".to_string(), vec!["apple"])];
        assert_eq!(rank(&p, &["apple"], &one, 10).unwrap()[0].0, "x");

        zero_dense(&mut p);
        let cands = vec![
            ("c".to_string(), vec!["apple"]),
            ("a".to_string(), vec!["fig"]),
            ("b".to_string(), vec!["date"]),
        ];
        let ids: Vec<String> = rank(&p, &["apple"], &cands, 10).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(rank(&p, &["apple"], &cands, 2).unwrap().len(), 2);
    }

    #[test]
    fn init_uses_idf_and_file_vectors() {
        let idx = build_index(&[
            Document::new("a", "dog cat"),
            Document::new("b", "dog bird"),
        ])
        .unwrap();
        let table = parse_embeddings("2 3\ndog 0.5 -0.25 1\nzebra 1 1 1\n", "emb").unwrap();
        let cfg = tiny_config(3, 4, 1);
        let p = init_params(&cfg, idx.vocabulary(), Some(&table), &idx, 0).unwrap();
        let dog = p.vocabulary.get("dog").unwrap() as usize;
        assert_eq!(p.embeddings.row(dog), &[0.5, -0.25, 1.0]);
        assert_eq!(p.term_weights[dog], 0.0);
        let cat = p.vocabulary.get("cat").unwrap() as usize;
        assert!(p.embeddings.row(cat).iter().all(|v| v.abs() <= EMBEDDING_INIT_RANGE));

        let again = init_params(&cfg, idx.vocabulary(), None, &idx, 0).unwrap();
        assert_eq!(again, init_params(&cfg, idx.vocabulary(), None, &idx, 0).unwrap());

        let wrong = tiny_config(4, 4, 1);
        assert!(matches!(
            init_params(&wrong, idx.vocabulary(), Some(&table), &idx, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn embedding_file_without_header_and_bad_rows() {
        let t = parse_embeddings("a 1 2\nb 3 4\n", "e").unwrap();
        assert_eq!(t.dim, 2);
        assert_eq!(t.vectors["b"], vec![3.0, 4.0]);
        assert!(matches!(parse_embeddings("a 1 2\nb 3\n", "e"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_embeddings("a 1 x\n", "e").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let idx = tiny_index();
        let p = init_params(&tiny_config(3, 4, 2), idx.vocabulary(), None, &idx, 12).unwrap();
        let bytes = p.to_bytes();
        let back = RankModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);
        assert!(RankModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RankModelParams::from_bytes(&bad).is_err());
    }
}
