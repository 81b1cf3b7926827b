//! Python bindings for the mimicrank core.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mimicrank::config::RunConfig;
use mimicrank::corpus::{self, Document, InvertedIndex, QuerySet};
use mimicrank::eval::{self, EvalOptions, MetricReport};
use mimicrank::model::{self, RankModelConfig, RankModelParams, TrainingInstance};
use mimicrank::pate;
use mimicrank::pipeline::{self, Mode};
use mimicrank::{synth, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Parse { .. } | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Pair = (String, String, String, String, f64, f64);

fn to_instances(pairs: Vec<Pair>) -> Vec<TrainingInstance> {
    pairs
        .into_iter()
        .map(|(query_id, text, doc1, doc2, s1, s2)| TrainingInstance {
            query_id,
            query: corpus::tokenize(&text),
            doc1,
            doc2,
            s1,
            s2,
        })
        .collect()
}

/// Inverted index over a document collection.
#[pyclass(name = "Index", module = "pymimicrank")]
struct PyIndex {
    inner: InvertedIndex,
}

#[pymethods]
impl PyIndex {
    /// Builds an index from `(doc_id, text)` pairs.
    #[staticmethod]
    fn build(docs: Vec<(String, String)>) -> PyResult<Self> {
        let docs: Vec<Document> = docs.into_iter().map(|(id, text)| Document::new(id, text)).collect();
        Ok(PyIndex {
            inner: corpus::build_index(&docs).map_err(py_err)?,
        })
    }

    /// Builds an index from a JSONL corpus file.
    #[staticmethod]
    fn from_corpus(path: PathBuf) -> PyResult<Self> {
        let docs = corpus::read_corpus(&path).map_err(py_err)?;
        Self::build(docs.into_iter().map(|d| (d.id, d.text)).collect())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyIndex {
            inner: InvertedIndex::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[getter]
    fn doc_count(&self) -> usize {
        self.inner.doc_count()
    }

    #[getter]
    fn doc_ids(&self) -> Vec<String> {
        self.inner.doc_ids().to_vec()
    }

    fn idf(&self, term: &str) -> f64 {
        self.inner.idf(term)
    }

    fn doc_freq(&self, term: &str) -> usize {
        self.inner.doc_freq(term)
    }

    /// BM25 score of `query` (raw text) against one document.
    fn bm25(&self, query: &str, doc_id: &str) -> PyResult<f64> {
        let doc = self
            .inner
            .doc_index(doc_id)
            .ok_or_else(|| py_err(Error::UnknownDocId(doc_id.into())))?;
        self.inner.bm25_score(&corpus::tokenize(query), doc).map_err(py_err)
    }

    /// Top `depth` documents by BM25 as `(doc_id, score)`.
    #[pyo3(signature = (query, depth = 100))]
    fn retrieve(&self, query: &str, depth: usize) -> Vec<(String, f64)> {
        self.inner
            .retrieve(&corpus::tokenize(query), depth)
            .into_iter()
            .map(|(d, s)| (self.inner.doc_ids()[d].clone(), s))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.doc_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Index(docs={}, terms={})",
            self.inner.doc_count(),
            self.inner.vocabulary().len()
        )
    }
}

/// Neural pairwise ranking model.
#[pyclass(name = "RankModel", module = "pymimicrank")]
#[derive(Clone)]
struct PyRankModel {
    inner: RankModelParams,
}

#[pymethods]
impl PyRankModel {
    /// Fresh parameters over the index vocabulary; `dropout` is the drop rate.
    #[staticmethod]
    #[pyo3(signature = (index, seed, embedding_dim = 32, hidden_layers = 3, hidden_size = 64, dropout = 0.2, learning_rate = 1e-3, batch_size = 64))]
    #[allow(clippy::too_many_arguments)]
    fn init(
        index: &PyIndex,
        seed: u64,
        embedding_dim: usize,
        hidden_layers: usize,
        hidden_size: usize,
        dropout: f64,
        learning_rate: f64,
        batch_size: usize,
    ) -> PyResult<Self> {
        let config = RankModelConfig {
            embedding_dim,
            hidden_layers,
            hidden_size,
            dropout_keep: 1.0 - dropout,
            learning_rate,
            batch_size,
            train_embeddings: true,
            train_term_weights: true,
        };
        config.validate().map_err(py_err)?;
        let params = model::init_params(&config, index.inner.vocabulary(), None, &index.inner, seed).map_err(py_err)?;
        Ok(PyRankModel { inner: params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRankModel {
            inner: RankModelParams::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Trains on `(query_id, query_text, doc1, doc2, s1, s2)` pairs and
    /// returns the per-epoch mean losses.
    #[pyo3(signature = (pairs, index, epochs, seed))]
    fn train(&mut self, py: Python<'_>, pairs: Vec<Pair>, index: &PyIndex, epochs: usize, seed: u64) -> PyResult<Vec<f64>> {
        let instances = to_instances(pairs);
        let params = self.inner.clone();
        let outcome = py
            .allow_threads(|| model::train(params, &instances, &index.inner, epochs, seed))
            .map_err(py_err)?;
        self.inner = outcome.params;
        Ok(outcome.loss_trace)
    }

    fn score(&self, query: &str, doc: &str) -> PyResult<f64> {
        self.inner
            .score(&corpus::tokenize(query), &corpus::tokenize(doc))
            .map_err(py_err)
    }

    fn represent(&self, text: &str) -> Vec<f64> {
        self.inner.represent(&corpus::tokenize(text))
    }

    /// Reranks the BM25 pool of `query`; returns `(doc_id, score)`.
    #[pyo3(signature = (index, query, depth = 100))]
    fn rank(&self, index: &PyIndex, query: &str, depth: usize) -> PyResult<Vec<(String, f64)>> {
        let terms = corpus::tokenize(query);
        let pool = index.inner.candidate_pool(&terms, depth);
        let encoder = model::DocEncoder::new(&self.inner, &index.inner);
        let scores = self.inner.score_docs(&encoder, &terms, &pool).map_err(py_err)?;
        let mut ranked: Vec<(String, f64)> = pool
            .iter()
            .zip(scores)
            .map(|(&d, s)| (index.inner.doc_ids()[d].clone(), s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(ranked)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.to_flat().len()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "RankModel(embedding_dim={}, hidden_layers={}, hidden_size={})",
            c.embedding_dim, c.hidden_layers, c.hidden_size
        )
    }
}

/// Splits text into index terms.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

/// Weak BM25 annotation of `(query_id, text)` queries.
#[pyfunction]
#[pyo3(signature = (index, queries, seed, pool_size = 100, pairs_per_query = 20))]
fn annotate(index: &PyIndex, queries: Vec<(String, String)>, seed: u64, pool_size: usize, pairs_per_query: usize) -> PyResult<Vec<Pair>> {
    let texts: BTreeMap<String, String> = queries.iter().cloned().collect();
    let set = QuerySet::from_texts(queries).map_err(py_err)?;
    let ann = corpus::annotate_queries(&index.inner, &set, pool_size, pairs_per_query, seed).map_err(py_err)?;
    Ok(ann
        .instances
        .into_iter()
        .map(|i| {
            let text = texts[&i.query_id].clone();
            (i.query_id, text, i.doc1, i.doc2, i.s1, i.s2)
        })
        .collect())
}

#[pyfunction]
fn average_precision(run: Vec<String>, judged: BTreeMap<String, u32>) -> f64 {
    eval::average_precision(&run, &judged)
}

#[pyfunction]
#[pyo3(signature = (run, judged, k = 20))]
fn precision_at_k(run: Vec<String>, judged: BTreeMap<String, u32>, k: usize) -> f64 {
    eval::precision_at_k(&run, &judged, k)
}

#[pyfunction]
#[pyo3(signature = (run, judged, k = 20))]
fn ndcg_at_k(run: Vec<String>, judged: BTreeMap<String, u32>, k: usize) -> f64 {
    eval::ndcg_at_k(&run, &judged, k)
}

fn report_dict<'py>(py: Python<'py>, report: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("map", report.map)?;
    d.set_item("p@20", report.precision)?;
    d.set_item("ndcg@20", report.ndcg)?;
    d.set_item("queries", report.query_count)?;
    Ok(d)
}

/// Scores a TREC run file against a qrels file.
#[pyfunction]
#[pyo3(signature = (run_path, qrels_path, skip_empty = false))]
fn evaluate_run<'py>(py: Python<'py>, run_path: PathBuf, qrels_path: PathBuf, skip_empty: bool) -> PyResult<Bound<'py, PyDict>> {
    let report = eval::evaluate_run(&run_path, &qrels_path, EvalOptions { skip_empty }).map_err(py_err)?;
    report_dict(py, &report)
}

/// Laplace inverse CDF at `u` in (-0.5, 0.5).
#[pyfunction]
fn laplace_sample(scale: f64, u: f64) -> f64 {
    pate::laplace_sample(scale, u)
}

/// Mean of teacher scores, each with its own Laplace draw.
#[pyfunction]
#[pyo3(signature = (scores, noise_scale, seed))]
fn aggregate_scores(scores: Vec<f64>, noise_scale: f64, seed: u64) -> PyResult<f64> {
    if scores.is_empty() {
        return Err(PyValueError::new_err("no teacher scores"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pate::aggregate_scores(&scores, noise_scale, &mut rng))
}

/// Runs a full experiment from a config file; returns metric rows and agreements.
#[pyfunction]
#[pyo3(signature = (config_path, mode, out = None, seed = None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    mode: &str,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: Mode = mode.parse().map_err(py_err)?;
    let overrides: Vec<(String, String)> = seed.map(|s| ("seed".to_string(), s.to_string())).into_iter().collect();
    let config = RunConfig::load(&config_path, &overrides).map_err(py_err)?;
    let out = match out {
        Some(p) => p,
        None => config.path("out").ok_or_else(|| PyValueError::new_err("no output directory"))?,
    };
    let outcome = py
        .allow_threads(|| pipeline::run_pipeline(&config, mode, &out))
        .map_err(py_err)?;
    let result = PyDict::new(py);
    let rows = PyDict::new(py);
    for (name, report) in &outcome.rows {
        rows.set_item(name, report_dict(py, report)?)?;
    }
    let agreement = PyDict::new(py);
    for (name, a) in &outcome.agreement {
        agreement.set_item(name, a.rate())?;
    }
    result.set_item("dir", outcome.dir)?;
    result.set_item("rows", rows)?;
    result.set_item("agreement", agreement)?;
    result.set_item("table", outcome.table)?;
    Ok(result)
}

/// Writes the synthetic toy collection and a run config into `dir`.
#[pyfunction]
#[pyo3(signature = (dir, seed = 0))]
fn generate_toy(dir: PathBuf, seed: u64) -> PyResult<PathBuf> {
    let toy = synth::generate(&synth::ToyConfig::default()).map_err(py_err)?;
    synth::write_fixture(&dir, &toy, seed, synth::TOY_RUN_CONFIG).map_err(py_err)?;
    Ok(dir.join("toy.conf"))
}

#[pymodule]
fn pymimicrank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIndex>()?;
    m.add_class::<PyRankModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_sample, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toy, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
