//! End-to-end experiment runs.
//!
//! A run directory holds:
//!
//! ```text
//! manifest.json        config hash, seeds, offsets, format versions
//! config.txt           canonical effective config
//! index.bin            inverted index
//! annotations/train.tsv teacher training pairs
//! *.ckpt, teachers/    checkpoints (pate removes shards/ unless asked not to)
//! runs/<model>.trec    re-ranked eval runs
//! eval/<model>.tsv     per-query metrics
//! metrics.txt          MAP / P@20 / nDCG@20 table
//! agreement.tsv        pairwise agreement on the eval queries
//! ```
//!
//! Nothing here depends on wall-clock time or worker count, so a rerun with
//! the same config writes the same bytes. A failed run leaves a `FAILED` file
//! next to whatever it managed to write.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{
    annotate_with, build_index, format_annotations, read_corpus, read_queries, Annotation, Bm25Scorer,
    InvertedIndex, PairSampling, PoolScorer, QuerySet,
};
use crate::distill::{distill, DistillOutcome, DistillSettings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, format_metric_table, format_run, parse_qrels, EvalOptions, MetricReport, Qrels, QueryMetrics};
use crate::model::{init_params, read_embeddings, train, EmbeddingTable, RankModelParams, TrainingInstance};
use crate::pate::{partition_data, pate_distill, save_ensemble, train_teachers, AggregateScorer, PrivacyConfig, TeacherEnsemble};
use crate::scoring::{pairwise_agreement, rerank, Agreement, ModelScorer};
use crate::seeding::offsets;

pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Teacher on judged training queries, student distilled from it.
    Supervised,
    /// Teacher on BM25-labeled pairs only.
    Weak,
    /// Weakly supervised teacher, student distilled from it.
    Distill,
    /// Teacher ensemble on disjoint shards, students on aggregated labels.
    Pate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Weak => "weak",
            Mode::Distill => "distill",
            Mode::Pate => "pate",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "weak" => Ok(Mode::Weak),
            "distill" => Ok(Mode::Distill),
            "pate" => Ok(Mode::Pate),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected supervised, weak, distill or pate)"
            ))),
        }
    }
}

/// Component seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub weak_annotation: u64,
    pub supervised_annotation: u64,
    pub teacher: u64,
    pub partition: u64,
    pub student_annotation: u64,
    pub student: u64,
    pub noise: u64,
    pub eval_noise: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let at = |o: u64| master.wrapping_add(o);
        Seeds {
            master,
            weak_annotation: at(offsets::WEAK_ANNOTATION),
            supervised_annotation: at(offsets::SUPERVISED_ANNOTATION),
            teacher: at(offsets::TEACHER),
            partition: at(offsets::PARTITION),
            student_annotation: at(offsets::STUDENT_ANNOTATION),
            student: at(offsets::STUDENT),
            noise: at(offsets::NOISE),
            eval_noise: at(offsets::EVAL_NOISE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub mode: String,
    pub package_version: String,
    pub index_format: u32,
    pub checkpoint_format: u32,
    pub config_sha256: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub seeds: Seeds,
    pub seed_offsets: std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    /// Rows of the metric table, in order.
    pub rows: Vec<(String, MetricReport)>,
    pub agreement: Vec<(String, Agreement)>,
    pub table: String,
}

/// Inputs every mode shares.
struct Inputs {
    index: InvertedIndex,
    embeddings: Option<EmbeddingTable>,
    eval_queries: QuerySet,
    qrels: Qrels,
}

/// Graded judgments as pool labels; unjudged documents get grade 0.
pub struct QrelsScorer<'a> {
    pub queries: &'a QuerySet,
    pub qrels: &'a Qrels,
    pub index: &'a InvertedIndex,
}

impl PoolScorer for QrelsScorer<'_> {
    fn score_pool(&self, query_pos: usize, _query: &[String], pool: &[usize]) -> Result<Vec<f64>> {
        let qid = &self.queries.queries()[query_pos].id;
        let judged = self.qrels.query(qid);
        Ok(pool
            .iter()
            .map(|&d| {
                let id = &self.index.doc_ids()[d];
                judged.and_then(|j| j.get(id)).copied().unwrap_or(0) as f64
            })
            .collect())
    }
}

/// Plain mean of the teachers' scores, computed apart from the aggregator.
struct TeacherMean<'a> {
    scorers: Vec<ModelScorer<'a>>,
}

impl PoolScorer for TeacherMean<'_> {
    fn score_pool(&self, pos: usize, query: &[String], pool: &[usize]) -> Result<Vec<f64>> {
        let mut total = vec![0.0; pool.len()];
        for s in &self.scorers {
            for (t, v) in total.iter_mut().zip(s.score_pool(pos, query, pool)?) {
                *t += v;
            }
        }
        let n = self.scorers.len() as f64;
        Ok(total.into_iter().map(|t| t / n).collect())
    }
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Per-query metrics at full precision, then the means.
pub fn format_per_query(report: &MetricReport) -> String {
    let mut out = String::from("query\tAP\tP@20\tnDCG@20\n");
    for (q, m) in &report.per_query {
        let _ = writeln!(out, "{q}\t{}\t{}\t{}", m.average_precision, m.precision, m.ndcg);
    }
    let _ = writeln!(out, "all\t{}\t{}\t{}", report.map, report.precision, report.ndcg);
    out
}

/// Query-by-query mean of several reports over the same queries.
pub fn average_reports(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mut avg = reports[0].clone();
    for (q, m) in avg.per_query.iter_mut() {
        let all: Vec<&QueryMetrics> = reports.iter().filter_map(|r| r.per_query.get(q)).collect();
        m.average_precision = all.iter().map(|x| x.average_precision).sum::<f64>() / n;
        m.precision = all.iter().map(|x| x.precision).sum::<f64>() / n;
        m.ndcg = all.iter().map(|x| x.ndcg).sum::<f64>() / n;
    }
    avg.map = reports.iter().map(|r| r.map).sum::<f64>() / n;
    avg.precision = reports.iter().map(|r| r.precision).sum::<f64>() / n;
    avg.ndcg = reports.iter().map(|r| r.ndcg).sum::<f64>() / n;
    avg
}

struct Run<'a> {
    config: &'a RunConfig,
    seeds: Seeds,
    dir: RunDir,
    inputs: Inputs,
    rows: Vec<(String, MetricReport)>,
    agreement: Vec<(String, Agreement)>,
}

impl Run<'_> {
    fn sampling(&self, seed: u64) -> Result<PairSampling> {
        PairSampling::new(self.config.pool_size, self.config.pairs_per_query, seed)
    }

    fn queries(&self, key: &str) -> Result<QuerySet> {
        read_queries(&self.config.require_path(key)?)
    }

    fn save_annotation(&self, name: &str, annotation: &Annotation) -> Result<()> {
        self.dir
            .write(&format!("annotations/{name}.tsv"), format_annotations(&annotation.instances))?;
        Ok(())
    }

    /// Re-ranks the eval queries with `scorer` and writes the run and
    /// per-query files.
    fn evaluate(&self, file: &str, scorer: &dyn PoolScorer) -> Result<MetricReport> {
        let run = rerank(scorer, &self.inputs.index, &self.inputs.eval_queries, self.config.eval_depth)?;
        self.dir.write(&format!("runs/{file}.trec"), format_run(&run, file))?;
        let report = evaluate(
            &run,
            &self.inputs.qrels,
            EvalOptions {
                skip_empty: self.config.skip_empty,
            },
        );
        self.dir.write(&format!("eval/{file}.tsv"), format_per_query(&report))?;
        Ok(report)
    }

    fn train_teacher(&self, instances: &[TrainingInstance]) -> Result<RankModelParams> {
        let init = init_params(
            &self.config.teacher,
            self.inputs.index.vocabulary(),
            self.inputs.embeddings.as_ref(),
            &self.inputs.index,
            self.seeds.teacher,
        )?;
        Ok(train(init, instances, &self.inputs.index, self.config.teacher_epochs, self.seeds.teacher)?.params)
    }

    fn weak_annotation(&self) -> Result<Annotation> {
        let queries = self.queries("queries.train")?;
        let ann = annotate_with(
            &self.inputs.index,
            &queries,
            self.sampling(self.seeds.weak_annotation)?,
            &Bm25Scorer(&self.inputs.index),
        )?;
        self.save_annotation("train", &ann)?;
        Ok(ann)
    }

    fn student_settings(&self) -> Result<DistillSettings> {
        Ok(DistillSettings {
            student: self.config.student.clone(),
            sampling: self.sampling(self.seeds.student_annotation)?,
            epochs: self.config.student_epochs,
            seed: self.seeds.student,
        })
    }

    fn finish_student(&mut self, name: &str, file: &str, outcome: &DistillOutcome) -> Result<()> {
        self.dir.write(&format!("{file}.ckpt"), outcome.student.to_bytes())?;
        if let Some(f) = outcome.fidelity {
            self.agreement.push((format!("{file}_vs_labeler"), f));
        }
        let report = self.evaluate(file, &ModelScorer::new(&outcome.student, &self.inputs.index))?;
        self.rows.push((name.to_string(), report));
        Ok(())
    }

    fn teacher_and_student(&mut self, teacher: RankModelParams) -> Result<()> {
        self.dir.write("teacher.ckpt", teacher.to_bytes())?;
        let report = self.evaluate("teacher", &ModelScorer::new(&teacher, &self.inputs.index))?;
        self.rows.push(("Teacher".into(), report));
        let unlabeled = self.queries("queries.unlabeled")?;
        let outcome = distill(
            &teacher,
            &self.student_settings()?,
            &unlabeled,
            &self.inputs.index,
            self.inputs.embeddings.as_ref(),
            Some(&self.inputs.eval_queries),
        )?;
        self.finish_student("Student", "student", &outcome)
    }

    fn supervised(&mut self) -> Result<()> {
        let queries = self.queries("queries.train")?;
        let path = self.config.require_path("qrels.train")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let train_qrels = parse_qrels(&text, &path.display().to_string())?;
        let ann = annotate_with(
            &self.inputs.index,
            &queries,
            self.sampling(self.seeds.supervised_annotation)?,
            &QrelsScorer {
                queries: &queries,
                qrels: &train_qrels,
                index: &self.inputs.index,
            },
        )?;
        self.save_annotation("train", &ann)?;
        let teacher = self.train_teacher(&ann.instances)?;
        self.teacher_and_student(teacher)
    }

    fn weak(&mut self) -> Result<()> {
        let ann = self.weak_annotation()?;
        let teacher = self.train_teacher(&ann.instances)?;
        self.dir.write("teacher.ckpt", teacher.to_bytes())?;
        let bm25 = self.evaluate("bm25", &Bm25Scorer(&self.inputs.index))?;
        self.rows.push(("BM25".into(), bm25));
        let report = self.evaluate("teacher", &ModelScorer::new(&teacher, &self.inputs.index))?;
        self.rows.push(("Teacher".into(), report));
        Ok(())
    }

    fn distill(&mut self) -> Result<()> {
        let ann = self.weak_annotation()?;
        let teacher = self.train_teacher(&ann.instances)?;
        self.teacher_and_student(teacher)
    }

    fn pate(&mut self) -> Result<()> {
        let ann = self.weak_annotation()?;
        let privacy = PrivacyConfig {
            seed: self.seeds.noise,
            ..self.config.privacy
        };
        let partition = partition_data(&ann.instances, privacy.n_partitions, self.seeds.partition)?;
        let hashes = partition.shard_hashes();
        let shard_files: Vec<PathBuf> = partition
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| self.dir.write(&format!("shards/shard_{i}.tsv"), format_annotations(s)))
            .collect::<Result<_>>()?;
        let ensemble = train_teachers(
            &partition,
            &self.config.teacher,
            &self.inputs.index,
            self.inputs.embeddings.as_ref(),
            self.config.teacher_epochs,
            self.seeds.teacher,
            privacy,
        )?;
        drop(partition);
        save_ensemble(&self.dir.root.join("teachers"), &ensemble, &hashes)?;
        if !self.config.keep_shards {
            for f in &shard_files {
                std::fs::remove_file(f).map_err(|e| Error::io(f, e))?;
            }
            let shards_dir = self.dir.root.join("shards");
            std::fs::remove_dir(&shards_dir).map_err(|e| Error::io(&shards_dir, e))?;
        }
        self.pate_students(&ensemble)
    }

    fn pate_students(&mut self, ensemble: &TeacherEnsemble) -> Result<()> {
        let index = &self.inputs.index;
        let reports = ensemble
            .teachers
            .iter()
            .enumerate()
            .map(|(i, t)| self.evaluate(&format!("teacher_{i}"), &ModelScorer::new(t, index)))
            .collect::<Result<Vec<_>>>()?;
        let avg = average_reports(&reports);
        self.dir.write("eval/teachers_avg.tsv", format_per_query(&avg))?;

        let mean = TeacherMean {
            scorers: ensemble.teachers.iter().map(|t| ModelScorer::new(t, index)).collect(),
        };
        let clean = AggregateScorer::new(ensemble, index, 0.0, self.seeds.eval_noise);
        let noisy = AggregateScorer::new(ensemble, index, ensemble.privacy.noise_scale, self.seeds.eval_noise);
        let (queries, pool) = (&self.inputs.eval_queries, self.config.pool_size);
        let agreement = vec![
            (
                "non_noisy_aggregate_vs_teacher_mean".to_string(),
                pairwise_agreement(&mean, &clean, index, queries, pool)?,
            ),
            (
                "noisy_aggregate_vs_teacher_mean".to_string(),
                pairwise_agreement(&mean, &noisy, index, queries, pool)?,
            ),
            (
                "noisy_aggregate_vs_non_noisy_aggregate".to_string(),
                pairwise_agreement(&clean, &noisy, index, queries, pool)?,
            ),
        ];
        let clean_report = self.evaluate("aggregate_non_noisy", &clean)?;
        let noisy_report = self.evaluate("aggregate_noisy", &noisy)?;
        drop((mean, clean, noisy));
        self.rows.push(("Teachers (avg)".into(), avg));
        self.agreement.extend(agreement);

        let unlabeled = self.queries("queries.unlabeled")?;
        let settings = self.student_settings()?;
        let clean_ensemble = TeacherEnsemble {
            privacy: PrivacyConfig {
                noise_scale: 0.0,
                ..ensemble.privacy
            },
            ..ensemble.clone()
        };
        let student_clean = pate_distill(
            &clean_ensemble,
            &settings,
            &unlabeled,
            &self.inputs.index,
            self.inputs.embeddings.as_ref(),
            Some(&self.inputs.eval_queries),
        )?;
        self.rows.push(("Non-noisy aggregated teacher".into(), clean_report));
        self.finish_student("Student (non-noisy aggregation)", "student_non_noisy", &student_clean)?;

        let student_noisy = pate_distill(
            ensemble,
            &settings,
            &unlabeled,
            &self.inputs.index,
            self.inputs.embeddings.as_ref(),
            Some(&self.inputs.eval_queries),
        )?;
        self.rows.push(("Noisy aggregated teacher".into(), noisy_report));
        self.finish_student("Student (noisy aggregation)", "student", &student_noisy)
    }
}

/// Input paths each mode reads.
pub fn required_paths(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Supervised => &["corpus", "queries.train", "qrels.train", "queries.unlabeled", "queries.eval", "qrels"],
        Mode::Weak => &["corpus", "queries.train", "queries.eval", "qrels"],
        Mode::Distill | Mode::Pate => &["corpus", "queries.train", "queries.unlabeled", "queries.eval", "qrels"],
    }
}

pub fn manifest(config: &RunConfig, mode: Mode) -> Manifest {
    Manifest {
        manifest_version: MANIFEST_VERSION,
        mode: mode.as_str().to_string(),
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        index_format: crate::corpus::INDEX_VERSION,
        checkpoint_format: crate::model::CHECKPOINT_VERSION,
        config_sha256: config.sha256(),
        config: config
            .values
            .iter()
            .filter(|(k, _)| k.as_str() != "out" && k.as_str() != "jobs")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        seeds: Seeds::derive(config.seed),
        seed_offsets: offsets::ALL.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Runs `mode` into `out`, leaving a `FAILED` marker there on error.
///
/// Work runs on a pool of `config.jobs` threads (0 = all cores).
pub fn run_pipeline(config: &RunConfig, mode: Mode, out: &Path) -> Result<PipelineOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.jobs)))?;
    let result = pool.install(|| execute(config, mode, out));
    if let Err(e) = &result {
        let _ = std::fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn execute(config: &RunConfig, mode: Mode, out: &Path) -> Result<PipelineOutcome> {
    config.check_paths(required_paths(mode))?;
    let dir = RunDir { root: out.to_path_buf() };
    let manifest = manifest(config, mode);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    dir.write("manifest.json", text + "\n")?;
    dir.write("config.txt", config.canonical_text())?;

    let docs = read_corpus(&config.require_path("corpus")?)?;
    let index = build_index(&docs)?;
    drop(docs);
    dir.write("index.bin", index.to_bytes())?;
    let embeddings = match config.path("embeddings") {
        Some(p) => Some(read_embeddings(&p)?),
        None => None,
    };
    let eval_queries = read_queries(&config.require_path("queries.eval")?)?;
    let qrels_path = config.require_path("qrels")?;
    let qrels_text = std::fs::read_to_string(&qrels_path).map_err(|e| Error::io(&qrels_path, e))?;
    let qrels = parse_qrels(&qrels_text, &qrels_path.display().to_string())?;

    let mut run = Run {
        config,
        seeds: manifest.seeds,
        dir,
        inputs: Inputs {
            index,
            embeddings,
            eval_queries,
            qrels,
        },
        rows: Vec::new(),
        agreement: Vec::new(),
    };
    match mode {
        Mode::Supervised => run.supervised()?,
        Mode::Weak => run.weak()?,
        Mode::Distill => run.distill()?,
        Mode::Pate => run.pate()?,
    }

    let table_rows: Vec<(String, &MetricReport)> = run.rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    let table = format_metric_table(&table_rows);
    run.dir.write("metrics.txt", &table)?;
    let mut agreement = String::from("comparison\tpairs\tagreed\trate\n");
    for (name, a) in &run.agreement {
        let _ = writeln!(agreement, "{name}\t{}\t{}\t{}", a.pairs, a.agreed, a.rate());
    }
    run.dir.write("agreement.tsv", agreement)?;
    Ok(PipelineOutcome {
        dir: out.to_path_buf(),
        rows: run.rows,
        agreement: run.agreement,
        table,
    })
}
