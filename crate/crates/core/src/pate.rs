//! Private aggregation of a teacher ensemble.
//!
//! Sensitive training instances are split into disjoint shards, one teacher
//! is trained per shard, and each teacher's score is perturbed with Laplace
//! noise before the scores are averaged. The averaged noisy score labels the
//! student's pairs, so the student never sees a shard.
//!
//! No formal privacy accounting is done here; `noise_scale` is the Laplace
//! scale `b` and nothing more.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{format_annotations, InvertedIndex, PoolScorer, QuerySet};
use crate::distill::{distill_from, DistillOutcome, DistillSettings};
use crate::error::{Error, Result};
use crate::model::{init_params, train, DocEncoder, EmbeddingTable, RankModelConfig, RankModelParams, TrainingInstance};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyConfig {
    pub n_partitions: usize,
    /// Laplace scale `b`; zero disables noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_partitions == 0 {
            return Err(Error::Config("n_partitions must be at least 1".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be finite and >= 0, got {}", self.noise_scale)));
        }
        Ok(())
    }
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            n_partitions: 3,
            noise_scale: 0.05,
            seed: 0,
        }
    }
}

/// Disjoint shards of the training instances, one per teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<TrainingInstance>>,
}

impl Partition {
    /// SHA-256 of each shard in annotation-file form.
    pub fn shard_hashes(&self) -> Vec<String> {
        self.shards
            .iter()
            .map(|s| hex(&Sha256::digest(format_annotations(s).as_bytes())))
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded shuffle followed by round-robin assignment; shard sizes differ by at most one.
pub fn partition_data(instances: &[TrainingInstance], n: usize, seed: u64) -> Result<Partition> {
    if n == 0 {
        return Err(Error::Config("cannot split into zero partitions".into()));
    }
    if n > instances.len() {
        return Err(Error::Invalid(format!(
            "{n} partitions requested for {} instances; a teacher would get no data",
            instances.len()
        )));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeding::rng(seed));
    let mut shards = vec![Vec::with_capacity(instances.len() / n + 1); n];
    for (k, &i) in order.iter().enumerate() {
        shards[k % n].push(instances[i].clone());
    }
    Ok(Partition { shards })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    pub teachers: Vec<RankModelParams>,
    pub privacy: PrivacyConfig,
    /// Seed used to initialize and train each teacher.
    pub teacher_seeds: Vec<u64>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<RankModelParams>, privacy: PrivacyConfig, teacher_seeds: Vec<u64>) -> Result<Self> {
        privacy.validate()?;
        if teachers.is_empty() || teachers.len() != privacy.n_partitions || teacher_seeds.len() != teachers.len() {
            return Err(Error::Invalid(format!(
                "{} teachers and {} seeds for {} partitions",
                teachers.len(),
                teacher_seeds.len(),
                privacy.n_partitions
            )));
        }
        if teachers.iter().any(|t| t.vocabulary != teachers[0].vocabulary) {
            return Err(Error::Invalid("teachers do not share one vocabulary".into()));
        }
        Ok(TeacherEnsemble {
            teachers,
            privacy,
            teacher_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}

/// Trains one teacher per shard in parallel. Teacher `i` uses seed `base_seed + i`.
pub fn train_teachers(
    partition: &Partition,
    config: &RankModelConfig,
    index: &InvertedIndex,
    embeddings: Option<&EmbeddingTable>,
    epochs: usize,
    base_seed: u64,
    privacy: PrivacyConfig,
) -> Result<TeacherEnsemble> {
    if partition.shards.len() != privacy.n_partitions {
        return Err(Error::Invalid(format!(
            "{} shards for {} partitions",
            partition.shards.len(),
            privacy.n_partitions
        )));
    }
    if let Some(i) = partition.shards.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!("shard {i} is empty")));
    }
    let seeds: Vec<u64> = (0..partition.shards.len()).map(|i| base_seed + i as u64).collect();
    let teachers = partition
        .shards
        .par_iter()
        .zip(&seeds)
        .map(|(shard, &seed)| {
            let init = init_params(config, index.vocabulary(), embeddings, index, seed)?;
            Ok(train(init, shard, index, epochs, seed)?.params)
        })
        .collect::<Result<Vec<_>>>()?;
    TeacherEnsemble::new(teachers, privacy, seeds)
}

/// Inverse-CDF Laplace transform `-b·sgn(u)·ln(1 - 2|u|)` for `u` in `(-1/2, 1/2)`.
pub fn laplace_sample(scale: f64, u: f64) -> f64 {
    if scale == 0.0 || u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draws one Laplace(0, `scale`) variate. `u` is taken from the open interval
/// so the transform never hits `ln(0)`.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    loop {
        let r: f64 = rng.gen();
        if r > 0.0 {
            return laplace_sample(scale, r - 0.5);
        }
    }
}

/// `(1/n)·Σ_i (score_i + Laplace(b))`, summed left to right over teachers.
pub fn aggregate_scores<R: Rng + ?Sized>(scores: &[f64], noise_scale: f64, rng: &mut R) -> f64 {
    let mut sum = 0.0;
    for &s in scores {
        sum += s + sample_laplace(noise_scale, rng);
    }
    sum / scores.len() as f64
}

/// Noisy aggregated score of one query-document pair.
pub fn noisy_aggregate<S: AsRef<str>, T: AsRef<str>, R: Rng + ?Sized>(
    ensemble: &TeacherEnsemble,
    query: &[S],
    doc: &[T],
    rng: &mut R,
) -> Result<f64> {
    let scores = ensemble
        .teachers
        .iter()
        .map(|t| t.score(query, doc))
        .collect::<Result<Vec<f64>>>()?;
    Ok(aggregate_scores(&scores, ensemble.privacy.noise_scale, rng))
}

/// The ensemble as a pool scorer. Each query draws noise from its own stream
/// `(seed, query position)`; within a query, draws go document by document in
/// pool order and teacher by teacher within a document.
pub struct AggregateScorer<'a> {
    teachers: Vec<(&'a RankModelParams, DocEncoder<'a>)>,
    noise_scale: f64,
    seed: u64,
}

impl<'a> AggregateScorer<'a> {
    pub fn new(ensemble: &'a TeacherEnsemble, index: &'a InvertedIndex, noise_scale: f64, seed: u64) -> Self {
        AggregateScorer {
            teachers: ensemble
                .teachers
                .iter()
                .map(|t| (t, DocEncoder::new(t, index)))
                .collect(),
            noise_scale,
            seed,
        }
    }

    /// Uses the ensemble's own noise scale and seed.
    pub fn noisy(ensemble: &'a TeacherEnsemble, index: &'a InvertedIndex) -> Self {
        Self::new(ensemble, index, ensemble.privacy.noise_scale, ensemble.privacy.seed)
    }

    /// Exact mean of teacher scores.
    pub fn mean(ensemble: &'a TeacherEnsemble, index: &'a InvertedIndex) -> Self {
        Self::new(ensemble, index, 0.0, 0)
    }
}

impl PoolScorer for AggregateScorer<'_> {
    fn score_pool(&self, query_pos: usize, query: &[String], pool: &[usize]) -> Result<Vec<f64>> {
        let per_teacher = self
            .teachers
            .iter()
            .map(|(t, enc)| t.score_docs(enc, query, pool))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let mut rng = seeding::stream_rng(self.seed, query_pos as u64);
        let mut scores = vec![0.0; self.teachers.len()];
        Ok((0..pool.len())
            .map(|d| {
                for (s, t) in scores.iter_mut().zip(&per_teacher) {
                    *s = t[d];
                }
                aggregate_scores(&scores, self.noise_scale, &mut rng)
            })
            .collect())
    }
}

/// Trains a student on noisy aggregated labels. Fidelity is measured against
/// the noise-free teacher mean.
pub fn pate_distill(
    ensemble: &TeacherEnsemble,
    settings: &DistillSettings,
    unlabeled: &QuerySet,
    index: &InvertedIndex,
    embeddings: Option<&EmbeddingTable>,
    held_out: Option<&QuerySet>,
) -> Result<DistillOutcome> {
    let labeler = AggregateScorer::noisy(ensemble, index);
    let reference = AggregateScorer::mean(ensemble, index);
    distill_from(&labeler, &reference, settings, unlabeled, index, embeddings, held_out)
}

const MANIFEST_FILE: &str = "manifest.json";
const ENSEMBLE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub n_partitions: usize,
    pub noise_scale: f64,
    pub noise_seed: u64,
    pub teacher_seeds: Vec<u64>,
    pub teachers: Vec<String>,
    /// SHA-256 of each shard the teachers were trained on.
    pub shard_sha256: Vec<String>,
}

/// Writes `teacher_<i>.ckpt` files and a JSON manifest into `dir`.
pub fn save_ensemble(dir: &Path, ensemble: &TeacherEnsemble, shard_hashes: &[String]) -> Result<EnsembleManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ensemble.len());
    for (i, t) in ensemble.teachers.iter().enumerate() {
        let name = format!("teacher_{i}.ckpt");
        t.save(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = EnsembleManifest {
        format_version: ENSEMBLE_FORMAT,
        n_partitions: ensemble.privacy.n_partitions,
        noise_scale: ensemble.privacy.noise_scale,
        noise_seed: ensemble.privacy.seed,
        teacher_seeds: ensemble.teacher_seeds.clone(),
        teachers: files,
        shard_sha256: shard_hashes.to_vec(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_ensemble(dir: &Path) -> Result<(TeacherEnsemble, EnsembleManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EnsembleManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    if manifest.format_version != ENSEMBLE_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported ensemble format {}",
            manifest.format_version
        )));
    }
    let teachers = manifest
        .teachers
        .iter()
        .map(|f| RankModelParams::load(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let privacy = PrivacyConfig {
        n_partitions: manifest.n_partitions,
        noise_scale: manifest.noise_scale,
        seed: manifest.noise_seed,
    };
    let ensemble = TeacherEnsemble::new(teachers, privacy, manifest.teacher_seeds.clone())?;
    Ok((ensemble, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, Document};

    fn instances(n: usize) -> Vec<TrainingInstance> {
        (0..n)
            .map(|i| TrainingInstance {
                query_id: format!("q{i}"),
                query: vec!["a".into()],
                doc1: "d1".into(),
                doc2: "d2".into(),
                s1: i as f64 + 1.0,
                s2: 0.0,
            })
            .collect()
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let sizes = |p: &Partition| p.shards.iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(&partition_data(&instances(9), 3, 1).unwrap()), vec![3, 3, 3]);
        assert_eq!(sizes(&partition_data(&instances(10), 3, 1).unwrap()), vec![4, 3, 3]);
        assert_eq!(partition_data(&instances(10), 3, 5).unwrap(), partition_data(&instances(10), 3, 5).unwrap());
        assert!(partition_data(&instances(2), 3, 1).is_err());
        assert!(partition_data(&instances(2), 0, 1).is_err());
    }

    #[test]
    fn laplace_examples() {
        assert_eq!(laplace_sample(1.0, 0.0), 0.0);
        assert!((laplace_sample(1.0, 0.25) - 0.5f64.ln().abs()).abs() < 1e-15);
        assert!((laplace_sample(1.0, 0.25) - 0.6931).abs() < 1e-4);
        assert_eq!(laplace_sample(1.0, -0.25), -laplace_sample(1.0, 0.25));
        assert_eq!(laplace_sample(0.0, 0.4), 0.0);
    }

    #[test]
    fn aggregate_without_noise_is_the_mean() {
        let mut rng = seeding::rng(0);
        let v = aggregate_scores(&[0.2, 0.4, 0.6], 0.0, &mut rng);
        assert_eq!(v, (0.2 + 0.4 + 0.6) / 3.0);
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(aggregate_scores(&[0.37], 0.0, &mut rng), 0.37);

        let mut a = seeding::rng(4);
        let mut b = seeding::rng(4);
        assert_eq!(
            aggregate_scores(&[0.1, 0.2], 0.5, &mut a),
            aggregate_scores(&[0.1, 0.2], 0.5, &mut b)
        );
    }

    #[test]
    fn noisy_aggregate_single_teacher_is_identity() {
        let idx = build_index(&[Document::new("d1", "a b"), Document::new("d2", "b c")]).unwrap();
        let cfg = RankModelConfig {
            embedding_dim: 3,
            hidden_layers: 1,
            hidden_size: 4,
            dropout_keep: 1.0,
            learning_rate: 1e-2,
            batch_size: 2,
            train_embeddings: true,
            train_term_weights: true,
        };
        let t = init_params(&cfg, idx.vocabulary(), None, &idx, 3).unwrap();
        let privacy = PrivacyConfig {
            n_partitions: 1,
            noise_scale: 0.0,
            seed: 0,
        };
        let ens = TeacherEnsemble::new(vec![t.clone()], privacy, vec![3]).unwrap();
        let mut rng = seeding::rng(1);
        assert_eq!(
            noisy_aggregate(&ens, &["a"], &["b", "c"], &mut rng).unwrap(),
            t.score(&["a"], &["b", "c"]).unwrap()
        );
    }
}
