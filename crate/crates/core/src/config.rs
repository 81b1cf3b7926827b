//! Run configuration: a flat `key = value` file with dotted section keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! corpus = data/corpus.jsonl
//! seed = 7
//! teacher.hidden_size = 512
//! privacy.noise_scale = 0.05
//! ```
//!
//! Relative paths resolve against the config file's directory. Model
//! defaults are the teacher and student columns of the reference setup;
//! `dropout` is the drop rate, not the keep probability.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::RankModelConfig;
use crate::pate::PrivacyConfig;

/// Every accepted key with its default; `None` means no default.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("corpus", None),
    ("queries.train", None),
    ("queries.unlabeled", None),
    ("queries.eval", None),
    ("qrels", None),
    ("qrels.train", None),
    ("embeddings", None),
    ("out", Some("run")),
    ("seed", None),
    ("jobs", Some("0")),
    ("teacher.embedding_dim", Some("500")),
    ("teacher.hidden_layers", Some("3")),
    ("teacher.hidden_size", Some("512")),
    ("teacher.dropout", Some("0.2")),
    ("teacher.learning_rate", Some("0.001")),
    ("teacher.batch_size", Some("512")),
    ("teacher.train_embeddings", Some("true")),
    ("teacher.train_term_weights", Some("true")),
    ("teacher.epochs", Some("10")),
    ("student.embedding_dim", Some("300")),
    ("student.hidden_layers", Some("3")),
    ("student.hidden_size", Some("128")),
    ("student.dropout", Some("0.1")),
    ("student.learning_rate", Some("0.001")),
    ("student.batch_size", Some("512")),
    ("student.train_embeddings", Some("true")),
    ("student.train_term_weights", Some("true")),
    ("student.epochs", Some("10")),
    ("privacy.n_partitions", Some("3")),
    ("privacy.noise_scale", Some("0.05")),
    ("privacy.keep_shards", Some("false")),
    ("annotation.pool_size", Some("100")),
    ("annotation.pairs_per_query", Some("20")),
    ("eval.depth", Some("100")),
    ("eval.skip_empty", Some("false")),
];

const PATH_KEYS: &[&str] = &[
    "corpus",
    "queries.train",
    "queries.unlabeled",
    "queries.eval",
    "qrels",
    "qrels.train",
    "embeddings",
];

/// Keys that do not affect results and are left out of the config hash.
const UNHASHED_KEYS: &[&str] = &["out", "jobs"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Effective value of every set or defaulted key, as written.
    pub values: BTreeMap<String, String>,
    pub base_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub teacher: RankModelConfig,
    pub teacher_epochs: usize,
    pub student: RankModelConfig,
    pub student_epochs: usize,
    pub privacy: PrivacyConfig,
    pub keep_shards: bool,
    pub pool_size: usize,
    pub pairs_per_query: usize,
    pub eval_depth: usize,
    pub skip_empty: bool,
}

/// Splits `key = value` lines. Later duplicates are an error.
pub fn parse_pairs(text: &str, context: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(context, i + 1, format!("expected key = value, got {line:?}")));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::parse(context, i + 1, format!("unknown key {k:?}")));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::parse(context, i + 1, format!("key {k:?} set twice")));
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = values
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))?;
    raw.parse()
        .map_err(|e| Error::Config(format!("bad value {raw:?} for {key}: {e}")))
}

fn model_config(values: &BTreeMap<String, String>, section: &str) -> Result<RankModelConfig> {
    let key = |k: &str| format!("{section}.{k}");
    let dropout: f64 = parse_value(values, &key("dropout"))?;
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("{section}.dropout must lie in [0, 1), got {dropout}")));
    }
    let config = RankModelConfig {
        embedding_dim: parse_value(values, &key("embedding_dim"))?,
        hidden_layers: parse_value(values, &key("hidden_layers"))?,
        hidden_size: parse_value(values, &key("hidden_size"))?,
        dropout_keep: 1.0 - dropout,
        learning_rate: parse_value(values, &key("learning_rate"))?,
        batch_size: parse_value(values, &key("batch_size"))?,
        train_embeddings: parse_value(values, &key("train_embeddings"))?,
        train_term_weights: parse_value(values, &key("train_term_weights"))?,
    };
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    /// Builds a config from file text plus `overrides`, which win over the
    /// file. Paths are not checked here; see [`RunConfig::check_paths`].
    pub fn from_text(text: &str, context: &str, base_dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut values = parse_pairs(text, context)?;
        for (k, v) in overrides {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            values.insert(k.clone(), v.clone());
        }
        for (k, default) in KEYS {
            if let Some(d) = default {
                values.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }
        let seed = parse_value(&values, "seed")?;
        let privacy = PrivacyConfig {
            n_partitions: parse_value(&values, "privacy.n_partitions")?,
            noise_scale: parse_value(&values, "privacy.noise_scale")?,
            seed: 0,
        };
        privacy.validate()?;
        let config = RunConfig {
            base_dir: base_dir.to_path_buf(),
            seed,
            jobs: parse_value(&values, "jobs")?,
            teacher: model_config(&values, "teacher")?,
            teacher_epochs: parse_value(&values, "teacher.epochs")?,
            student: model_config(&values, "student")?,
            student_epochs: parse_value(&values, "student.epochs")?,
            privacy,
            keep_shards: parse_value(&values, "privacy.keep_shards")?,
            pool_size: parse_value(&values, "annotation.pool_size")?,
            pairs_per_query: parse_value(&values, "annotation.pairs_per_query")?,
            eval_depth: parse_value(&values, "eval.depth")?,
            skip_empty: parse_value(&values, "eval.skip_empty")?,
            values,
        };
        if config.pool_size < 2 {
            return Err(Error::Config("annotation.pool_size must be at least 2".into()));
        }
        if config.eval_depth == 0 {
            return Err(Error::Config("eval.depth must be positive".into()));
        }
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &path.display().to_string(), &base, overrides)
    }

    /// Resolved path for a path key, if set.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        debug_assert!(PATH_KEYS.contains(&key) || key == "out");
        self.values.get(key).map(|v| self.base_dir.join(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    /// Fails on the first `keys` entry that is unset or names a missing file.
    pub fn check_paths(&self, keys: &[&str]) -> Result<()> {
        for key in keys {
            let path = self.require_path(key)?;
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("{key} not found")),
                ));
            }
        }
        if let Some(path) = self.path("embeddings") {
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "embeddings not found"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` text of every result-affecting key, sorted.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if UNHASHED_KEYS.contains(&k.as_str()) {
                continue;
            }
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn sha256(&self) -> String {
        crate::pate::hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reference_setup() {
        let c = RunConfig::from_text("seed = 1\n", "t", Path::new("."), &[]).unwrap();
        assert_eq!(c.teacher.hidden_layers, 3);
        assert_eq!(c.teacher.hidden_size, 512);
        assert_eq!(c.teacher.embedding_dim, 500);
        assert!((c.teacher.dropout_keep - 0.8).abs() < 1e-15);
        assert_eq!(c.student.hidden_size, 128);
        assert_eq!(c.student.embedding_dim, 300);
        assert!((c.student.dropout_keep - 0.9).abs() < 1e-15);
        assert_eq!(c.teacher.batch_size, 512);
        assert_eq!(c.student.learning_rate, 1e-3);
        assert_eq!(c.privacy.n_partitions, 3);
        assert_eq!(c.privacy.noise_scale, 0.05);
        assert_eq!((c.pool_size, c.pairs_per_query), (100, 20));
    }

    #[test]
    fn seed_is_mandatory_and_keys_are_checked() {
        assert!(matches!(
            RunConfig::from_text("", "t", Path::new("."), &[]),
            Err(Error::Config(_))
        ));
        let with_override =
            RunConfig::from_text("", "t", Path::new("."), &[("seed".into(), "4".into())]).unwrap();
        assert_eq!(with_override.seed, 4);
        assert!(matches!(
            RunConfig::from_text("seed = 1\nteacher.size = 3\n", "t", Path::new("."), &[]),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(RunConfig::from_text("seed = 1\nseed = 2\n", "t", Path::new("."), &[]).is_err());
        assert!(RunConfig::from_text("seed = x\n", "t", Path::new("."), &[]).is_err());
        assert!(RunConfig::from_text("seed = 1\nstudent.dropout = 1\n", "t", Path::new("."), &[]).is_err());
    }

    #[test]
    fn hash_ignores_out_and_jobs_and_comments() {
        let a = RunConfig::from_text("seed = 1\nout = a\njobs = 1\n", "t", Path::new("."), &[]).unwrap();
        let b = RunConfig::from_text("# x\nseed=1\nout = b\n", "t", Path::new("."), &[]).unwrap();
        let c = RunConfig::from_text("seed = 2\n", "t", Path::new("."), &[]).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        assert_ne!(a.sha256(), c.sha256());
    }

    #[test]
    fn paths_resolve_against_base_and_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.jsonl"), "").unwrap();
        let c = RunConfig::from_text("seed = 1\ncorpus = c.jsonl\nqrels = nope\n", "t", dir.path(), &[]).unwrap();
        assert_eq!(c.path("corpus").unwrap(), dir.path().join("c.jsonl"));
        c.check_paths(&["corpus"]).unwrap();
        let err = c.check_paths(&["corpus", "qrels"]).unwrap_err();
        assert!(err.to_string().contains("nope"));
        assert!(matches!(c.check_paths(&["queries.eval"]), Err(Error::Config(_))));
    }
}
