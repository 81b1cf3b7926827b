use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimicrank::config::RunConfig;
use mimicrank::corpus::{
    annotate_queries, build_index, format_annotations, parse_annotations, read_corpus, read_queries, Bm25Scorer,
    InvertedIndex, PairSampling,
};
use mimicrank::distill::{distill, teacher_annotate, DistillSettings};
use mimicrank::error::{Error, Result};
use mimicrank::eval::{evaluate_run, format_metric_table, format_run, EvalOptions};
use mimicrank::model::{init_params, read_embeddings, train, EmbeddingTable, RankModelParams};
use mimicrank::pate::{load_ensemble, partition_data, pate_distill, save_ensemble, train_teachers, PrivacyConfig};
use mimicrank::pipeline::{format_per_query, run_pipeline, Mode, Seeds};
use mimicrank::scoring::{rerank, ModelScorer};
use mimicrank::synth;

/// Neural ranking by mimic learning, with private teacher aggregation.
#[derive(Parser)]
#[command(name = "mimicrank", version)]
struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a JSONL corpus.
    BuildIndex { corpus: PathBuf },
    /// Label sampled document pairs with BM25, or with a teacher model.
    Annotate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Label with this checkpoint instead of BM25.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train a teacher, or one teacher per partition with --partitions.
    TrainTeacher {
        #[command(flatten)]
        data: PairsArgs,
        /// Split the pairs into this many shards and write an ensemble directory.
        #[arg(long)]
        partitions: Option<usize>,
    },
    /// Train a student on a teacher's labels.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        student: StudentArgs,
    },
    /// Train a student on noisy aggregated labels from a teacher ensemble.
    Pate {
        #[arg(long)]
        ensemble: PathBuf,
        /// Laplace scale; defaults to the one stored with the ensemble.
        #[arg(long)]
        noise_scale: Option<f64>,
        #[command(flatten)]
        student: StudentArgs,
    },
    /// Re-rank BM25 candidates with a model and write a TREC run.
    Rank {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Checkpoint to rank with; plain BM25 when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        depth: usize,
        #[arg(long, default_value = "mimicrank")]
        tag: String,
    },
    /// MAP, P@20 and nDCG@20 of a run against judgments.
    Evaluate {
        run: PathBuf,
        qrels: PathBuf,
        #[arg(long)]
        skip_empty: bool,
        /// Also print per-query values.
        #[arg(long)]
        per_query: bool,
    },
    /// Run a whole experiment from --config into the --out directory.
    Pipeline {
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
    },
    /// Write the synthetic toy collection and a config for it.
    GenToy,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    index: PathBuf,
    /// Annotation file (query, doc1, doc2, s1, s2).
    #[arg(long)]
    pairs: PathBuf,
    /// Queries the pairs refer to.
    #[arg(long)]
    queries: PathBuf,
}

#[derive(Args)]
struct StudentArgs {
    #[arg(long)]
    index: PathBuf,
    /// Unlabeled queries to annotate.
    #[arg(long)]
    queries: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage_or_io() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

struct Ctx {
    config: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn seeds(&self) -> Seeds {
        Seeds::derive(self.config.seed)
    }

    fn embeddings(&self) -> Result<Option<EmbeddingTable>> {
        self.config.path("embeddings").map(|p| read_embeddings(&p)).transpose()
    }

    fn sampling(&self, seed: u64) -> Result<PairSampling> {
        PairSampling::new(self.config.pool_size, self.config.pairs_per_query, seed)
    }

    fn out(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--out is required for {what}")))
    }

    /// Writes to --out, or stdout when it is absent.
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => write_file(p, text.as_bytes()),
            None => {
                use std::io::Write;
                match std::io::stdout().lock().write_all(text.as_bytes()) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
                    _ => Ok(()),
                }
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_config(cli: &Cli, seed_required: bool) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(j) = cli.jobs {
        overrides.push(("jobs".to_string(), j.to_string()));
    }
    match &cli.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => {
            if !seed_required && cli.seed.is_none() {
                overrides.push(("seed".to_string(), "0".to_string()));
            }
            RunConfig::from_text("", "defaults", Path::new(""), &overrides)
        }
    }
}

fn read_pairs(pairs: &Path, queries: &Path) -> Result<mimicrank::corpus::Annotation> {
    let qs = read_queries(queries)?;
    let text = std::fs::read_to_string(pairs).map_err(|e| Error::io(pairs, e))?;
    parse_annotations(&text, &qs, &pairs.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    let seed_required = !matches!(
        cli.command,
        Command::BuildIndex { .. } | Command::Rank { .. } | Command::Evaluate { .. } | Command::GenToy
    );
    let config = load_config(&cli, seed_required)?;
    if !matches!(cli.command, Command::Pipeline { .. }) {
        // Ignore failure: a global pool may already exist in embedded use.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build_global();
    }
    let ctx = Ctx { config, out: cli.out };

    match cli.command {
        Command::BuildIndex { corpus } => {
            let index = build_index(&read_corpus(&corpus)?)?;
            index.save(ctx.out("build-index")?)?;
            eprintln!("indexed {} documents", index.doc_count());
        }
        Command::Annotate { index, queries, teacher } => {
            let index = InvertedIndex::load(&index)?;
            let queries = read_queries(&queries)?;
            let seeds = ctx.seeds();
            let ann = match teacher {
                Some(t) => teacher_annotate(
                    &RankModelParams::load(&t)?,
                    &queries,
                    &index,
                    ctx.sampling(seeds.student_annotation)?,
                )?,
                None => annotate_queries(
                    &index,
                    &queries,
                    ctx.config.pool_size,
                    ctx.config.pairs_per_query,
                    seeds.weak_annotation,
                )?,
            };
            ctx.emit(&format_annotations(&ann.instances))?;
            eprintln!(
                "{} pairs, {} ties discarded, {} queries skipped",
                ann.instances.len(),
                ann.discarded_ties,
                ann.skipped_queries.len()
            );
        }
        Command::TrainTeacher { data, partitions } => {
            let index = InvertedIndex::load(&data.index)?;
            let ann = read_pairs(&data.pairs, &data.queries)?;
            let embeddings = ctx.embeddings()?;
            let seeds = ctx.seeds();
            let out = ctx.out("train-teacher")?;
            match partitions {
                None => {
                    let init = init_params(&ctx.config.teacher, index.vocabulary(), embeddings.as_ref(), &index, seeds.teacher)?;
                    let trained = train(init, &ann.instances, &index, ctx.config.teacher_epochs, seeds.teacher)?;
                    trained.params.save(out)?;
                    if let Some(last) = trained.loss_trace.last() {
                        eprintln!("final epoch loss {last:.6}");
                    }
                }
                Some(n) => {
                    let privacy = PrivacyConfig {
                        n_partitions: n,
                        noise_scale: ctx.config.privacy.noise_scale,
                        seed: seeds.noise,
                    };
                    privacy.validate()?;
                    let partition = partition_data(&ann.instances, n, seeds.partition)?;
                    let ensemble = train_teachers(
                        &partition,
                        &ctx.config.teacher,
                        &index,
                        embeddings.as_ref(),
                        ctx.config.teacher_epochs,
                        seeds.teacher,
                        privacy,
                    )?;
                    save_ensemble(out, &ensemble, &partition.shard_hashes())?;
                    eprintln!("trained {n} teachers");
                }
            }
        }
        Command::Distill { teacher, student } => {
            let index = InvertedIndex::load(&student.index)?;
            let queries = read_queries(&student.queries)?;
            let teacher = RankModelParams::load(&teacher)?;
            let settings = student_settings(&ctx)?;
            let outcome = distill(&teacher, &settings, &queries, &index, ctx.embeddings()?.as_ref(), None)?;
            outcome.student.save(ctx.out("distill")?)?;
            eprintln!("student trained on {} pairs", outcome.instances);
        }
        Command::Pate {
            ensemble,
            noise_scale,
            student,
        } => {
            let index = InvertedIndex::load(&student.index)?;
            let queries = read_queries(&student.queries)?;
            let (mut ensemble, _) = load_ensemble(&ensemble)?;
            if let Some(b) = noise_scale {
                ensemble.privacy.noise_scale = b;
                ensemble.privacy.validate()?;
            }
            let settings = student_settings(&ctx)?;
            let outcome = pate_distill(&ensemble, &settings, &queries, &index, ctx.embeddings()?.as_ref(), None)?;
            outcome.student.save(ctx.out("pate")?)?;
            eprintln!("student trained on {} noisy-labeled pairs", outcome.instances);
        }
        Command::Rank {
            index,
            queries,
            model,
            depth,
            tag,
        } => {
            let index = InvertedIndex::load(&index)?;
            let queries = read_queries(&queries)?;
            let run = match model {
                Some(m) => {
                    let params = RankModelParams::load(&m)?;
                    rerank(&ModelScorer::new(&params, &index), &index, &queries, depth)?
                }
                None => rerank(&Bm25Scorer(&index), &index, &queries, depth)?,
            };
            ctx.emit(&format_run(&run, &tag))?;
        }
        Command::Evaluate {
            run,
            qrels,
            skip_empty,
            per_query,
        } => {
            let report = evaluate_run(&run, &qrels, EvalOptions { skip_empty })?;
            for w in report.warnings() {
                eprintln!("warning: {w}");
            }
            let name = run.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut text = format_metric_table(&[(name, &report)]);
            if per_query {
                text.push('\n');
                text.push_str(&format_per_query(&report));
            }
            ctx.emit(&text)?;
        }
        Command::Pipeline { mode } => {
            if cli.config.is_none() {
                return Err(Error::Config("pipeline needs --config".into()));
            }
            let out = match &ctx.out {
                Some(p) => p.clone(),
                None => ctx.config.path("out").expect("out has a default"),
            };
            let outcome = run_pipeline(&ctx.config, mode, &out)?;
            print!("{}", outcome.table);
            for (name, a) in &outcome.agreement {
                println!("agreement {name}: {:.4} ({} / {} pairs)", a.rate(), a.agreed, a.pairs);
            }
        }
        Command::GenToy => {
            let out = ctx.out("gen-toy")?;
            let toy = synth::generate(&synth::ToyConfig::default())?;
            synth::write_fixture(out, &toy, ctx.config.seed, synth::TOY_RUN_CONFIG)?;
            eprintln!("wrote {} documents to {}", toy.docs.len(), out.display());
        }
    }
    Ok(())
}

fn student_settings(ctx: &Ctx) -> Result<DistillSettings> {
    let seeds = ctx.seeds();
    Ok(DistillSettings {
        student: ctx.config.student.clone(),
        sampling: ctx.sampling(seeds.student_annotation)?,
        epochs: ctx.config.student_epochs,
        seed: seeds.student,
    })
}
