use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CORPUS: &str = r#"{"id": "d1", "text": "oak pine birch"}
{"id": "d2", "text": "oak oak cedar"}
{"id": "d3", "text": "elm yew fir pine"}
{"id": "d4", "text": "birch cedar elm"}
"#;

fn mimicrank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimicrank"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_input_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = mimicrank(dir.path(), &["build-index", "nowhere.jsonl", "--out", "idx.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.jsonl"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mimicrank(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn seeded_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.jsonl"), CORPUS).unwrap();
    fs::write(dir.path().join("q.tsv"), "q1\toak pine\n").unwrap();
    assert!(mimicrank(dir.path(), &["build-index", "corpus.jsonl", "--out", "idx.bin"]).status.success());
    let out = mimicrank(dir.path(), &["annotate", "--index", "idx.bin", "--queries", "q.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn build_index_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.jsonl"), CORPUS).unwrap();
    for name in ["a.bin", "b.bin"] {
        let out = mimicrank(dir.path(), &["build-index", "corpus.jsonl", "--out", name]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = fs::read(dir.path().join("a.bin")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(dir.path().join("b.bin")).unwrap());
}

#[test]
fn annotate_then_rank_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("corpus.jsonl"), CORPUS).unwrap();
    fs::write(p.join("q.tsv"), "q1\toak pine\nq2\tcedar elm\n").unwrap();
    fs::write(p.join("qrels.txt"), "q1 0 d1 1\nq1 0 d2 1\nq2 0 d4 2\n").unwrap();
    assert!(mimicrank(p, &["build-index", "corpus.jsonl", "--out", "idx.bin"]).status.success());

    let ann = mimicrank(p, &["--seed", "3", "annotate", "--index", "idx.bin", "--queries", "q.tsv"]);
    assert!(ann.status.success(), "{}", stderr(&ann));
    let again = mimicrank(p, &["--seed", "3", "annotate", "--index", "idx.bin", "--queries", "q.tsv"]);
    assert_eq!(ann.stdout, again.stdout);
    assert!(!ann.stdout.is_empty());

    let out = mimicrank(p, &["rank", "--index", "idx.bin", "--queries", "q.tsv", "--out", "bm25.trec"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = fs::read_to_string(p.join("bm25.trec")).unwrap();
    assert!(run.lines().next().unwrap().starts_with("q1 Q0 "));

    let eval = mimicrank(p, &["evaluate", "bm25.trec", "qrels.txt"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.contains("MAP"), "{text}");
}

#[test]
fn private_data_is_not_an_argument_of_the_public_stages() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["distill", "pate"] {
        let out = mimicrank(dir.path(), &[cmd, "--help"]);
        assert!(out.status.success());
        let help = String::from_utf8(out.stdout).unwrap();
        assert!(!help.contains("--qrels"), "{cmd}: {help}");
        assert!(!help.contains("--pairs"), "{cmd}: {help}");
    }
}

#[test]
fn failed_pipeline_leaves_marker() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("corpus.jsonl"), CORPUS).unwrap();
    // No training query matches any document, so weak annotation yields no pairs.
    fs::write(p.join("train.tsv"), "q1\tzebra\nq2\tquokka\n").unwrap();
    fs::write(p.join("eval.tsv"), "q9\toak\n").unwrap();
    fs::write(p.join("qrels.txt"), "q9 0 d1 1\n").unwrap();
    fs::write(
        p.join("run.conf"),
        "corpus = corpus.jsonl\nqueries.train = train.tsv\nqueries.eval = eval.tsv\nqrels = qrels.txt\nseed = 1\nout = out\n",
    )
    .unwrap();
    let out = mimicrank(p, &["--config", "run.conf", "pipeline", "--mode", "weak"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let marker = fs::read_to_string(p.join("out/FAILED")).unwrap();
    assert!(!marker.trim().is_empty());
}
