use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ltt_core::{bleu, remove_repeated_bigrams, AttentionDump};
use tempfile::TempDir;

fn ltt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ltt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SOURCES: [&str; 10] = [
    "abc", "cab", "bca", "aab", "cc", "abca", "ba", "cbc", "acb", "bb",
];

fn reversed(text: &str) -> String {
    text.chars().rev().collect()
}

fn tiny_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let src = SOURCES.join("\n") + "\n";
    let tgt = SOURCES.map(reversed).join("\n") + "\n";
    (write(dir, "train.src", &src), write(dir, "train.tgt", &tgt))
}

fn train_tiny(dir: &Path, out: &Path, seed: &str) -> Output {
    let (src, tgt) = tiny_corpus(dir);
    ltt(&[
        "train", "--train-src", s(&src), "--train-tgt", s(&tgt), "--out-dir", s(out),
        "--hidden", "8", "--epochs", "1", "--seed", seed,
    ])
}

#[test]
fn train_without_source_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (_, tgt) = tiny_corpus(dir.path());
    let o = ltt(&["train", "--train-tgt", s(&tgt), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--train-src"), "{}", stderr(&o));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn train_with_missing_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (src, _) = tiny_corpus(dir.path());
    let missing = dir.path().join("nope.tgt");
    let o = ltt(&[
        "train", "--train-src", s(&src), "--train-tgt", s(&missing), "--out-dir", s(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.tgt"));
}

#[test]
fn one_epoch_writes_one_checkpoint_and_a_log() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = train_tiny(dir.path(), &out, "3");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let checkpoints: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ltt"))
        .collect();
    assert_eq!(checkpoints.len(), 1);
    let log = fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("epoch=1 batch=1 pairs=10 ")), "{log}");
    assert!(log.lines().any(|l| l.starts_with("epoch=1 dev_lm_loss=")), "{log}");
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train_tiny(dir.path(), &a, "5")), 0);
    assert_eq!(code(&train_tiny(dir.path(), &b, "5")), 0);
    for f in ["metrics.log", "best.ltt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

/// A model trained to memorize one pair, shared by the translate tests.
fn memorized() -> &'static (TempDir, PathBuf) {
    static MODEL: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let src = write(dir.path(), "one.src", "abcd\n");
        let tgt = write(dir.path(), "one.tgt", "dcba\n");
        let out = dir.path().join("model");
        let o = ltt(&[
            "train", "--train-src", s(&src), "--train-tgt", s(&tgt), "--out-dir", s(&out),
            "--hidden", "16", "--batch", "1", "--epochs", "150", "--patience", "0",
            "--learning-rate", "2e-3", "--gradient-mode", "full", "--max-depth", "8", "--seed", "1",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let model = out.join("best.ltt");
        (dir, model)
    })
}

#[test]
fn memorized_pair_is_reproduced() {
    let (_, model) = memorized();
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "in.txt", "abcd\n\nabcd\n");
    let output = dir.path().join("out.txt");
    let o = ltt(&["translate", "--model", s(model), "--input", s(&input), "--output", s(&output)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&output).unwrap(), "dcba\n\ndcba\n");
    assert!(stderr(&o).contains("empty input"));
}

#[test]
fn attention_dump_is_normalized_and_round_trips() {
    let (_, model) = memorized();
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "in.txt", "abcd\ndcb\n\n");
    let output = dir.path().join("out.txt");
    let dump = dir.path().join("attn.json");
    let o = ltt(&[
        "translate", "--model", s(model), "--input", s(&input), "--output", s(&output),
        "--dump-attention", s(&dump),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&dump).unwrap();
    let doc: AttentionDump = serde_json::from_str(&text).unwrap();
    assert_eq!(doc.sentences.len(), 3);
    assert!(doc.sentences[2].decoder_nodes.is_empty());
    for sent in &doc.sentences {
        assert!(sent.max_column_error() <= 1e-6);
        let (n_src, n_out) = (sent.source.chars().count(), sent.output.chars().count());
        assert!(sent.encoder_nodes.iter().all(|n| n.span.0 <= n.span.1 && n.span.1 <= n_src));
        assert!(sent.decoder_nodes.iter().all(|n| n.span.0 <= n.span.1 && n.span.1 <= n_out));
    }
    let again: AttentionDump = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
    assert_eq!(again, doc);
}

#[test]
fn bigram_filter_is_the_only_difference() {
    let (_, model) = memorized();
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "in.txt", "abcd\na\nddd\ncab\nb a b a\n");
    let (filtered, raw) = (dir.path().join("f.txt"), dir.path().join("r.txt"));
    for (out, extra) in [(&filtered, None), (&raw, Some("--no-bigram-filter"))] {
        let mut args = vec!["translate", "--model", s(model), "--input", s(&input), "--output", s(out)];
        args.extend(extra);
        assert_eq!(code(&ltt(&args)), 0);
    }
    let f = fs::read_to_string(&filtered).unwrap();
    let r = fs::read_to_string(&raw).unwrap();
    assert_eq!(f.lines().count(), 5);
    for (a, b) in f.lines().zip(r.lines()) {
        assert_eq!(a, remove_repeated_bigrams(b));
    }
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let model = write(dir.path(), "bad.ltt", "not a checkpoint");
    let input = write(dir.path(), "in.txt", "abc\n");
    let o = ltt(&[
        "translate", "--model", s(&model), "--input", s(&input), "--output",
        s(&dir.path().join("out.txt")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

fn evaluate(hyp: &str, reference: &str) -> Output {
    let dir = TempDir::new().unwrap();
    let h = write(dir.path(), "hyp", hyp);
    let r = write(dir.path(), "ref", reference);
    ltt(&["evaluate", "--hyp", s(&h), "--ref", s(&r)])
}

#[test]
fn evaluate_identical_files() {
    let text = "a small dog runs\nthe cat sat on the mat\n";
    let o = evaluate(text, text);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "1.0000\n");
}

#[test]
fn evaluate_counts_empty_hypotheses() {
    let refs = "a small dog runs\nthe cat sat on the mat\n";
    let o = evaluate("a small dog runs\n\n", refs);
    assert_eq!(code(&o), 0);
    let expected = bleu(&["a small dog runs", ""], &["a small dog runs", "the cat sat on the mat"]);
    assert!(expected > 0.0 && expected < 1.0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), format!("{expected:.4}\n"));
}

#[test]
fn evaluate_rejects_mismatched_files() {
    let o = evaluate("a\nb\n", "a\n");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mismatch"));
}

fn dump_with_weight(dir: &Path, weight: f64) -> PathBuf {
    let json = format!(
        r#"{{"sentences": [{{"source": "a", "output": "b",
            "encoder_nodes": [{{"id": 0, "span": [0, 1]}}],
            "decoder_nodes": [{{"id": 0, "span": [0, 1]}}],
            "alignments": [{{"encoder": 0, "decoder": 0, "weight": {weight}}}]}}]}}"#
    );
    write(dir, "dump.json", &json)
}

fn render(weight: f64) -> String {
    let dir = TempDir::new().unwrap();
    let dump = dump_with_weight(dir.path(), weight);
    let out = dir.path().join("a.svg");
    let o = ltt(&["render-attention", "--dump", s(&dump), "--out", s(&out), "--sentence", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::read_to_string(out).unwrap()
}

fn rect_opacities(svg: &str) -> Vec<f64> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    assert!(doc.root_element().has_tag_name("svg"));
    doc.descendants()
        .filter(|n| n.has_tag_name("rect"))
        .map(|n| n.attribute("fill-opacity").unwrap().parse().unwrap())
        .collect()
}

#[test]
fn full_weight_renders_one_opaque_rectangle() {
    assert_eq!(rect_opacities(&render(1.0)), vec![0.85]);
}

#[test]
fn tiny_weight_renders_nothing() {
    assert!(rect_opacities(&render(0.01)).is_empty());
}

#[test]
fn sentence_index_out_of_range() {
    let dir = TempDir::new().unwrap();
    let dump = dump_with_weight(dir.path(), 1.0);
    let out = dir.path().join("a.svg");
    let o = ltt(&["render-attention", "--dump", s(&dump), "--out", s(&out), "--sentence", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("out of range"));
    assert!(!out.exists());
}
