use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prme::corpus::load_uci_bow;
use prme::eval::read_grid_csv;
use prme::model::{checkpoint_load, read_checkpoint_header};
use rand::{Rng, SeedableRng};

fn toy_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/docword.txt")
}

fn prme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prme"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = prme(args);
    assert!(
        out.status.success(),
        "prme {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small model configuration so the tests stay fast.
const SMALL: [&str; 10] = [
    "--set",
    "hyper.k=12",
    "--set",
    "hyper.enc_hidden=16",
    "--set",
    "hyper.dec_hidden=8",
    "--set",
    "hyper.d_h=4",
    "--set",
    "hyper.d_ell=3",
];

fn train_small(out: &Path, extra: &[&str]) -> String {
    let corpus = toy_corpus();
    let mut args = vec!["train", "--corpus", s(&corpus), "--out-dir", s(out)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args)
}

#[test]
fn missing_corpus_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/docword.txt");
    let out = prme(&["train", "--corpus", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn bad_configuration_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["hyper.k=0", "no_such_key=1", "hyper.decoder=\"fancy\"", "lr=-1"] {
        let out = prme(&["train", "--corpus", s(&toy_corpus()), "--out-dir", s(dir.path()), "--set", set]);
        assert_eq!(out.status.code(), Some(2), "--set {set}");
    }
    let out = prme(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "0", "--set", "checkpoint_every=1"]);
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("checkpoint")).count(), 1, "{names:?}");
    assert_eq!(fs::read_to_string(dir.path().join("log.jsonl")).unwrap(), "");
    let header = read_checkpoint_header(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(header.iteration, 0);
}

#[test]
fn default_configuration_trains_on_the_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["train", "--corpus", s(&toy_corpus()), "--out-dir", s(dir.path()), "--iters", "20"]);
    let ppl: f64 = stdout.trim().strip_prefix("heldout_perplexity ").unwrap().parse().unwrap();
    let d = load_uci_bow(fs::read(toy_corpus()).unwrap().as_slice(), None::<&[u8]>).unwrap().corpus.num_words;
    assert!(ppl > 1.0 && ppl < d as f64, "{ppl}");
    assert_eq!(fs::read_to_string(dir.path().join("log.jsonl")).unwrap().lines().count(), 20);
}

#[test]
fn closed_form_phase_logs_a_monotone_elbo() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "15", "--set", "gradient_steps=false"]);
    let totals: Vec<f64> = fs::read_to_string(dir.path().join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["elbo"]["total"].as_f64().unwrap())
        .collect();
    assert_eq!(totals.len(), 15);
    for w in totals.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn periodic_checkpoints_resume_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    train_small(&full, &["--iters", "6", "--set", "checkpoint_every=3"]);
    assert!(full.join("checkpoint-000003.bin").is_file());
    assert!(full.join("checkpoint-000006.bin").is_file());
    let resume = full.join("checkpoint-000003.bin");
    train_small(&part, &["--iters", "6", "--resume", s(&resume)]);
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(part.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_is_repeatable_and_bounded_for_an_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "0"]);
    let ckpt = dir.path().join("checkpoint.bin");
    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let stdout = ok(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--corpus",
            s(&toy_corpus()),
            "--split-seed",
            "4",
            "--out-dir",
            s(&out_dir),
        ]);
        (stdout, fs::read(out_dir.join("usage.csv")).unwrap())
    };
    let (a, usage_a) = run("a");
    let (b, usage_b) = run("b");
    assert_eq!(a.lines().next(), b.lines().next());
    assert_eq!(usage_a, usage_b);
    let ppl: f64 = a.lines().next().unwrap().strip_prefix("perplexity ").unwrap().parse().unwrap();
    let header = read_checkpoint_header(&ckpt).unwrap();
    assert!(ppl <= header.num_words as f64, "{ppl}");
    let usage = String::from_utf8(usage_a).unwrap();
    assert!(usage.starts_with("rank,topic,proportion\n"));
    assert_eq!(usage.lines().count(), 13);
}

#[test]
fn sampling_is_reproducible_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["sample", "--out-dir", s(d), "--docs", "40", "--doc-len", "30", "--seed", "9"]);
    }
    for f in ["docword.txt", "vocab.txt", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = fs::read(a.join("docword.txt")).unwrap();
    let loaded = load_uci_bow(text.as_slice(), Some(fs::read(a.join("vocab.txt")).unwrap().as_slice())).unwrap();
    assert_eq!(loaded.corpus.len(), 40);
    assert!(loaded.corpus.docs.iter().all(|d| d.len() == 30));
    let mut again = Vec::new();
    loaded.corpus.write_uci(&mut again).unwrap();
    assert_eq!(again, text);
}

#[test]
fn empty_sample_is_a_valid_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sample", "--out-dir", s(dir.path()), "--docs", "0"]);
    let text = fs::read_to_string(dir.path().join("docword.txt")).unwrap();
    assert_eq!(text, "0\n200\n0\n");
    let loaded = load_uci_bow(text.as_bytes(), None::<&[u8]>).unwrap();
    assert!(loaded.corpus.is_empty());
}

#[test]
fn sampling_from_a_checkpoint_uses_its_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "1"]);
    let out = dir.path().join("sampled");
    ok(&[
        "sample",
        "--checkpoint",
        s(&dir.path().join("checkpoint.bin")),
        "--out-dir",
        s(&out),
        "--docs",
        "5",
        "--doc-len",
        "7",
    ]);
    let loaded = load_uci_bow(fs::read(out.join("docword.txt")).unwrap().as_slice(), None::<&[u8]>).unwrap();
    let header = read_checkpoint_header(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(loaded.corpus.num_words, header.num_words);
    assert_eq!(loaded.corpus.num_tokens(), 35);
}

#[test]
fn export_rejects_topics_beyond_the_truncation() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "0"]);
    let out = prme(&[
        "export-paintbox",
        "--checkpoint",
        s(&dir.path().join("checkpoint.bin")),
        "--corpus",
        s(&toy_corpus()),
        "--out-dir",
        s(dir.path()),
        "--topics",
        "3,12",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("topic 12"));
}

#[test]
fn constant_decoder_exports_flat_grids() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "2", "--set", "hyper.decoder=\"constant\""]);
    let ckpt = dir.path().join("checkpoint.bin");
    let out = dir.path().join("grids");
    ok(&[
        "export-paintbox",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&toy_corpus()),
        "--out-dir",
        s(&out),
        "--topics",
        "0,5",
        "--resolution",
        "4",
    ]);
    let (globals, _) = checkpoint_load(&ckpt).unwrap();
    let p = globals.stick_weights();
    for k in [0, 5] {
        let grid = read_grid_csv(fs::read(out.join(format!("grid-{k:03}.csv"))).unwrap().as_slice()).unwrap();
        let expect = globals.hyper.beta * p[k];
        assert_eq!(grid.beta_p, expect);
        assert!(grid.values.data().iter().all(|&v| v == expect));
    }
    let proj = fs::read_to_string(out.join("projections.csv")).unwrap();
    assert!(proj.lines().skip(1).all(|l| l.ends_with(",0,0")));
}

#[test]
fn exported_grids_match_direct_decoder_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "3"]);
    let ckpt = dir.path().join("checkpoint.bin");
    let out = dir.path().join("grids");
    let stdout = ok(&[
        "export-paintbox",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&toy_corpus()),
        "--out-dir",
        s(&out),
        "--resolution",
        "16",
    ]);
    assert!(stdout.starts_with("exported 10 grids"));
    let (globals, _) = checkpoint_load(&ckpt).unwrap();
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(out.join("embedding.json")).unwrap()).unwrap();
    let emb: prme::eval::Embedding = serde_json::from_value(meta["embedding"].clone()).unwrap();
    let topics: Vec<usize> = serde_json::from_value(meta["topics"].clone()).unwrap();
    assert_eq!(topics.len(), 10);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let k = topics[rng.gen_range(0..topics.len())];
        let grid = read_grid_csv(fs::read(out.join(format!("grid-{k:03}.csv"))).unwrap().as_slice()).unwrap();
        let (i, j) = (rng.gen_range(0..16), rng.gen_range(0..16));
        let (x, y) = (grid.coord(j), grid.coord(i));
        let h: Vec<f64> = (0..emb.mean.len())
            .map(|d| {
                emb.mean[d]
                    + x * emb.singular_values[0] * emb.directions[0][d]
                    + y * emb.singular_values[1] * emb.directions[1][d]
            })
            .collect();
        let (mu, var) = globals.decoder_moments(&h, k).unwrap();
        let direct = globals.hyper.beta * globals.stick_weights()[k] * (mu + var / 2.0).exp();
        let v = grid.values.get(i, j);
        assert!((v - direct).abs() <= 1e-9 * direct.abs().max(1.0), "topic {k} ({i},{j}): {v} vs {direct}");
    }
}

#[test]
fn ingest_normalizes_and_reports_dropped_documents() {
    let dir = tempfile::tempdir().unwrap();
    let docword = dir.path().join("in.txt");
    fs::write(&docword, "3\n4\n3\n1 1 2\n3 4 1\n3 2 5\n").unwrap();
    let vocab = dir.path().join("vocab.txt");
    fs::write(&vocab, "apple\nbanana\ncherry\ndate\n").unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["ingest", "--docword", s(&docword), "--vocab", s(&vocab), "--out-dir", s(&out)]);
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["docs"], 2);
    assert_eq!(summary["tokens"], 8);
    assert_eq!(summary["dropped"], serde_json::json!([1]));
    assert_eq!(fs::read_to_string(out.join("docword.txt")).unwrap(), "2\n4\n3\n1 1 2\n2 2 5\n2 4 1\n");
    assert_eq!(fs::read_to_string(out.join("vocab.txt")).unwrap(), "apple\nbanana\ncherry\ndate\n");
}

#[test]
fn malformed_corpus_is_a_runtime_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let docword = dir.path().join("bad.txt");
    fs::write(&docword, "1\n3\n1\n1 2 0\n").unwrap();
    let out = prme(&["ingest", "--docword", s(&docword), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn inspect_prints_the_header() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "2"]);
    let stdout = ok(&["inspect-checkpoint", s(&dir.path().join("checkpoint.bin"))]);
    let header: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(header["iteration"], 2);
    assert_eq!(header["hyper"]["k"], 12);
    assert!(header["resume"].is_object());
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"iters": 7, "hyper": {"k": 9}}"#).unwrap();
    let stdout = ok(&["config", "--config", s(&path), "--set", "hyper.beta=2.5", "--set", "mode=stochastic"]);
    let c: prme::cli::RunConfig = serde_json::from_str(&stdout).unwrap();
    assert_eq!((c.iters, c.hyper.k, c.hyper.beta), (7, 9, 2.5));
    assert_eq!(c.mode, prme::cli::TrainMode::Stochastic);
    // The printed form is itself a valid config file.
    fs::write(&path, &stdout).unwrap();
    assert_eq!(ok(&["config", "--config", s(&path)]), stdout);
}

#[test]
fn stochastic_training_runs_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--iters", "4", "--mode", "stochastic", "--batch-size", "10"]);
    let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["batch_size"], 10);
    assert!((first["rho"].as_f64().unwrap() - 100f64.powf(-0.75)).abs() < 1e-15);
}
