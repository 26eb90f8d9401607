use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clower::metrics::parse_totals;

const SMALL: [&str; 12] = [
    "--set", "d_model=16", "--set", "n_layers=1", "--set", "n_heads=2", "--set", "ffn_dim=32", "--set",
    "batch_size=4", "--set", "warmup_steps=2",
];

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/synthetic_corpus.txt");

fn clower(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clower"))
        .args(args)
        .env_remove("CLOWER_STEPS")
        .output()
        .expect("spawn clower")
}

fn ok(args: &[&str]) -> Output {
    let out = clower(args);
    assert!(
        out.status.success(),
        "clower {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    vocab: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let vocab = root.join("vocab.tsv");
    ok(&["build-vocab", "--corpus", CORPUS, "--out", s(&vocab)]);
    Fixture { _dir: dir, root, vocab }
}

fn pretrain(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(name);
    let source = if extra.contains(&"--examples") { [].as_slice() } else { ["--corpus", CORPUS].as_slice() };
    let mut args = vec!["pretrain", "--vocab", s(&f.vocab), "--out-dir", s(&out)];
    args.extend_from_slice(source);
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn encode_is_deterministic() {
    let f = fixture();
    let run = pretrain(&f, "run", &["--steps", "2"]);
    let ck = run.join("checkpoint");
    let a = ok(&["encode", "--checkpoint", s(&ck), "--vocab", s(&f.vocab), "--text", "老师说路上要小心。"]);
    let b = ok(&["encode", "--checkpoint", s(&ck), "--text", "老师说路上要小心。"]);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["cls"].as_array().unwrap().len(), 16);
    assert_eq!(v["tokens"].as_array().unwrap().len(), 9 + 2);
    assert!(String::from_utf8_lossy(&a.stderr).contains("# seed="));
}

#[test]
fn ablation_log_has_zero_contrastive_column() {
    let f = fixture();
    let run = pretrain(&f, "ablated", &["--steps", "4", "--no-tcl", "--no-scl"]);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows = parse_totals(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|&(_, total, l_con)| l_con == 0.0 && total > 0.0));
}

#[test]
fn reruns_reproduce_files_byte_for_byte() {
    let f = fixture();
    let again = f.root.join("vocab2.tsv");
    ok(&["build-vocab", "--corpus", CORPUS, "--out", s(&again)]);
    assert_eq!(fs::read(&f.vocab).unwrap(), fs::read(&again).unwrap());

    let ex: Vec<PathBuf> = ["a.jsonl", "b.jsonl"].iter().map(|n| f.root.join(n)).collect();
    for p in &ex {
        ok(&["prepare", "--corpus", CORPUS, "--vocab", s(&f.vocab), "--out", s(p), "--seed", "5"]);
    }
    assert_eq!(fs::read(&ex[0]).unwrap(), fs::read(&ex[1]).unwrap());

    let runs: Vec<PathBuf> = ["r1", "r2"]
        .iter()
        .map(|n| pretrain(&f, n, &["--examples", s(&ex[0]), "--steps", "3", "--set", "checkpoint_every=2"]))
        .collect();
    for file in ["config.txt", "metrics.csv", "checkpoint/weights.bin", "checkpoint/manifest.txt", "checkpoint-step2/weights.bin"] {
        assert_eq!(fs::read(runs[0].join(file)).unwrap(), fs::read(runs[1].join(file)).unwrap(), "{file}");
    }

    let reports: Vec<(Vec<u8>, String, String)> = ["x", "y"]
        .iter()
        .map(|n| {
            let json = f.root.join(format!("{n}.json"));
            let words = f.root.join(format!("{n}.csv"));
            let out = ok(&[
                "analyze",
                "--checkpoint",
                s(&runs[0].join("checkpoint")),
                "--eval-corpus",
                CORPUS,
                "--json",
                s(&json),
                "--per-word-csv",
                s(&words),
            ]);
            (out.stdout, fs::read_to_string(json).unwrap(), fs::read_to_string(words).unwrap())
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].2.starts_with("word,chars,cosine,distance\n"));
}

#[test]
fn usage_errors_exit_with_two() {
    let f = fixture();
    assert_eq!(clower(&["build-vocab", "--bogus"]).status.code(), Some(2));
    assert_eq!(clower(&["frobnicate"]).status.code(), Some(2));
    let missing = f.root.join("nope.txt");
    let out = clower(&["prepare", "--corpus", s(&missing), "--vocab", s(&f.vocab), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
    let out = clower(&["pretrain", "--corpus", CORPUS, "--vocab", s(&f.vocab), "--out-dir", "x", "--set", "colour=red"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(clower(&["analyze", "--checkpoint", s(&missing)]).status.code(), Some(2));
}

#[test]
fn other_failures_exit_with_one() {
    let f = fixture();
    let run = pretrain(&f, "run", &["--steps", "1"]);
    let weights = run.join("checkpoint/weights.bin");
    let bytes = fs::read(&weights).unwrap();
    fs::write(&weights, &bytes[..bytes.len() - 8]).unwrap();
    let out = clower(&["encode", "--checkpoint", s(&run.join("checkpoint")), "--text", "路上"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().filter(|l| l.starts_with("error")).count(), 1, "{stderr}");
}

#[test]
fn environment_sits_between_file_and_flags() {
    let f = fixture();
    let cfg = f.root.join("run.cfg");
    fs::write(&cfg, "# small run\nsteps = 5\nseed = 3\n").unwrap();
    let base = ["pretrain", "--corpus", CORPUS, "--vocab", s(&f.vocab), "--config", s(&cfg)];
    let rows = |out: &Path| parse_totals(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap().len();

    let a = f.root.join("a");
    let mut args = base.to_vec();
    args.extend(["--out-dir", s(&a)]);
    args.extend_from_slice(&SMALL);
    ok(&args);
    assert_eq!(rows(&a), 5);

    let b = f.root.join("b");
    let mut args = base.to_vec();
    args.extend(["--out-dir", s(&b)]);
    args.extend_from_slice(&SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_clower")).args(&args).env("CLOWER_STEPS", "2").output().unwrap();
    assert!(out.status.success());
    assert_eq!(rows(&b), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("# seed=3") && stderr.contains("# steps=2"), "{stderr}");

    let c = f.root.join("c");
    args.push("--steps");
    args.push("1");
    let at = args.iter().position(|a| *a == s(&b)).unwrap();
    args[at] = s(&c);
    let out = Command::new(env!("CARGO_BIN_EXE_clower")).args(&args).env("CLOWER_STEPS", "2").output().unwrap();
    assert!(out.status.success());
    assert_eq!(rows(&c), 1);
}

#[test]
fn finetune_reports_accuracy() {
    let f = fixture();
    let run = pretrain(&f, "run", &["--steps", "2"]);
    let train = f.root.join("train.tsv");
    let dev = f.root.join("dev.tsv");
    ok(&["generate-classification", "--out", s(&train), "--n", "40", "--seed", "1"]);
    ok(&["generate-classification", "--out", s(&dev), "--n", "20", "--seed", "2"]);
    let out = ok(&[
        "finetune",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--train",
        s(&train),
        "--dev",
        s(&dev),
        "--freeze-encoder",
        "--epochs",
        "3",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("accuracy "), "{text}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("# freeze_encoder=true"));
}
