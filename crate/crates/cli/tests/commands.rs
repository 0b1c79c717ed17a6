use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pyramid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyramid")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pyramid(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, name: &str, seed: u64, examples: usize) -> String {
    let path = dir.join(name).to_str().unwrap().to_string();
    ok(&["gen", "--output", &path, "--seed", &seed.to_string(), "--examples", &examples.to_string(), "--classes", "3", "--vocab", "40"]);
    path
}

fn write_config(dir: &Path, preset: &str, corpus: &str) -> String {
    let text = format!(
        r#"output = "run-{preset}"

[corpus]
path = "{corpus}"

[model]
layers = 3
hidden = 8
heads = 2
ffn = 16
classes = 3
vocab = 40
max_len = 128
sub_init_std = 0.1

[plan]
preset = "{preset}"
learning_rate = 1e-3
batch_size = 8
temperature = 1e-3
epochs = {{ regular = 1, soft = 1, hard = 1, sub = 1 }}
"#
    );
    let path = dir.join(format!("{preset}.toml"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = gen(dir.path(), "a.tsv", 5, 50);
    let b = gen(dir.path(), "b.tsv", 5, 50);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 50);
    let first = text.lines().next().unwrap();
    let (label, ids) = first.split_once('\t').unwrap();
    assert!(label.parse::<usize>().unwrap() < 3);
    assert!(ids.split(' ').all(|t| t.parse::<u32>().unwrap() < 40));
}

#[test]
fn gen_needs_a_known_format() {
    let dir = TempDir::new().unwrap();
    let out = pyramid(&["gen", "--output", dir.path().join("x.csv").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--format"));
}

#[test]
fn train_bench_and_inspect() {
    let dir = TempDir::new().unwrap();
    gen(dir.path(), "train.jsonl", 1, 48);
    let test = gen(dir.path(), "test.jsonl", 2, 30);

    let config = write_config(dir.path(), "mp", "train.jsonl");
    ok(&["train", "--config", &config]);
    let run = dir.path().join("run-mp");
    for tag in ["regular", "soft", "hard", "sub"] {
        assert!(run.join(format!("{tag}.ckpt")).exists(), "{tag}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let effective = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(effective.contains("delta_final"));
    assert!(effective.contains("format = \"jsonl\""));

    // same seed gives the same bytes, and so does the echoed config
    let first = fs::read(run.join("sub.ckpt")).unwrap();
    ok(&["train", "--config", &config]);
    assert_eq!(first, fs::read(run.join("sub.ckpt")).unwrap());
    let echoed = dir.path().join("echoed.toml");
    fs::copy(run.join("config.toml"), &echoed).unwrap();
    ok(&["train", "--config", echoed.to_str().unwrap()]);
    assert_eq!(first, fs::read(run.join("sub.ckpt")).unwrap());

    let ckpt = run.join("sub.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let summary = ok(&["inspect", "--checkpoint", ckpt]);
    assert!(summary.contains("stages [regular, soft, hard, sub]"), "{summary}");

    let out = dir.path().join("bench");
    let out = out.to_str().unwrap();
    let printed = ok(&["bench", "--checkpoint", ckpt, "--corpus", &test, "--tau", "0.1,0.5,0.8", "--output", out]);
    assert_eq!(printed.lines().count(), 12);
    let csv = fs::read_to_string(Path::new(out).join("report.csv")).unwrap();
    assert!(csv.starts_with("# gflops"));
    assert_eq!(csv.lines().count(), 2 + 12);
    let traces = fs::read_to_string(Path::new(out).join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 3 * 30);
    ok(&["bench", "--checkpoint", ckpt, "--corpus", &test, "--tau", "0.1,0.5,0.8", "--output", out]);
    assert_eq!(csv, fs::read_to_string(Path::new(out).join("report.csv")).unwrap());

    let printed = ok(&["bench", "--checkpoint", ckpt, "--corpus", &test, "--tau", "0", "--no-prune", "--output", out]);
    let overall = printed.lines().next().unwrap();
    assert!(overall.contains("overhead_only"), "{overall}");

    let printed = ok(&["bench", "--checkpoint", ckpt, "--corpus", &test, "--no-exit", "--no-prune", "--output", out]);
    assert!(printed.lines().next().unwrap().contains("speedup  1.000x"), "{printed}");

    // a corpus with labels beyond the checkpoint's classes is refused
    let wide = dir.path().join("wide.tsv");
    fs::write(&wide, "7\t1 2 3\n").unwrap();
    let res = pyramid(&["bench", "--checkpoint", ckpt, "--corpus", wide.to_str().unwrap(), "--output", out]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("does not fit the checkpoint"));
}

#[test]
fn bert_preset_writes_one_checkpoint() {
    let dir = TempDir::new().unwrap();
    gen(dir.path(), "train.tsv", 3, 24);
    let config = write_config(dir.path(), "bert", "train.tsv");
    let printed = ok(&["train", "--config", &config]);
    assert_eq!(printed.lines().count(), 1);
    let run = dir.path().join("run-bert");
    assert!(run.join("regular.ckpt").exists());
    assert!(!run.join("soft.ckpt").exists());

    let test = gen(dir.path(), "test.tsv", 4, 10);
    let res = pyramid(&["bench", "--checkpoint", run.join("regular.ckpt").to_str().unwrap(), "--corpus", &test, "--output", dir.path().join("b").to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("--no-exit"));
}

#[test]
fn train_reports_bad_configs() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "mp", "missing.jsonl");
    let res = pyramid(&["train", "--config", &config]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing.jsonl"));

    let path = dir.path().join("bad.toml");
    fs::write(&path, "output = 3\n").unwrap();
    assert!(!pyramid(&["train", "--config", path.to_str().unwrap()]).status.success());
}
