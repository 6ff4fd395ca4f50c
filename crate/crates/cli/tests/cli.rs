use std::path::Path;
use std::process::{Command, Output};

fn gec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gec"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gec(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

const TINY_CONFIG: &str = r#"
seed = 3
workers = 1
[vocab]
size = 320
[synth]
count = 400
dev_size = 40
[model]
layers = 1
heads = 2
d_model = 32
d_ff = 64
[train]
peak_lr = 3e-3
warmup_steps = 20
batch_tokens = 512
max_steps = 40
checkpoint_every = 20
max_pieces = 60
score_dev = false
[average]
last = 2
[grid]
thresholds = [0.9, 1.2]
max_iters = [1, 2]
"#;

const TINY_RECIPE: &str = r#"
workspace = "work"
config = "tiny.toml"
[[stage]]
args = ["noise", "synth", "--out", "train.tsv", "--dev-out", "dev.tsv"]
[[stage]]
args = ["vocab", "train", "--in", "train.tsv", "--out", "vocab.txt"]
[[stage]]
args = ["train", "--train", "train.tsv", "--dev", "dev.tsv", "--vocab", "vocab.txt", "--out-dir", "run"]
[[stage]]
args = ["checkpoints", "average", "--dir", "run", "--out", "avg.bin"]
[[stage]]
args = ["grid-search", "--checkpoint", "avg.bin", "--vocab", "vocab.txt", "--dev", "dev.tsv", "--out", "grid.tsv"]
[[stage]]
args = ["decode", "--checkpoint", "avg.bin", "--vocab", "vocab.txt", "--in", "dev.tsv", "--tsv", "--out", "hyp.txt"]
[[stage]]
args = ["evaluate", "--hyp", "hyp.txt", "--ref", "dev.tsv", "--out", "report.json"]
"#;

#[test]
fn unknown_flag_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = gec(d.path(), &["corpus", "stats", "--in", "x.tsv", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn missing_file_exits_one_with_path() {
    let d = tempfile::tempdir().unwrap();
    let out = gec(d.path(), &["corpus", "stats", "--in", "nowhere.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.tsv"));
}

#[test]
fn empty_recipe_succeeds_without_artifacts() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("empty.toml"), "").unwrap();
    ok(d.path(), &["pipeline", "--recipe", "empty.toml"]);
    assert_eq!(std::fs::read_dir(d.path()).unwrap().count(), 1);
}

#[test]
fn failing_stage_is_reported_and_later_stages_skipped() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("r.toml"),
        "[[stage]]\nargs = [\"corpus\", \"stats\", \"--in\", \"gone.tsv\"]\n[[stage]]\nargs = [\"noise\", \"synth\", \"--count\", \"5\", \"--out\", \"x.tsv\"]\n",
    )
    .unwrap();
    let out = gec(d.path(), &["pipeline", "--recipe", "r.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 0"));
    assert!(!d.path().join("x.tsv").exists());
}

#[test]
fn flags_override_the_config_file() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), "seed = 5\n[synth]\ncount = 30\n").unwrap();
    ok(d.path(), &["--config", "c.toml", "noise", "synth", "--out", "a.tsv"]);
    ok(d.path(), &["--config", "c.toml", "noise", "synth", "--count", "12", "--out", "b.tsv"]);
    ok(d.path(), &["--config", "c.toml", "--seed", "6", "noise", "synth", "--out", "c.tsv"]);
    assert_eq!(read(d.path().join("a.tsv")).lines().count(), 30);
    assert_eq!(read(d.path().join("b.tsv")).lines().count(), 12);
    assert_ne!(read(d.path().join("a.tsv")), read(d.path().join("c.tsv")));
    let m: serde_json::Value = serde_json::from_str(&read(d.path().join("c.tsv.manifest.json"))).unwrap();
    assert_eq!(m["seed"], 6);
    assert_eq!(m["config"]["synth"]["count"], 30);
}

#[test]
fn replay_reproduces_output() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["--seed", "4", "noise", "synth", "--count", "50", "--out", "p.tsv"]);
    let first = read(d.path().join("p.tsv"));
    std::fs::remove_file(d.path().join("p.tsv")).unwrap();
    ok(d.path(), &["replay", "p.tsv.manifest.json"]);
    assert_eq!(read(d.path().join("p.tsv")), first);
}

#[test]
fn tiny_pipeline_reruns_to_the_same_score() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.toml"), TINY_CONFIG).unwrap();
    std::fs::write(d.path().join("recipe.toml"), TINY_RECIPE).unwrap();
    let work = d.path().join("work");
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(d.path(), &["pipeline", "--recipe", "recipe.toml"]);
        let report: serde_json::Value = serde_json::from_str(&read(work.join("report.json"))).unwrap();
        runs.push((report, read(work.join("hyp.txt")), read(work.join("grid.tsv"))));
        let m: serde_json::Value = serde_json::from_str(&read(work.join("pipeline.manifest.json"))).unwrap();
        assert_eq!(m["stages"].as_array().unwrap().len(), 7);
        std::fs::remove_dir_all(&work).unwrap();
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0].2.lines().count(), 5);
}
