use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use mycoclip::captions::remote::completion_body;
use mycoclip::StageClass;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mycoclip"));
    c.env_remove("MYCOCLIP_API_KEY");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mycoclip")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.starts_with("manifest sha256:"))
        .expect("sha line")
        .to_string()
}

fn generate(out: &Path, count: usize, seed: u64) -> Output {
    run(&["--out", s(out), "--count", &count.to_string(), "--seed", &seed.to_string(), "generate"])
}

fn status(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("status.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = generate(&dir.path().join("a"), 30, 1);
    let b = generate(&dir.path().join("b"), 30, 1);
    ok(&a);
    ok(&b);
    assert_eq!(sha_line(&a), sha_line(&b));
    let c = generate(&dir.path().join("c"), 30, 2);
    ok(&c);
    assert_ne!(sha_line(&a), sha_line(&c));
    assert_eq!(status(&dir.path().join("a"))["state"], "complete");
}

#[test]
fn generate_split_table() {
    let dir = TempDir::new().unwrap();
    let o = generate(dir.path(), 6000, 3);
    ok(&o);
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("total")).unwrap();
    let nums: Vec<usize> = total.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
    assert_eq!(nums, vec![4800, 600, 600]);
    for class in StageClass::ALL {
        let row = text.lines().find(|l| l.starts_with(class.name())).unwrap();
        let nums: Vec<usize> = row.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(nums, vec![1600, 200, 200]);
    }
}

#[test]
fn unwritable_output_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("run");
    let o = generate(&out, 30, 1);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(!out.join("dataset/manifest.jsonl").exists());
}

#[test]
fn template_captions() {
    let dir = TempDir::new().unwrap();
    ok(&generate(dir.path(), 30, 1));
    let o = run(&["--out", s(dir.path()), "--provider", "template", "caption"]);
    ok(&o);
    for class in StageClass::ALL {
        let text = fs::read_to_string(dir.path().join(format!("dataset/captions/{class}.txt"))).unwrap();
        assert_eq!(text.lines().count(), 50, "{class}");
        for line in text.lines() {
            let n = line.split_whitespace().count();
            assert!((8..=40).contains(&n), "{line}");
        }
    }
}

fn write_fixtures(dir: &Path, total: usize) {
    fs::create_dir_all(dir).unwrap();
    for class in StageClass::ALL {
        for i in 0..total {
            let content = format!(
                "A {class} specimen number {i} imaged under the microscope with fine filaments and clear contrast."
            );
            fs::write(dir.join(format!("{class}_{i:04}.json")), completion_body(&content)).unwrap();
        }
    }
}

fn remote_config(dir: &Path, fixtures: &Path, total: usize) -> PathBuf {
    let path = dir.join("remote.toml");
    let text = format!(
        "seed = 4\n[dataset]\nper_class = 10\n[dataset.captions]\ntotal = {total}\nbatch_size = 4\n\
         [caption]\nprovider = \"remote\"\nreplay_dir = \"{}\"\n[caption.endpoint]\nbackoff_base_ms = 0\n",
        s(fixtures)
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn remote_captions_from_replay() {
    let dir = TempDir::new().unwrap();
    let fixtures = dir.path().join("fixtures");
    write_fixtures(&fixtures, 12);
    let cfg = remote_config(dir.path(), &fixtures, 12);
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&run(&["--config", s(&cfg), "--out", s(&out), "generate"]));
        let o = run(&["--config", s(&cfg), "--out", s(&out), "caption"]);
        ok(&o);
        let mut all = String::new();
        for class in StageClass::ALL {
            let t = fs::read_to_string(out.join(format!("dataset/captions/{class}.txt"))).unwrap();
            assert_eq!(t.lines().count(), 12);
            all.push_str(&t);
        }
        texts.push(all);
    }
    assert_eq!(texts[0], texts[1]);
    assert!(texts[0].contains("specimen number 11"));
}

#[test]
fn remote_without_key_or_replay_is_usage_error() {
    let dir = TempDir::new().unwrap();
    ok(&generate(dir.path(), 30, 1));
    let o = run(&["--out", s(dir.path()), "--provider", "remote", "caption"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("MYCOCLIP_API_KEY"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let o = run(&["--out", s(dir.path()), "--provider", "carrier-pigeon", "caption"]);
    assert_eq!(code(&o), 2);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = run(&["--config", s(&cfg), "--out", s(dir.path()), "generate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
    let o = run(&["--out", s(dir.path()), "--count", "31", "generate"]);
    assert_eq!(code(&o), 2);
    let o = run(&["--out", s(&dir.path().join("empty")), "train"]);
    assert_eq!(code(&o), 2);
    let o = run(&["--out", s(dir.path()), "eval", "--split", "holdout"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_and_eval() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    ok(&generate(out, 90, 5));
    let o = run(&["--out", s(out), "--epochs", "2", "train"]);
    ok(&o);
    assert!(stdout(&o).contains("final val Recall@1"));
    let metrics = fs::read_to_string(out.join("model/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    let a = run(&["--out", s(out), "eval"]);
    ok(&a);
    let first = fs::read(out.join("eval/test/report.json")).unwrap();
    let b = run(&["--out", s(out), "eval"]);
    ok(&b);
    assert_eq!(first, fs::read(out.join("eval/test/report.json")).unwrap());
    assert_eq!(stdout(&a), stdout(&b));
    for f in ["confusion.csv", "samples.csv"] {
        assert!(out.join("eval/test").join(f).exists());
    }

    // Regenerating with another seed orphans the checkpoint.
    ok(&generate(out, 90, 6));
    let o = run(&["--out", s(out), "eval"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("manifest mismatch"), "{}", stderr(&o));
    assert_eq!(status(out)["state"], "failed");
}

fn recall(out: &Path, split: &str) -> f64 {
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(format!("eval/{split}/report.json"))).unwrap()).unwrap();
    report["recall_at_1"].as_f64().unwrap()
}

#[test]
fn train_split_is_not_worse_than_val() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    ok(&generate(out, 150, 7));
    ok(&run(&["--out", s(out), "--epochs", "8", "train"]));
    ok(&run(&["--out", s(out), "eval", "--split", "train"]));
    ok(&run(&["--out", s(out), "eval", "--split", "val"]));
    assert!(recall(out, "train") >= recall(out, "val") - 0.05);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["--out", s(&out), "--count", "30", "--seed", "9", "--epochs", "2", "pipeline"]);
        ok(&o);
        assert!(stdout(&o).contains("== summary"));
        assert_eq!(status(&out)["state"], "complete");
        assert!(out.join("config.toml").exists());
        reports.push((
            fs::read(out.join("model/metrics.tsv")).unwrap(),
            fs::read(out.join("eval/test/samples.csv")).unwrap(),
            fs::read(out.join("model/checkpoint.json")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn interrupted_run_stays_incomplete() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    ok(&generate(out, 300, 2));
    let mut child = bin()
        .args(["--out", s(out), "--epochs", "100000", "train"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !out.join("model/metrics.tsv").exists() && start.elapsed() < Duration::from_secs(60) {
        std::thread::sleep(Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(status(out)["state"], "incomplete");
    assert_eq!(status(out)["command"], "train");
}
