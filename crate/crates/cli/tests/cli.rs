use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pointroute::neural::save_checkpoint;
use pointroute::{ModelConfig, Policy};

const TINY: &str = r#"
[model]
d = 16
n_t = 1
heads = 2
H = 2
d_k = 8

[train]
batch_size = 4
instances_per_epoch = 8
epochs = 2
n = 8
seed = 3
"#;

fn pointroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointroute"))
        .args(args)
        .env("POINTROUTE_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn zero_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = ModelConfig {
        d: 16,
        n_t: 1,
        heads: 2,
        pointer_heads: 2,
        d_k: 8,
        ..Default::default()
    };
    let mut policy = Policy::<f32>::new(cfg, 0).unwrap();
    policy.zero_pointer_projections();
    let path = dir.join("zero.json");
    save_checkpoint(policy.store(), policy.config(), &path).unwrap();
    path
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        ok(pointroute(&["gen", "--seed", "7", "--n", "10", "--count", "5", "--out", p(out)]));
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 5);
}

#[test]
fn train_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(pointroute(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,batch,mean_len,loss,grad_norm,wallclock_s"));
    assert_eq!(metrics.lines().count(), 5);
    assert!(run.join("model.json").exists());

    fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 3")).unwrap();
    let out = ok(pointroute(&["train", "--config", p(&cfg), "--out", p(&run), "--checkpoint", p(&run)]));
    assert!(out.contains("trained 6 batches"), "{out}");
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 7);
}

#[test]
fn zero_learning_rate_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY.replace("seed = 3", "seed = 3\nlearning_rate = 0.0")).unwrap();
    let out = pointroute(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn solve_square_with_zero_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    let inst = dir.path().join("square.json");
    fs::write(&inst, r#"{"name":"square","coords":[[0,0],[1,1],[1,0],[0,1]]}"#).unwrap();
    let tour = dir.path().join("square.tour");
    let out = ok(pointroute(&["solve", "--checkpoint", p(&ckpt), p(&inst), "--out", p(&tour)]));
    assert!(out.contains("length=4.000000"), "{out}");
    assert!(fs::read_to_string(&tour).unwrap().contains("TOUR_SECTION"));
}

#[test]
fn solve_berlin52_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    let tsp = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/berlin52.tsp");
    let run = || {
        let out = ok(pointroute(&["solve", "--checkpoint", p(&ckpt), tsp]));
        out.split(" time=").next().unwrap().to_string()
    };
    let first = run();
    assert_eq!(first, run());
    let rounded: u64 = first.split("rounded=").nth(1).unwrap().trim().parse().unwrap();
    assert!(rounded >= 7542, "{first}");
}

#[test]
fn eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("small.jsonl");
    ok(pointroute(&["gen", "--seed", "1", "--n", "8", "--count", "3", "--out", p(&data)]));
    let ckpt = zero_checkpoint(dir.path());
    let out = ok(pointroute(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--opt", "hk", "--baselines"]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("dataset,method,mean_len,gap_pct,wallclock_s"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn eval_without_methods_fails() {
    let out = pointroute(&["eval", "--dataset", "missing.jsonl"]);
    assert!(!out.status.success());
}
