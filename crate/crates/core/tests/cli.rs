use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
backbone.steps = 10
backbone.d_model = 16
backbone.ffn_dim = 32
vae.d_model = 16
vae.d_latent = 8
vae.ffn_dim = 32
vae.layers = 1
train.stage1_steps = 20
train.stage2_epochs = 2
scorer.steps = 10
scorer.ffn_dim = 32
eval.classifier_epochs = 1
eval.char_steps = 10
eval.char_hidden = 16
transfer.weights = 0.5,1.5
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pivotvae"))
        .current_dir(dir)
        .env_remove("STOWER_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, f: &str) -> String {
    std::fs::read_to_string(dir.join(f)).unwrap()
}

#[test]
fn full_command_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let c = ["--config", "tiny.cfg"];
    let with = |args: &[&'static str]| -> Vec<&str> { args.iter().copied().chain(c).collect() };

    ok(d, &with(&["gen-data", "--n", "40", "--out", "data"]));
    for f in ["negative.txt", "positive.txt", "manifest.jsonl", "run.manifest.json"] {
        assert!(d.join("data").join(f).is_file(), "missing {f}");
    }
    ok(d, &with(&["pretrain", "--data", "data", "--out", "bb.ckpt"]));
    ok(d, &with(&["train-stage1", "--data", "data", "--backbone", "bb.ckpt", "--out", "s1.ckpt", "--log", "s1.jsonl"]));
    let log = read(d, "s1.jsonl");
    assert_eq!(log.lines().count(), 20);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "nll", "kl", "style", "total"] {
        assert!(first.get(k).is_some(), "log line lacks {k}");
    }
    ok(d, &with(&["train-scorer", "--data", "data", "--model", "s1.ckpt", "--out", "scorer.ckpt"]));
    ok(d, &with(&["train-stage2", "--data", "data", "--model", "s1.ckpt", "--scorer", "scorer.ckpt", "--out", "s2.ckpt"]));
    ok(d, &with(&["train-eval-models", "--data", "data", "--out", "eval.ckpt"]));

    let src: Vec<String> = read(d, "data/negative.txt").lines().take(5).map(String::from).collect();
    std::fs::write(d.join("src.txt"), src.join("\n") + "\n").unwrap();
    let scores = ok(d, &with(&["score", "--model", "s1.ckpt", "--scorer", "scorer.ckpt", "--input", "src.txt"]));
    let first_block: Vec<&str> = scores.split("\n\n").next().unwrap().lines().collect();
    assert_eq!(first_block.len(), src[0].split_whitespace().count());
    let total: f64 = first_block
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-4);

    ok(d, &with(&["transfer", "--model", "s2.ckpt", "--from", "negative", "--to", "positive", "--weight", "1.5", "--input", "src.txt", "--output", "out.txt"]));
    assert_eq!(read(d, "out.txt").lines().count(), 5);
    assert!(d.join("out.txt.manifest.json").is_file());

    ok(d, &with(&["evaluate", "--eval-models", "eval.ckpt", "--input", "out.txt", "--source", "src.txt", "--to", "positive", "--output", "eval.json"]));
    let report: serde_json::Value = serde_json::from_str(&read(d, "eval.json")).unwrap();
    for k in ["acc", "ppl", "bleu", "gm", "n"] {
        assert!(report.get(k).is_some(), "eval json lacks {k}");
    }
    assert_eq!(report["n"], 5);

    ok(d, &with(&["sweep", "--data", "data", "--model", "s2.ckpt", "--eval-models", "eval.ckpt", "--out", "sweep.csv"]));
    let csv = read(d, "sweep.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("w,acc,ppl,bleu,gm"));
    assert_eq!(lines.count(), 2);

    let m: serde_json::Value = serde_json::from_str(&read(d, "s2.ckpt.manifest.json")).unwrap();
    assert_eq!(m["command"], "train-stage2");
    assert!(m["inputs"]["scorer"]["sha256"].is_string());
    assert!(m["output"]["sha256"].is_string());
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let gen = |env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pivotvae"));
        cmd.current_dir(d).env_remove("STOWER_SEED");
        if let Some(v) = env {
            cmd.env("STOWER_SEED", v);
        }
        let o = cmd.args(["gen-data", "--n", "5", "--out", out]).output().unwrap();
        assert!(o.status.success());
        let m: serde_json::Value = serde_json::from_str(&read(d, &format!("{out}/run.manifest.json"))).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(gen(Some("1234"), "a"), 1234);
    assert_eq!(gen(None, "b"), 7);
    assert_ne!(read(d, "a/negative.txt"), read(d, "b/negative.txt"));
}

#[test]
fn usage_errors_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = run(d, &["transfer", "--model", "missing.ckpt", "--from", "a", "--to", "b", "--weight", "1", "--input", "x", "--output", "y"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let out = run(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_pivotvae"))
        .current_dir(d)
        .env("STOWER_SEED", "not-a-number")
        .args(["gen-data", "--n", "5", "--out", "z"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("bad.cfg"), "train.nonsense = 3\n").unwrap();
    let out = run(d, &["gen-data", "--n", "5", "--out", "z", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}
