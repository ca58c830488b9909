use std::path::Path;
use std::process::{Command, Output};

fn vtqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vtqa")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, num: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = vtqa(&["gen-data", "--out", path(&out), "--num", num, "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(gen(dir.path(), "a.jsonl", "5", "3")).unwrap();
    let b = std::fs::read(gen(dir.path(), "b.jsonl", "5", "3")).unwrap();
    let c = std::fs::read(gen(dir.path(), "c.jsonl", "5", "4")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.iter().filter(|&&x| x == b'\n').count(), 5);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vtqa(&["gen-data", "--num", "3"]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_field = 1\n").unwrap();
    let out = dir.path().join("x.jsonl");
    let o = vtqa(&["gen-data", "--config", path(&bad), "--out", path(&out), "--num", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_field"));

    let invalid = dir.path().join("invalid.toml");
    std::fs::write(&invalid, "min_frames = 9\nmax_frames = 4\n").unwrap();
    let o = vtqa(&["gen-data", "--config", path(&invalid), "--out", path(&out), "--num", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), "c.jsonl", "6", "0");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[gather]\nwidth = 8\nheads = 2\nencoder_layers = 1\ndecoder_layers = 1\n\
         [gather_optimizer]\nepochs = 3\nbatch_size = 4\nwarmup_steps = 0\nlearning_rate = 1e30\ngrad_clip = 0.0\n",
    )
    .unwrap();
    let ckpt = dir.path().join("g.ckpt");
    let o = vtqa(&["train-gather", "--corpus", path(&corpus), "--config", path(&cfg), "--out", path(&ckpt)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
}

#[test]
fn track_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), "c.jsonl", "10", "1");
    let report = dir.path().join("track.txt");
    let o = vtqa(&["track", "--corpus", path(&corpus), "--report", path(&report)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.starts_with("mota = "));
}

#[test]
fn scoring_reference_answers_gives_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), "c.jsonl", "4", "2");
    let samples: Vec<serde_json::Value> = std::fs::read_to_string(&corpus)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut preds = String::new();
    for s in &samples {
        for (q, qa) in s["qa"].as_array().unwrap().iter().enumerate() {
            let record = serde_json::json!({
                "question_id": format!("{}:{}", s["id"], q),
                "template": qa["template"],
                "prediction": qa["answers"][0].as_str().unwrap().to_uppercase(),
                "references": qa["answers"],
            });
            preds.push_str(&format!("{record}\n"));
        }
    }
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(&pred, preds).unwrap();
    let o = vtqa(&["score", "--pred", path(&pred), "--corpus", path(&corpus)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("acc = 1.0000") && stdout.contains("anls = 1.0000"), "{stdout}");

    let o = vtqa(&["score", "--pred", path(&pred), "--corpus", path(&corpus), "--metrics", "bleu"]);
    assert_eq!(o.status.code(), Some(2));
}
