use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "layers=1\nheads=2\nd_model=16\nblock_len=4\ntrain_utterances=16\ntest_utterances=4\nlength_max=4\nepochs=1\nbatch_size=4\n";

fn narstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_narstream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> train on a tiny configuration; returns (dir, checkpoint path).
fn trained() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let o = narstream(&["synth", "--out", p(&data), "--config", p(&cfg), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("model.ckpt");
    let o = narstream(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epoch=1 loss="));
    (dir, ckpt)
}

#[test]
fn synth_writes_dataset_layout() {
    let (dir, ckpt) = trained();
    let data = dir.path().join("data");
    assert!(data.join("train/00000.feat").exists());
    assert!(data.join("train/00015.ref").exists());
    assert!(data.join("test/00003.span").exists());
    assert!(data.join("stream/stream.feat").exists());
    assert!(ckpt.exists());
    assert!(dir.path().join("model.ckpt.config").exists());
}

#[test]
fn decode_stream_and_bench() {
    let (dir, ckpt) = trained();
    let data = dir.path().join("data");
    let o = narstream(&["decode", "--model", p(&ckpt), "--data", p(&data.join("test"))]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 5);
    assert!(out.lines().last().unwrap().starts_with("cer="));

    let o = narstream(&["stream", "--model", p(&ckpt), "--input", p(&data.join("stream")), "--tau", "8"]);
    assert!(o.status.success());
    for line in stdout(&o).lines() {
        assert_eq!(line.split('\t').count(), 6, "{line}");
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("boundary_recall="));

    let run = |events: &Path| {
        let o = narstream(&[
            "bench", "--model", p(&ckpt), "--data", p(&data.join("test")), "--threads", "2",
            "--events", p(events),
        ]);
        assert!(o.status.success());
        let text = stdout(&o);
        for key in ["rtf=", "mean_iterations=", "mean_forward_passes=", "max_iterations="] {
            assert!(text.lines().any(|l| l.starts_with(key)), "missing {key}");
        }
        let rows: Vec<String> = std::fs::read_to_string(events)
            .unwrap()
            .lines()
            .map(|l| l.rsplitn(2, '\t').nth(1).unwrap().to_string())
            .collect();
        rows
    };
    let a = run(&dir.path().join("a.tsv"));
    let b = run(&dir.path().join("b.tsv"));
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);

    let o = narstream(&["bench", "--model", p(&ckpt), "--data", p(&data.join("test")), "--output", "ctc"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max_forward_passes=1"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "colour=blue\n").unwrap();
    let o = narstream(&["synth", "--out", p(dir.path()), "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let o = narstream(&["synth", "--out", p(dir.path()), "--lambda", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = narstream(&["synth", "--out", p(dir.path()), "--output", "beam"]);
    assert_eq!(o.status.code(), Some(2));
    let o = narstream(&["synth", "--out", p(dir.path()), "--block-len", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = narstream(&["gradcheck"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{out}");
}
