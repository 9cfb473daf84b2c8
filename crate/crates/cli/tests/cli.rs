use std::path::Path;
use std::process::{Command, Output};

fn lidctc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidctc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = lidctc(&["ctc-check", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn ctc_check_reports_deviation() {
    let o = lidctc(&["ctc-check", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max deviation over 50 draws"));
}

#[test]
fn grad_check_passes_for_one_mode() {
    let o = lidctc(&["grad-check", "--mode", "hier_lid_utt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("hier_lid_utt"));
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = lidctc(&[
            "gen-corpus",
            "--seed",
            "7",
            "--utts",
            "10",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["corpus.jsonl", "languages.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
}

#[test]
fn missing_config_fails_with_one_line() {
    let o = lidctc(&["train", "--config", "missing.json"]);
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("missing.json"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "epochs": 1,
        "batch_size": 4,
        "warmup_steps": 10,
        "data_dir": dir.join("data"),
        "out_dir": dir.join("run"),
        "encoder": {"n_layers": 2, "d_model": 8, "n_heads": 2, "ffn_dim": 8, "tap_layers": [1], "mode": "hier_lid_tok"},
        "decoder": {"n_layers": 1, "n_heads": 2, "ffn_dim": 8},
        "beam": {"beam": 2}
    });
    let path = dir.join("train.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn train_then_eval_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = lidctc(&[
        "gen-corpus",
        "--utts",
        "10",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = tiny_config(dir.path());
    let o = lidctc(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in [
        "config.json",
        "vocab.txt",
        "loss.csv",
        "epochs.csv",
        "averaged.ckpt",
        "eval.json",
        "confusion.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let out = dir.path().join("re-eval");
    let o = lidctc(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(out.join("eval.json")).unwrap(),
        std::fs::read_to_string(run.join("eval.json")).unwrap()
    );

    let o = lidctc(&["decode", "--run", run.to_str().unwrap(), "--split", "dev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|v| v.get("hypothesis").is_some()));
}

#[test]
fn matrix_with_one_mode_writes_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(lidctc(&[
        "gen-corpus",
        "--utts",
        "10",
        "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("matrix");
    let o = lidctc(&[
        "matrix",
        "--config",
        cfg.to_str().unwrap(),
        "--modes",
        "none",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("none,"));
}
