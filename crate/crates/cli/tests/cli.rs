use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_graphmsl"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const MOLS: [&str; 24] = [
    "CCO", "CCN", "CCC", "CCCC", "CC(=O)O", "c1ccccc1", "c1ccccc1O", "c1ccccc1N", "c1ccncc1", "C1CCCCC1",
    "CC(C)C", "CC(C)O", "OCC(O)CO", "CCOCC", "CC(=O)N", "c1ccc(Cl)cc1", "c1ccc(F)cc1", "c1ccc(C)cc1",
    "C1CCNCC1", "C1CCOC1", "CCCCO", "CCCCN", "CC#N", "C=CC=C",
];

/// Writes a labelled molecule file and returns its path.
fn molecules(dir: &Path) -> PathBuf {
    let text: String = MOLS
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let active = s.contains('c');
            serde_json::json!({ "id": format!("m{i:02}"), "smiles": s, "labels": [if active { 1.0 } else { 0.0 }, s.len() as f64] })
                .to_string()
                + "\n"
        })
        .collect();
    let p = dir.join("mols.jsonl");
    fs::write(&p, text).unwrap();
    p
}

fn embeddings(dir: &Path, name: &str, scale: f64) -> PathBuf {
    let text: String = (0..4)
        .map(|i| {
            serde_json::json!({ "id": format!("m{i:02}"), "vector": [1.0, scale * i as f64, (i % 2) as f64] }).to_string()
                + "\n"
        })
        .collect();
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn parse_stats_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    molecules(dir.path());
    let o = run(dir.path(), &["parse", "--in", "mols.jsonl", "--stats"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), MOLS.len());
    assert_eq!(lines[0]["id"], "m00");
    assert_eq!(lines[0]["atoms"], 3);
    assert_eq!(lines[0]["bonds"], 2);
    assert_eq!(lines[5]["bonds"], 6);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&run(dir.path(), &["parse"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["parse", "--in", "missing.jsonl"])), 2);
    fs::write(dir.path().join("bad.jsonl"), "{\"id\":\"a\",\"smiles\":\"C1CC\"}\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["parse", "--in", "bad.jsonl"])), 2);
    assert_eq!(code(&run(dir.path(), &["verify-theorem", "--n", "8", "--trials", "2", "--max-steps", "5"])), 3);
}

#[test]
fn data_errors_name_the_file_once() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["parse", "--in", "missing.jsonl"]);
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.matches("missing.jsonl").count(), 1, "{err}");
}

#[test]
fn verify_theorem_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify-theorem", "--n", "16", "--trials", "3", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n"], 16);
    assert_eq!(v["trials"], 3);
    assert_eq!(v["converged"], true);
    assert_eq!(v["ordering_violations"], 0);
    assert!(v["max_softmax_deviation"].as_f64().unwrap() < 1e-3);
    assert_eq!(v["trial_reports"].as_array().unwrap().len(), 3);
}

#[test]
fn fuse_weights_and_presets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    embeddings(d, "e.jsonl", 1.0);
    let o = run(d, &["simmatrix", "--modality", "smiles", "--embeddings", "e.jsonl", "--out", "s.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let inputs = "s.csv,s.csv,s.csv,s.csv";
    let ok = run(d, &["fuse", "--inputs", inputs, "--weights", "0.7,0.1,0.1,0.1", "--out", "w.csv"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = run(d, &["fuse", "--inputs", inputs, "--weights", "0.7,0.1,0.1,0.2", "--out", "x.csv"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert!(!d.join("x.csv").exists());
    assert_eq!(code(&run(d, &["fuse", "--inputs", inputs, "--weights", "0.5,0.5", "--out", "x.csv"])), 1);
    assert_eq!(code(&run(d, &["fuse", "--inputs", inputs, "--fusion-preset", "nope", "--out", "x.csv"])), 1);

    // Fusing four copies of one target with any weights returns that target.
    let preset = run(d, &["fuse", "--inputs", inputs, "--fusion-preset", "fusion-average", "--out", "p.csv"]);
    assert_eq!(code(&preset), 0);
    let uni = run(d, &["fuse", "--inputs", "s.csv", "--fusion-preset", "smiles", "--out", "u.csv"]);
    assert_eq!(code(&uni), 0, "{}", String::from_utf8_lossy(&uni.stderr));
    let parse = |p: &str| -> Vec<f64> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    let (u, p) = (parse("u.csv"), parse("p.csv"));
    assert_eq!(u.len(), 16);
    for (a, b) in u.iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
    for row in u.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn outputs_are_idempotent_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    molecules(d);
    let train = |threads: &str, out: &str| {
        let o = run(
            d,
            &[
                "--threads", threads, "pretrain", "--mols", "mols.jsonl", "--epochs", "3", "--batch", "8",
                "--hidden", "8", "--out", out, "--history", &format!("{out}.csv"),
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("1", "a.gmsl");
    train("1", "b.gmsl");
    train("4", "c.gmsl");
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a.gmsl"), read("b.gmsl"));
    assert_eq!(read("a.gmsl"), read("c.gmsl"));
    assert_eq!(read("a.gmsl.csv"), read("c.gmsl.csv"));

    for (threads, out) in [("1", "e1.jsonl"), ("4", "e4.jsonl")] {
        let o = run(d, &["--threads", threads, "embed", "--ckpt", "a.gmsl", "--mols", "mols.jsonl", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read("e1.jsonl"), read("e4.jsonl"));
    let first: Value = serde_json::from_str(fs::read_to_string(d.join("e1.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "m00");
    assert_eq!(first["vector"].as_array().unwrap().len(), 8);

    for (threads, out) in [("1", "f1.bin"), ("4", "f4.bin")] {
        let o = run(d, &["--threads", threads, "fingerprint", "--in", "mols.jsonl", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(read("f1.bin"), read("f4.bin"));
}

#[test]
fn resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    molecules(d);
    let base = ["pretrain", "--mols", "mols.jsonl", "--batch", "8", "--hidden", "8"];
    let with = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let o = run(d, &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    with(&["--epochs", "4", "--out", "straight.gmsl"]);
    with(&["--epochs", "2", "--out", "half.gmsl"]);
    with(&["--epochs", "4", "--resume", "half.gmsl", "--out", "resumed.gmsl"]);
    assert_eq!(fs::read(d.join("straight.gmsl")).unwrap(), fs::read(d.join("resumed.gmsl")).unwrap());
}

#[test]
fn probe_and_retrieval_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    molecules(d);
    let o = run(d, &["pretrain", "--mols", "mols.jsonl", "--epochs", "2", "--batch", "12", "--hidden", "8", "--out", "m.gmsl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(d, &["probe", "--ckpt", "m.gmsl", "--mols", "mols.jsonl", "--task", "reg", "--label-index", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["task"], "regression");
    assert_eq!(v["metric"], "rmse");
    assert!(v["value"].as_f64().unwrap().is_finite());

    assert_eq!(code(&run(d, &["probe", "--ckpt", "m.gmsl", "--mols", "mols.jsonl", "--task", "reg", "--split", "0.5,0.5"])), 1);

    let o = run(d, &["retrieval-check", "--ckpt", "m.gmsl", "--mols", "mols.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n"], MOLS.len());
    assert!(v["mean_nn_tanimoto"].as_f64().unwrap() >= v["mean_random_tanimoto"].as_f64().unwrap() - 1.0);
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    molecules(d);
    fs::write(d.join("cfg.json"), r#"{"epochs": 2, "hidden": 4, "batch": 8}"#).unwrap();
    let o = run(d, &["--config", "cfg.json", "pretrain", "--mols", "mols.jsonl", "--epochs", "1", "--out", "m.gmsl", "--history", "h.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(d.join("h.csv")).unwrap();
    // Explicit --epochs 1 wins over the file; batch 8 over 24 molecules gives 3 steps.
    assert_eq!(history.lines().count(), 1 + 3);
    let o = run(d, &["embed", "--ckpt", "m.gmsl", "--mols", "mols.jsonl", "--out", "e.jsonl"]);
    assert_eq!(code(&o), 0);
    let first: Value = serde_json::from_str(fs::read_to_string(d.join("e.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["vector"].as_array().unwrap().len(), 4);

    fs::write(d.join("bad.json"), r#"{"no_such_flag": 1}"#).unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.json", "pretrain", "--mols", "mols.jsonl", "--out", "x.gmsl"])), 1);
}
