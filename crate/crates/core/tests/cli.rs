use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn posg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = posg(dir, args);
    assert!(
        out.status.success(),
        "posg {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: [&str; 8] = ["--d-model", "16", "--d-ff", "32", "--n-layers", "1", "--epochs", "1"];

/// Corpus, lexicon and a trained POSG checkpoint in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--out", "all.txt", "--sequences", "200", "--seed", "4"]);
    ok(
        d,
        &[
            "ingest", "--corpus", "all.txt", "--lexicon-out", "lex.json", "--train-out", "train.txt", "--test-out",
            "test.txt", "--test-fraction", "0.25",
        ],
    );
    let mut args = vec!["train", "--corpus", "train.txt", "--lexicon", "lex.json", "--head", "posg", "--out", "posg.ckpt"];
    args.extend(TINY);
    ok(d, &args);
    dir
}

fn prompt_args() -> Vec<&'static str> {
    vec![
        "--checkpoint", "posg.ckpt", "--lexicon", "lex.json", "--corpus", "test.txt", "--prefix-len", "8",
        "--continuation-len", "10", "--max-prompts", "30",
    ]
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_artifacts_and_fixed_points() {
    let dir = workspace();
    let d = dir.path();
    let log = std::fs::read_to_string(d.join("posg.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2, "epoch 0 and epoch 1");
    assert!(!log.contains("wall"), "log is free of timing");

    let mut args = vec!["generate", "--out", "gen.jsonl", "--pos-stage", "top_k:20", "--token-stage", "nucleus:0.5"];
    args.extend(prompt_args());
    ok(d, &args);
    let text = std::fs::read_to_string(d.join("gen.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 30);
    for line in &lines {
        let cont = line["continuation"].as_array().unwrap();
        assert_eq!(cont.len(), 10);
        assert_eq!(line["sampled_pos"].as_array().unwrap().len(), 10, "a tag per token");
        assert_eq!(line["prefix"].as_array().unwrap().len(), 9, "BOS plus 8 tokens");
        assert!(line["reference"].is_array());
    }

    ok(
        d,
        &["evaluate", "--generations", "gen.jsonl", "--references", "gen.jsonl", "--out", "self.json"],
    );
    let m = &read_json(&d.join("self.json"))["metrics"];
    assert!((m["self_bleu_vs_reference"].as_f64().unwrap() - 100.0).abs() < 1e-6);
    assert!(m["kld"].as_f64().unwrap().abs() < 1e-9);
    for n in 1..=3 {
        assert!((m[format!("ms_jaccard_{n}")].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }

    ok(
        d,
        &[
            "evaluate", "--generations", "gen.jsonl", "--lexicon", "lex.json", "--checkpoint", "posg.ckpt",
            "--test-corpus", "test.txt", "--out", "eval.json",
        ],
    );
    let report = read_json(&d.join("eval.json"));
    let m = &report["metrics"];
    for key in ["self_bleu", "distinct_2", "distinct_2_pos", "uniq", "rep", "kld", "ms_jaccard_1", "ppl"] {
        assert!(m[key].is_number(), "missing {key}");
    }
    assert!(report["settings"]["distinct"].is_string());
}

#[test]
fn sweep_of_one_point_matches_evaluate() {
    let dir = workspace();
    let d = dir.path();
    let mut args = vec!["sweep", "--out", "sweep.csv", "--pos-stages", "top_k:5", "--token-stages", "nucleus:0.5"];
    args.extend(prompt_args());
    ok(d, &args);
    let csv = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    let header: Vec<&str> = rows[0].split(',').collect();
    let row: Vec<&str> = rows[1].split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();

    let mut args = vec!["generate", "--out", "gen.jsonl", "--pos-stage", "top_k:5", "--token-stage", "nucleus:0.5"];
    args.extend(prompt_args());
    ok(d, &args);
    ok(
        d,
        &[
            "evaluate", "--generations", "gen.jsonl", "--lexicon", "lex.json", "--checkpoint", "posg.ckpt",
            "--test-corpus", "test.txt", "--out", "eval.json",
        ],
    );
    let m = &read_json(&d.join("eval.json"))["metrics"];
    assert!((col("self_bleu4") - m["self_bleu"].as_f64().unwrap()).abs() < 1e-9);
    assert!((col("distinct_2") - m["distinct_2"].as_f64().unwrap()).abs() < 1e-12);
    assert!((col("rep") - m["rep"].as_f64().unwrap()).abs() < 1e-12);
    assert!((col("ppl") - m["ppl"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn control_table_and_config_file() {
    let dir = workspace();
    let d = dir.path();
    let mut args = vec!["control", "--out", "control.csv", "--tag", "JJ", "--multipliers", "0.1,1,10"];
    args.extend(prompt_args());
    ok(d, &args);
    let csv = std::fs::read_to_string(d.join("control.csv")).unwrap();
    let counts: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 3);
    assert!(counts[2] > counts[0], "x10 yields more JJ than x0.1: {counts:?}");

    // Values from the file apply unless a flag overrides them.
    std::fs::write(
        d.join("run.toml"),
        "seed = 9\n[generation]\nprefix_len = 5\ncontinuation_len = 4\nmax_prompts = 7\n[sampling]\ntoken_stage = \"top_k:3\"\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "--config", "run.toml", "generate", "--checkpoint", "posg.ckpt", "--lexicon", "lex.json", "--corpus",
            "test.txt", "--out", "cfg.jsonl", "--continuation-len", "6",
        ],
    );
    let text = std::fs::read_to_string(d.join("cfg.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 7);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["prefix"].as_array().unwrap().len(), 6);
    assert_eq!(first["continuation"].as_array().unwrap().len(), 6);
    assert_eq!(first["config"]["token_stage"], "top_k:3");
    assert_eq!(first["config"]["seed"], 9);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = workspace();
    let d = dir.path();
    let code = |args: &[&str]| posg(d, args).status.code().unwrap();

    assert_eq!(code(&["train", "--no-such-flag"]), 2);
    assert_eq!(code(&["generate", "--pos-stage", "top_k:0"]), 2);
    let mut args = vec!["control", "--out", "c.csv", "--tag", "NOT_A_TAG"];
    args.extend(prompt_args());
    assert_eq!(code(&args), 2);
    let mut args = vec!["sweep", "--out", "s.csv", "--token-stages", "nucleus:1.5"];
    args.extend(prompt_args());
    assert_eq!(code(&args), 2);

    let out = posg(d, &["ingest", "--corpus", "missing.txt", "--lexicon-out", "x.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    std::fs::write(d.join("bad.txt"), "the\tDT\nnotab\n").unwrap();
    let out = posg(d, &["ingest", "--corpus", "bad.txt", "--lexicon-out", "x.json"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.txt") && err.contains('2'), "names file and line: {err}");

    std::fs::write(d.join("junk.ckpt"), b"POSGCKPT").unwrap();
    let mut args = vec!["generate", "--out", "g.jsonl"];
    args.extend(prompt_args());
    args[4] = "junk.ckpt";
    assert_eq!(code(&args), 3);

    std::fs::write(d.join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "entropy-check", "--trials", "2"]), 3);
}

#[test]
fn entropy_check_reports_and_writes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["entropy-check", "--trials", "40", "--seed", "3", "--out", "entropy.json"]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["all_hard_checks_hold"], true);
    assert!(summary["mean_h_posg"].as_f64().unwrap() > summary["mean_h_topk"].as_f64().unwrap());
    let report = read_json(&d.join("entropy.json"));
    assert_eq!(report["trials"].as_array().unwrap().len(), 40);
    assert_eq!(posg(d, &["entropy-check", "--trials", "0"]).status.code(), Some(2));
}
