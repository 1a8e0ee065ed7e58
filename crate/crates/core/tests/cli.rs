mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{bin, docs, fixture, gold_spans, key_from_json, write_tokenized};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("NLEKIT_SEED").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON error: {text}"))
}

#[test]
fn detect_reports_matches_gold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spans.jsonl");
    let o = run(&["detect", "--in", p(&fixture("reports.jsonl")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = lines(&out);
    assert_eq!(recs[0]["format"], "nlekit");
    assert_eq!(recs[0]["kind"], "spans");
    let gold = gold_spans();
    assert_eq!(recs.len() - 1, gold.len());
    for r in &recs[1..] {
        let spans: Vec<_> = r["spans"].as_array().unwrap().iter().map(key_from_json).collect();
        assert_eq!(spans, gold[r["id"].as_str().unwrap()]);
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("spans.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "detect");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn detect_adds_labels_for_tokenized_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tok.jsonl");
    write_tokenized(&input, &[("a".into(), "beacon to 10.0.0.1 now".into())]);
    let out = dir.path().join("o.jsonl");
    assert!(run(&["detect", "--in", p(&input), "--out", p(&out)]).status.success());
    let r = &lines(&out)[1];
    let labels: Vec<u8> = serde_json::from_value(r["nle_labels"].clone()).unwrap();
    assert_eq!(labels.len(), r["tokens"].as_array().unwrap().len());
    assert!(labels.contains(&3));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["plan", "--in", "x", "--out", "y", "--strategy", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["--format-version", "7", "detect", "--in", "x", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_one_with_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["detect", "--in", p(&dir.path().join("absent")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(stderr_error(&missing)["error"]["kind"], "io");

    let bad_version = dir.path().join("v9.jsonl");
    fs::write(&bad_version, "{\"format\":\"nlekit\",\"format_version\":9}\n{\"text\":\"x\"}\n").unwrap();
    let o = run(&["detect", "--in", p(&bad_version), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_error(&o)["error"]["message"].as_str().unwrap().contains("format version 9"));

    let untokenized = dir.path().join("plain.txt");
    fs::write(&untokenized, "no tokens here\n").unwrap();
    let o = run(&["plan", "--strategy", "vanilla-mlm", "--in", p(&untokenized), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], "data");
}

#[test]
fn plan_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tok.jsonl");
    write_tokenized(&input, &docs("reports.jsonl"));
    let outs: Vec<(Vec<u8>, Vec<u8>)> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("plan{i}.jsonl"));
            let o = run(&["plan", "--strategy", "mask-semis", "--seed", "7", "--in", p(&input), "--out", p(&out)]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            let m: Value = serde_json::from_slice(&fs::read(format!("{}.manifest.json", p(&out))).unwrap()).unwrap();
            (fs::read(&out).unwrap(), serde_json::to_vec(&m["outputs"][0]["sha256"]).unwrap())
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn seed_comes_from_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tok.jsonl");
    write_tokenized(&input, &docs("reports.jsonl")[..20]);
    let run_with = |env: Option<&str>, extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut c = Command::new(bin());
        c.args(["plan", "--strategy", "vanilla-mlm", "--in", p(&input), "--out", p(&out)]).args(extra);
        match env {
            Some(s) => c.env("NLEKIT_SEED", s),
            None => c.env_remove("NLEKIT_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read(out).unwrap()
    };
    assert_eq!(run_with(Some("99"), &[], "a"), run_with(None, &["--seed", "99"], "b"));
    assert_ne!(run_with(Some("99"), &[], "c"), run_with(None, &[], "d"));
}

#[test]
fn plan_records_parse_back_into_plans() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tok.jsonl");
    write_tokenized(&input, &docs("reports.jsonl")[..30]);
    let out = dir.path().join("plan.jsonl");
    assert!(run(&["plan", "--strategy", "mask-semis-nlec", "--in", p(&input), "--out", p(&out)]).status.success());
    let recs = lines(&out);
    assert_eq!(recs[0]["kind"], "plan");
    for r in &recs[1..] {
        let rec: nlekit::masking::TrainingRecord = serde_json::from_value(r.clone()).unwrap();
        let plan = nlekit::masking::parse_training_record(&rec).unwrap();
        assert!(plan.nlec_enabled);
        assert_eq!(rec.nlec_loss_scale, 0.1);
    }
}

#[test]
fn replace_all_two_stage_flow() {
    let dir = tempfile::tempdir().unwrap();
    let rewrite = dir.path().join("rewrite.jsonl");
    let o = run(&["plan", "--strategy", "replace-all", "--in", p(&fixture("reports.jsonl")), "--out", p(&rewrite)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = lines(&rewrite);
    assert_eq!(recs[1]["id"], "report-000");
    assert!(recs[1]["text"].as_str().unwrap().contains("(<MD5>) from C2 <URL>"));
    let stage2: Vec<(String, String)> = recs[1..]
        .iter()
        .map(|r| (r["id"].as_str().unwrap().to_string(), r["text"].as_str().unwrap().to_string()))
        .collect();
    let tok = dir.path().join("rewritten_tok.jsonl");
    write_tokenized(&tok, &stage2);
    let out = dir.path().join("plan.jsonl");
    let o = run(&["plan", "--strategy", "replace-all", "--in", p(&tok), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for r in &lines(&out)[1..] {
        assert!(r.get("nlec_labels").is_none_or(Value::is_null));
        assert!(r["rewritten_text"].is_string());
    }

    let raw_tok = dir.path().join("raw_tok.jsonl");
    write_tokenized(&raw_tok, &docs("reports.jsonl")[..3]);
    let o = run(&["plan", "--strategy", "replace-all", "--in", p(&raw_tok), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn refang_plain_text_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let txt = dir.path().join("in.txt");
    fs::write(&txt, "C2 hxxp://evil[.]com\nmail admin[@]x[.]org\n").unwrap();
    let out = dir.path().join("out.txt");
    assert!(run(&["refang", "--in", p(&txt), "--out", p(&out)]).status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), "C2 http://evil.com\nmail admin@x.org\n");

    let out = dir.path().join("out.jsonl");
    assert!(run(&["refang", "--in", p(&fixture("reports.jsonl")), "--out", p(&out)]).status.success());
    let recs = lines(&out);
    assert_eq!(recs[0]["kind"], "refang");
    assert!(recs[1]["text"].as_str().unwrap().contains("https://github.url-mini.com/msg.zip"));
}

#[test]
fn stats_prints_table_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stats.json");
    let o = run(&["stats", "--in", p(&fixture("cyber_corpus.jsonl")), "--out", p(&out), "--corpus-id", "cyber"]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("corpus: cyber") && table.contains("URL"));
    let recs = lines(&out);
    assert_eq!(recs[0]["kind"], "stats");
    let m = common::manifest();
    assert_eq!(recs[1]["word_count"], m["cyber_corpus"]["words"]);
    assert_eq!(recs[1]["per_type"]["URL"]["count"], m["cyber_corpus"]["counts"]["URL"]);
}

#[test]
fn probe_build_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.jsonl");
    let targets = dir.path().join("targets.jsonl");
    let o = run(&[
        "probe-build",
        "--phrases",
        p(&fixture("phrases.txt")),
        "--vocab",
        p(&fixture("vocab.json")),
        "--min-id",
        "25000",
        "--in",
        p(&fixture("probe_corpus.jsonl")),
        "--out",
        p(&inst),
        "--targets-out",
        p(&targets),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = lines(&inst);
    assert_eq!(got[0]["kind"], "probe-instances");
    assert_eq!(got[1..].to_vec(), common::read_jsonl("probe_instances.expected.jsonl"));
    assert_eq!(lines(&targets)[1]["tokens"], common::manifest()["probing"]["targets"]);

    // predictions: wrong on every third instance
    let mut preds = String::new();
    let mut expected_correct = 0;
    let mut near = (0, 0);
    for (i, r) in got[1..].iter().enumerate() {
        let ok = i % 3 != 0;
        expected_correct += usize::from(ok);
        if r["near_fnle"].as_bool().unwrap() {
            near.1 += 1;
            near.0 += usize::from(ok);
        }
        let pred = if ok { r["gold_token_id"].as_u64().unwrap() } else { 1 };
        preds.push_str(&format!(
            "{{\"doc_id\":{},\"token_position\":{},\"predicted_token_id\":{pred}}}\n",
            r["doc_id"], r["token_position"]
        ));
    }
    let pred_path = dir.path().join("preds.jsonl");
    fs::write(&pred_path, &preds).unwrap();
    let o = run(&["probe-score", "--instances", p(&inst), "--preds", p(&pred_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let score: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(score["correct_all"], expected_correct);
    assert_eq!(score["total_all"], got.len() - 1);
    assert_eq!((score["correct_near_fnle"].clone(), score["total_near_fnle"].clone()), (near.0.into(), near.1.into()));

    let first = preds.lines().next().unwrap().to_string();
    fs::write(&pred_path, format!("{preds}{first}\n")).unwrap();
    assert_eq!(run(&["probe-score", "--instances", p(&inst), "--preds", p(&pred_path)]).status.code(), Some(1));
    fs::write(&pred_path, preds.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    let o = run(&["probe-score", "--instances", p(&inst), "--preds", p(&pred_path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_error(&o)["error"]["message"].as_str().unwrap().contains("no prediction"));
}

#[test]
fn jobs_and_doc_order_do_not_change_plans() {
    let dir = tempfile::tempdir().unwrap();
    let reports = docs("reports.jsonl");
    let fwd = dir.path().join("fwd.jsonl");
    write_tokenized(&fwd, &reports);
    let mut reversed = reports.clone();
    reversed.reverse();
    let rev = dir.path().join("rev.jsonl");
    write_tokenized(&rev, &reversed);

    let plan_of = |input: &Path, jobs: &str, name: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let o = run(&["--jobs", jobs, "plan", "--strategy", "vanilla-nlec", "--seed", "3", "--in", p(input), "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let one = plan_of(&fwd, "1", "j1");
    assert_eq!(one, plan_of(&fwd, "4", "j4"));
    assert_eq!(one, plan_of(&fwd, "3", "j3"));

    let by_id = |bytes: &[u8]| -> BTreeMap<String, String> {
        String::from_utf8_lossy(bytes)
            .lines()
            .skip(1)
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["id"].as_str().unwrap().to_string(), l.to_string())
            })
            .collect()
    };
    assert_eq!(by_id(&one), by_id(&plan_of(&rev, "2", "r2")));
}
