mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use icdaug::dataset::SplitCorpus;
use icdaug::metrics::PredictionSet;
use icdaug::pipeline::StageManifest;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn icdaug(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icdaug"))
        .current_dir(manifest_dir())
        .env_remove("ICDAUG_MODE")
        .arg("--config")
        .arg("fixtures/replay.cfg")
        .arg("--set")
        .arg(format!("out_dir={}", out.display()))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> Value {
    let o = icdaug(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_of(o: &Output) -> Value {
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("stderr is not JSON: {line}"))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn select_writes_manifest_with_candidates_families_and_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = ok(dir.path(), &["select"]);
    assert_eq!(m["stage"], "select");
    assert!(m["summary"]["candidates"].as_u64().unwrap() > 0);
    assert_eq!(m["summary"]["chosen_families"].as_array().unwrap().len(), 3);
    let sel: Value = serde_json::from_slice(&std::fs::read(dir.path().join("selection.json")).unwrap()).unwrap();
    assert!(!sel["generation_codes"]["few_shot_codes"].as_array().unwrap().is_empty());
    assert!(!sel["generation_codes"]["zero_shot_codes"].as_array().unwrap().is_empty());
    assert_eq!(
        m["inputs"]["corpus"]["sha256"].as_str().unwrap(),
        sha(&fixtures_dir().join("corpus.jsonl"))
    );
}

#[test]
fn evaluate_gold_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["select"]);
    let corpus = SplitCorpus::load(&fixtures_dir().join("corpus.jsonl")).unwrap();
    let gold = PredictionSet::from_documents(&corpus.test);
    let pred = dir.path().join("gold.jsonl");
    let mut buf = Vec::new();
    gold.write_jsonl(&mut buf).unwrap();
    std::fs::write(&pred, buf).unwrap();
    let r = ok(dir.path(), &["evaluate", "--predictions", pred.to_str().unwrap(), "--name", "identity"]);
    for key in ["mi_f1", "ma_f1", "mi_f1_f", "ma_f1_f", "mi_f1_f_gen", "ma_f1_f_gen"] {
        assert_eq!(r["row"][key].as_f64(), Some(1.0), "{key}");
    }
    assert_eq!(r["row"]["oof_f"].as_f64(), Some(0.0));
    for flavor in ["leaf", "set_based", "cophe"] {
        assert_eq!(r["coding"][flavor]["f1"].as_f64(), Some(1.0));
    }
    assert!(dir.path().join("identity.csv").exists());
}

#[test]
fn replay_pipeline_is_byte_deterministic_and_chained() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["--set", "base_url=http://127.0.0.1:9/v1", "run"]);
        ok(d, &["--set", "base_url=http://127.0.0.1:9/v1", "stats"]);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs between runs", k.display());
    }

    // every manifest input that is a stage output matches the producer's hash
    let mut produced: BTreeMap<String, String> = BTreeMap::new();
    let manifests: Vec<StageManifest> = ta
        .iter()
        .filter(|(k, _)| k.starts_with("manifests"))
        .map(|(_, v)| serde_json::from_slice(v).unwrap())
        .collect();
    for m in &manifests {
        for r in m.outputs.values() {
            produced.insert(r.path.clone(), r.sha256.clone());
        }
    }
    let corpus_hash = sha(&fixtures_dir().join("corpus.jsonl"));
    for m in &manifests {
        assert_eq!(m.config_hash, manifests[0].config_hash);
        for (name, r) in &m.inputs {
            if let Some(h) = produced.get(&r.path) {
                assert_eq!(h, &r.sha256, "{} input {name}", m.stage);
            } else if name == "corpus" && r.path.ends_with("corpus.jsonl") {
                assert_eq!(r.sha256, corpus_hash);
            }
        }
    }
    let merge: StageManifest = serde_json::from_slice(&ta[Path::new("manifests/merge.json")]).unwrap();
    let plan_lines = String::from_utf8_lossy(&ta[Path::new("plan.jsonl")])
        .lines()
        .filter(|l| l.contains("\"type\":\"record\""))
        .count() as u64;
    assert_eq!(
        merge.summary["merged_train"].as_u64().unwrap(),
        merge.summary["baseline_train"].as_u64().unwrap() + plan_lines
    );
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let o = icdaug(dir.path(), &["--set", "no_such_key=1", "select"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["error"], "config");

    let o = icdaug(dir.path(), &["--set", "corpus=missing.jsonl", "select"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_of(&o)["error"], "data");

    let o = icdaug(dir.path(), &["--set", "mode=live", "generate"]);
    assert_eq!(o.status.code(), Some(2), "live without clearance");

    ok(dir.path(), &["select"]);
    ok(dir.path(), &["plan"]);
    let empty = tempfile::tempdir().unwrap();
    let fx = format!("fixtures={}", empty.path().display());
    let o = icdaug(dir.path(), &["--set", &fx, "generate"]);
    assert_eq!(o.status.code(), Some(4));
    let e = error_of(&o);
    assert_eq!(e["error"], "endpoint");
    assert!(e["message"].as_str().unwrap().contains("no fixture"));

    let o = icdaug(dir.path(), &["report", "agreement"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn code_notes_replays_both_parse_routes() {
    let dir = tempfile::tempdir().unwrap();
    let r = ok(dir.path(), &["code-notes"]);
    assert!(r["routes"]["json"].as_u64().unwrap() > 0);
    assert!(r["routes"]["regex_fallback"].as_u64().unwrap() > 0);
    assert!(r["failures"].as_array().unwrap().is_empty());
    assert!(dir.path().join("coding_report.csv").exists());
}
