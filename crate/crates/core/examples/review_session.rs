//! Replays the fixture pipeline up to the synthetic corpus, starts the
//! review server on a loopback port and walks three evaluators through a
//! blinded session over HTTP, then prints the agreement report.
//!
//!     cargo run --example review_session

use std::path::Path;
use std::sync::Arc;

use icdaug::config::RunConfig;
use icdaug::pipeline;
use icdaug::review::ReviewServer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let out = tempfile::tempdir()?;
    let mut cfg = RunConfig::resolve(Some(&root.join("replay.cfg")), &[])?;
    cfg.corpus = root.join("corpus.jsonl").display().to_string();
    cfg.descriptions = root.join("descriptions.csv").display().to_string();
    cfg.fixtures = root.join("responses").display().to_string();
    cfg.out_dir = out.path().display().to_string();
    pipeline::select(&cfg)?;
    pipeline::plan(&cfg)?;
    pipeline::generate(&cfg, false, None)?;
    pipeline::postprocess(&cfg)?;

    let store = Arc::new(pipeline::review_store(&cfg)?);
    let server = ReviewServer::start(store, pipeline::session_defaults(&cfg))?;
    let base = server.base_url();
    println!("review server at {base}");
    let client = Client::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    for evaluator in ["clinician-a", "clinician-b", "clinician-c"] {
        let created: Value = client.post(format!("{base}/sessions")).json(&json!({"evaluator": evaluator})).send()?.json()?;
        let sid = created["session_id"].as_str().unwrap_or_default().to_string();
        let mut writes = 0;
        loop {
            let next: Value = client.get(format!("{base}/sessions/{sid}/next")).send()?.json()?;
            if next["complete"] == true {
                break;
            }
            let alias = next["alias"].as_str().unwrap_or_default();
            let doc: Value = client.get(format!("{base}/documents/{alias}")).send()?.json()?;
            let words = doc["text"].as_str().unwrap_or_default().split_whitespace().count();
            for metric in next["pending_metrics"].as_array().into_iter().flatten() {
                // longer notes get slightly better scores, plus noise
                let score = (2 + words / 150 + rng.random_range(0..3)).min(5);
                client
                    .post(format!("{base}/ratings"))
                    .json(&json!({"session_id": sid, "alias": alias, "metric": metric, "score": score}))
                    .send()?
                    .error_for_status()?;
                writes += 1;
            }
        }
        println!("{evaluator}: session {sid}, {writes} ratings");
    }

    let report: Value = client.get(format!("{base}/reports/agreement")).send()?.json()?;
    for cell in report["cells"].as_array().into_iter().flatten() {
        println!(
            "{:<22} {:<9} kappa {:>7} mean {:.3}",
            cell["metric"].as_str().unwrap_or_default(),
            cell["provenance"].as_str().unwrap_or_default(),
            cell["kappa"].as_f64().map_or("undef".into(), |k| format!("{k:.3}")),
            cell["mean"].as_f64().unwrap_or_default()
        );
    }
    Ok(())
}
