//! Regenerates `fixtures/`: a 500-document benchmark corpus, its
//! description table and lexicon, and replay fixtures recorded over HTTP
//! from the simulated endpoint for every generation and coding request.
//!
//!     cargo run --example record_fixtures

use std::path::Path;

use icdaug::benchmark::{generate, BenchmarkConfig};
use icdaug::config::RunConfig;
use icdaug::dataset::Split;
use icdaug::pipeline::{self, write_atomic};
use icdaug::simulate::{SimServer, SimulatedWriter};

const FIXTURE_SEED: u64 = 17;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let bench = generate(&BenchmarkConfig::fixture_500(FIXTURE_SEED));
    let mut corpus = Vec::new();
    bench.corpus.write_jsonl(&mut corpus)?;
    write_atomic(&root.join("corpus.jsonl"), &corpus)?;
    write_atomic(&root.join("descriptions.csv"), bench.descriptions_csv().as_bytes())?;
    write_atomic(&root.join("lexicon.json"), &serde_json::to_vec_pretty(&bench.lexicon)?)?;

    let responses = root.join("responses");
    if responses.exists() {
        std::fs::remove_dir_all(&responses)?;
    }
    let server = SimServer::start(SimulatedWriter::new(bench.lexicon.clone(), bench.config.noise_words))?;
    let scratch = tempfile::tempdir()?;

    let mut cfg = RunConfig::resolve(Some(&root.join("replay.cfg")), &[])?;
    cfg.corpus = root.join("corpus.jsonl").display().to_string();
    cfg.descriptions = root.join("descriptions.csv").display().to_string();
    cfg.fixtures = responses.display().to_string();
    cfg.out_dir = scratch.path().display().to_string();
    cfg.mode = "record".into();
    cfg.base_url = server.base_url();
    cfg.token_env = None;

    pipeline::select(&cfg)?;
    pipeline::plan(&cfg)?;
    let (_, gen) = pipeline::generate(&cfg, true, None)?;
    let (_, coded) = pipeline::code_notes(&cfg, Split::Test, true, None)?;
    let files = walk(&responses);
    println!(
        "{} generations, {} coded notes, {} fixture files, {} HTTP requests",
        gen.responses.len(),
        coded.documents,
        files,
        server.requests().len()
    );
    if !gen.failures.is_empty() || !coded.failures.is_empty() {
        return Err("recording had failures".into());
    }
    Ok(())
}

fn walk(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|it| {
            it.flatten()
                .map(|e| if e.path().is_dir() { walk(&e.path()) } else { 1 })
                .sum()
        })
        .unwrap_or(0)
}
