//! Full pipeline on the constructed benchmark with the in-process
//! simulated writer standing in for the chat endpoint: select, plan,
//! generate, postprocess, merge, train base and aug, evaluate, compare.
//!
//!     cargo run --release --example end_to_end [OUT_DIR]

use std::path::PathBuf;

use icdaug::benchmark::{generate, BenchmarkConfig};
use icdaug::config::RunConfig;
use icdaug::pipeline;
use icdaug::simulate::{SimulatedTransport, SimulatedWriter};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scratch = tempfile::tempdir()?;
    let keep = std::env::args().nth(1).map(PathBuf::from);
    let out = keep.clone().unwrap_or_else(|| scratch.path().to_path_buf());
    std::fs::create_dir_all(&out)?;

    let bench_cfg = BenchmarkConfig::default();
    let bench = generate(&bench_cfg);
    let mut corpus = Vec::new();
    bench.corpus.write_jsonl(&mut corpus)?;
    pipeline::write_atomic(&out.join("corpus.jsonl"), &corpus)?;
    pipeline::write_atomic(&out.join("descriptions.csv"), bench.descriptions_csv().as_bytes())?;

    let cfg = RunConfig {
        corpus: out.join("corpus.jsonl").display().to_string(),
        descriptions: out.join("descriptions.csv").display().to_string(),
        out_dir: out.join("run").display().to_string(),
        mode: "live".into(),
        family_sample: bench_cfg.target_families,
        ..Default::default()
    };

    let writer = SimulatedWriter::new(bench.lexicon.clone(), bench_cfg.noise_words);
    // the simulated transport never leaves the process
    let manifests = pipeline::run_all(&cfg, true, Some(Box::new(SimulatedTransport(writer))))?;
    for m in &manifests {
        println!("{:<22} {} output(s)", m.stage, m.outputs.len());
    }
    let (_, report) = pipeline::compare(&cfg)?;
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
    println!("\nvariant  train  mi_f1  ma_f1_f_gen  oof_f_gen");
    for r in &report.rows {
        println!("{:<8} {:>5}  {:>5}  {:>11}  {:>9}", r.variant, r.train_documents, pct(r.mi_f1), pct(r.ma_f1_f_gen), pct(r.oof_f_gen));
    }
    if keep.is_some() {
        println!("\nartifacts in {}", cfg.out_dir);
    }
    Ok(())
}
