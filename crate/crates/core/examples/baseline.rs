//! Trains the one-vs-rest linear coder on the fixture corpus, tunes the
//! threshold on dev and scores the test split.
//!
//!     cargo run --release --example baseline

use std::path::Path;

use icdaug::baseline::{evaluate_row, predict, sweep_threshold, train, EvalFilters, TrainConfig};
use icdaug::dataset::{population_index, SplitCorpus};
use icdaug::metrics::{coding_report, PredictionSet};
use icdaug::icd::Hierarchy;
use icdaug::selection::{select, SelectionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let corpus = SplitCorpus::load(&root.join("corpus.jsonl"))?;
    let mut model = train(&corpus, &TrainConfig::default())?;
    for h in &model.history {
        println!("epoch {:>2}: loss {:.4}, dev MAP {:.4}", h.epoch, h.train_loss, h.dev_map);
    }
    println!("kept epoch {}, {} labels, {} features", model.selected_epoch, model.labels.len(), model.features.len());
    let t = sweep_threshold(&mut model, &corpus.dev)?;
    println!("dev-tuned threshold {t:.2}");

    let sel = select(
        &population_index(&corpus),
        &SelectionConfig {
            family_sample_size: 3,
            ..Default::default()
        },
        false,
    )?;
    let filters = EvalFilters {
        families: sel.chosen_families.iter().cloned().collect(),
        generation: sel.generation_codes.all(),
    };
    let row = evaluate_row(&model, &corpus.test, &filters, "base", corpus.train.len())?;
    println!("{}", serde_json::to_string_pretty(&row)?);

    let c = coding_report(&predict(&model, &corpus.test), &PredictionSet::from_documents(&corpus.test), &Hierarchy::family_only())?;
    println!("set-based F1 {:.3}, CoPHE F1 {:.3}", c.set_based.f1, c.cophe.f1);
    Ok(())
}
