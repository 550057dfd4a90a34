//! Label selection and the silver-standard plan on the fixture corpus,
//! then the generation prompt for the first zero-shot record.
//!
//!     cargo run --example silver_plan

use std::path::Path;

use icdaug::dataset::{population_index, stratify, SplitCorpus};
use icdaug::icd::DescriptionIndex;
use icdaug::prompt::{build_generation_prompt, GenerationTemplate};
use icdaug::selection::{select, SelectionConfig};
use icdaug::silver::{build_plan, PlanConfig, RecordKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let corpus = SplitCorpus::load(&root.join("corpus.jsonl"))?;
    let index = population_index(&corpus);
    let cfg = SelectionConfig {
        family_sample_size: 3,
        ..Default::default()
    };
    let strata = stratify(&index, cfg.thresholds);
    println!(
        "strata: {} zero-shot, {} few-shot, {} frequent, {} other",
        strata.zero_shot.len(),
        strata.few_shot.len(),
        strata.frequent.len(),
        strata.other.len()
    );

    let sel = select(&index, &cfg, false)?;
    let chosen: Vec<&str> = sel.chosen_families.iter().map(|f| f.as_str()).collect();
    println!("{} candidates, {} eligible families, chose {chosen:?}", sel.candidates.len(), sel.eligible_families.len());
    let gcs = &sel.generation_codes;
    let names = |set: &std::collections::BTreeSet<icdaug::icd::IcdCode>| set.iter().map(|c| c.normalized().to_string()).collect::<Vec<_>>();
    println!("few-shot codes {:?}", names(&gcs.few_shot_codes));
    println!("zero-shot codes {:?}", names(&gcs.zero_shot_codes));

    let plan = build_plan(gcs, &corpus, &PlanConfig::default());
    println!("{} records, {} unique label sets, {} duplicates", plan.records.len(), plan.unique_count(), plan.duplicate_count());

    let record = plan
        .records
        .iter()
        .find(|r| r.kind == RecordKind::ZeroShot)
        .expect("fixture corpus has zero-shot records");
    println!("\n{}", serde_json::to_string_pretty(record)?);
    let descriptions = DescriptionIndex::from_path(&root.join("descriptions.csv"))?;
    let prompt = build_generation_prompt(record, &descriptions, &GenerationTemplate::builtin())?;
    for m in &prompt.spec.messages {
        println!("\n[{:?}]\n{}", m.role, m.content);
    }
    Ok(())
}
