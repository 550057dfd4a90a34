//! Flat, hierarchical and family-confusion scores on a tiny hand-built
//! example, plus Fleiss' kappa on a small rating sheet.
//!
//!     cargo run --example metrics

use std::collections::BTreeSet;

use icdaug::dataset::Provenance;
use icdaug::icd::{FamilyId, Hierarchy, IcdCode};
use icdaug::metrics::*;

fn codes(list: &[&str]) -> Vec<IcdCode> {
    list.iter().map(|s| IcdCode::parse_any(s).expect("valid code")).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut gold = PredictionSet::new();
    let mut pred = PredictionSet::new();
    gold.insert("note-1", codes(&["E1021", "G430"]));
    pred.insert("note-1", codes(&["E1029", "S0290"]));
    gold.insert("note-2", codes(&["E101"]));
    pred.insert("note-2", codes(&["E101", "E102", "E103"]));

    for avg in [Averaging::Micro, Averaging::Macro] {
        let r = prf(&pred, &gold, avg, &CodesetFilter::Overall)?;
        println!("{avg:?}: P {:.3} R {:.3} F1 {:.3}", r.precision, r.recall, r.f1);
    }
    let families: BTreeSet<FamilyId> = [FamilyId::new("E10")].into();
    let r = prf(&pred, &gold, Averaging::Micro, &CodesetFilter::Families(families.clone()))?;
    println!("micro F1 restricted to E10: {:.3}", r.f1);

    let c = coding_report(&pred, &gold, &Hierarchy::family_only())?;
    for (name, s) in [("leaf", c.leaf), ("set-based", c.set_based), ("CoPHE", c.cophe)] {
        println!("{name:>9}: P {:.3} R {:.3} F1 {:.3}", s.precision, s.recall, s.f1);
    }

    let w = whcm(&pred, &gold, &CodesetFilter::Overall)?;
    println!("WHCM out-of-family {:?}, in-family {:?}", w.oof, w.in_family);
    for (code, cell) in &w.per_label {
        println!("  {code}: tp {} fn_in {} fn_out {}", cell.tp, cell.fn_in_family, cell.fn_out_of_family);
    }

    let mut sheet = RatingSheet::default();
    for (item, scores) in [[1, 1, 2], [4, 4, 4], [2, 3, 2], [5, 5, 4]].iter().enumerate() {
        for (rater, &score) in scores.iter().enumerate() {
            sheet.cells.push(RatingCell {
                evaluator: format!("rater-{rater}"),
                doc_id: format!("doc-{item}"),
                provenance: Provenance::Synthetic,
                metric: ReviewMetric::Acceptability,
                score,
                comment: String::new(),
            });
        }
    }
    let k = fleiss_kappa(&sheet, ReviewMetric::Acceptability, Provenance::Synthetic)?;
    let mean = mean_scores(&sheet, ReviewMetric::Acceptability, Provenance::Synthetic)?;
    println!("Acceptability on synthetic notes: kappa {k:.3}, mean {mean:.3}");
    Ok(())
}
