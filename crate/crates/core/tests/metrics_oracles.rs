mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use icdaug::dataset::Provenance;
use icdaug::icd::{FamilyId, Hierarchy};
use icdaug::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_prf(inst: &Instance, filter: &CodesetFilter, keep: impl Fn(&str) -> bool) {
    let (p, g) = inst.sets();
    let expect = brute_force_prf(inst, keep);
    let micro = prf(&p, &g, Averaging::Micro, filter);
    let macro_ = prf(&p, &g, Averaging::Macro, filter);
    match expect {
        None => {
            assert!(matches!(micro, Err(MetricsError::EmptyEvaluationSet)));
            assert!(matches!(macro_, Err(MetricsError::EmptyEvaluationSet)));
        }
        Some(e) => {
            let (mi, ma) = (micro.unwrap(), macro_.unwrap());
            let got = [mi.precision, mi.recall, mi.f1, ma.precision, ma.recall, ma.f1];
            for (a, b) in got.iter().zip(e) {
                assert!(approx(*a, b, 1e-9), "{got:?} vs {e:?} on {inst:?}");
            }
        }
    }
}

#[test]
fn flat_scores_match_brute_force_under_every_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let inst = Instance::random(&mut rng, 10, 8);
        check_prf(&inst, &CodesetFilter::Overall, |_| true);
        let fams: BTreeSet<FamilyId> = [FamilyId::new("E10"), FamilyId::new("S02")].into();
        check_prf(&inst, &CodesetFilter::Families(fams), |l| l.starts_with("E10") || l.starts_with("S02"));
        let gen: BTreeSet<_> = ["E1021", "G431", "H811"].iter().map(|s| code(s)).collect();
        check_prf(&inst, &CodesetFilter::Generation(gen), |l| ["E1021", "G431", "H811"].contains(&l));
    }
}

#[test]
fn hierarchical_scores_match_node_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = Hierarchy::family_only();
    for _ in 0..300 {
        let inst = Instance::random(&mut rng, 8, 10);
        let (p, g) = inst.sets();
        for (flavor, cp) in [(HierFlavor::SetBased, false), (HierFlavor::Cophe, true)] {
            let got = hierarchical_prf(&p, &g, &h, flavor).unwrap();
            let e = brute_force_hier(&inst, cp);
            assert!(approx(got.precision, e[0], 1e-9) && approx(got.recall, e[1], 1e-9) && approx(got.f1, e[2], 1e-9));
        }
    }
}

#[test]
fn hierarchical_worked_example() {
    let mut g = PredictionSet::new();
    let mut p = PredictionSet::new();
    g.insert("d", [code("E101")]);
    p.insert("d", [code("E101"), code("E102"), code("E103")]);
    let r = coding_report(&p, &g, &Hierarchy::family_only()).unwrap();
    assert!(approx(r.set_based.precision, 0.5, 1e-9));
    assert!(approx(r.set_based.recall, 1.0, 1e-9));
    assert!(approx(r.set_based.f1, 2.0 / 3.0, 1e-9));
    assert!(approx(r.cophe.precision, 1.0 / 3.0, 1e-9));
    assert!(approx(r.cophe.recall, 1.0, 1e-9));
    assert!(approx(r.cophe.f1, 0.5, 1e-9));
    assert!(approx(r.leaf.precision, 1.0 / 3.0, 1e-9));
}

#[test]
fn whcm_partitions_gold_occurrences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let inst = Instance::random(&mut rng, 10, 12);
        let (p, g) = inst.sets();
        let r = whcm(&p, &g, &CodesetFilter::Overall).unwrap();
        let mut occurrences: BTreeMap<String, usize> = BTreeMap::new();
        let mut hits: BTreeMap<String, usize> = BTreeMap::new();
        for (gs, ps) in inst.gold.iter().zip(&inst.pred) {
            for l in gs {
                *occurrences.entry(l.clone()).or_default() += 1;
                if ps.contains(l) {
                    *hits.entry(l.clone()).or_default() += 1;
                }
            }
        }
        assert_eq!(r.per_label.len(), occurrences.len());
        for (l, w) in &r.per_label {
            assert_eq!(w.tp + w.fn_in_family + w.fn_out_of_family, occurrences[l.normalized()]);
            assert_eq!(w.tp, hits.get(l.normalized()).copied().unwrap_or(0));
        }
        if let (Some(o), Some(i)) = (r.oof, r.in_family) {
            assert!((0.0..=1.0).contains(&(o + i)));
        }
    }
}

#[test]
fn whcm_worked_example() {
    let mut g = PredictionSet::new();
    let mut p = PredictionSet::new();
    g.insert("d", [code("E1021"), code("G430")]);
    p.insert("d", [code("E1029"), code("S0290")]);
    let r = whcm(&p, &g, &CodesetFilter::Overall).unwrap();
    assert!(approx(r.oof.unwrap(), 0.5, 1e-9));
    assert!(approx(r.in_family.unwrap(), 0.5, 1e-9));
}

#[test]
fn map_ranks_ties_by_code() {
    let gold: BTreeSet<_> = [code("B20")].into();
    let scores: BTreeMap<_, _> = [(code("A10"), 0.5), (code("B20"), 0.5), (code("C30"), 0.1)].into();
    assert!(approx(average_precision(&scores, &gold), 0.5, 1e-12));
}

fn sheet_from(ratings: &[Vec<u8>]) -> RatingSheet {
    let mut cells = Vec::new();
    for (i, item) in ratings.iter().enumerate() {
        for (r, &score) in item.iter().enumerate() {
            cells.push(RatingCell {
                evaluator: format!("e{r}"),
                doc_id: format!("d{i}"),
                provenance: Provenance::Real,
                metric: ReviewMetric::Acceptability,
                score,
                comment: String::new(),
            });
        }
    }
    RatingSheet { cells }
}

#[test]
fn kappa_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let items = rng.random_range(2..15);
        let raters = rng.random_range(2..6);
        let ratings: Vec<Vec<u8>> = (0..items)
            .map(|_| (0..raters).map(|_| rng.random_range(1..=3)).collect())
            .collect();
        let sheet = sheet_from(&ratings);
        let got = fleiss_kappa(&sheet, ReviewMetric::Acceptability, Provenance::Real);
        let expect = textbook_kappa(&ratings, 5);
        match got {
            Ok(k) => assert!(approx(k, expect, 1e-9), "{k} vs {expect}"),
            Err(MetricsError::DegenerateAgreement) => assert!(!expect.is_finite()),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn kappa_hand_example_two_raters() {
    // items rated (1,1), (2,2), (1,2), (3,3), (2,2): P-bar = 4/5,
    // p = (3/10, 5/10, 2/10), Pe = 0.38, kappa = 0.42/0.62 = 21/31.
    let sheet = sheet_from(&[vec![1, 1], vec![2, 2], vec![1, 2], vec![3, 3], vec![2, 2]]);
    let k = fleiss_kappa(&sheet, ReviewMetric::Acceptability, Provenance::Real).unwrap();
    assert!(approx(k, 21.0 / 31.0, 1e-9), "{k}");
}

#[test]
fn kappa_degenerate_and_perfect() {
    let all_same = sheet_from(&[vec![5, 5, 5], vec![5, 5, 5]]);
    assert!(matches!(
        fleiss_kappa(&all_same, ReviewMetric::Acceptability, Provenance::Real),
        Err(MetricsError::DegenerateAgreement)
    ));
    let perfect = sheet_from(&[vec![1, 1, 1], vec![4, 4, 4], vec![2, 2, 2]]);
    let k = fleiss_kappa(&perfect, ReviewMetric::Acceptability, Provenance::Real).unwrap();
    assert!(approx(k, 1.0, 1e-9));
}

#[test]
fn rating_sheet_csv_round_trip() {
    let mut sheet = sheet_from(&[vec![1, 2], vec![3, 4]]);
    sheet.cells[0].comment = "too short, \"vague\"".into();
    let mut buf = Vec::new();
    sheet.write_csv(&mut buf).unwrap();
    assert_eq!(RatingSheet::read_csv(buf.as_slice()).unwrap(), sheet);
}

proptest! {
    #[test]
    fn scores_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng, 6, 6);
        let (p, g) = inst.sets();
        for avg in [Averaging::Micro, Averaging::Macro] {
            if let Ok(r) = prf(&p, &g, avg, &CodesetFilter::Overall) {
                for v in [r.precision, r.recall, r.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn perfect_prediction_scores_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inst = Instance::random(&mut rng, 6, 6);
        inst.pred = inst.gold.clone();
        let (p, g) = inst.sets();
        if let Ok(r) = prf(&p, &g, Averaging::Micro, &CodesetFilter::Overall) {
            prop_assert!(approx(r.f1, 1.0, 1e-12));
        }
        if inst.gold.iter().any(|s| !s.is_empty()) {
            let c = coding_report(&p, &g, &Hierarchy::family_only()).unwrap();
            prop_assert!(approx(c.cophe.f1, 1.0, 1e-12) && approx(c.set_based.f1, 1.0, 1e-12));
        }
    }
}
