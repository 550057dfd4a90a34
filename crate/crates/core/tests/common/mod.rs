//! Independent reference implementations used as test oracles. They work
//! on plain strings and dense matrices and share no code with the library.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use icdaug::icd::IcdCode;
use icdaug::metrics::PredictionSet;
use rand::Rng;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixtures_dir() -> PathBuf {
    manifest_dir().join("fixtures")
}

pub fn code(s: &str) -> IcdCode {
    IcdCode::parse_any(s).unwrap()
}

/// Label pool spanning a few families so family-level effects show up.
pub const LABEL_POOL: [&str; 12] = [
    "E101", "E102", "E1021", "E103", "G430", "G431", "G4309", "S0290", "S021", "T82", "H3530", "H811",
];

/// Gold and predicted label sets per document, as strings.
#[derive(Debug, Clone)]
pub struct Instance {
    pub labels: Vec<String>,
    pub gold: Vec<BTreeSet<String>>,
    pub pred: Vec<BTreeSet<String>>,
}

impl Instance {
    pub fn random<R: Rng>(rng: &mut R, max_docs: usize, max_labels: usize) -> Self {
        let n_labels = rng.random_range(1..=max_labels.min(LABEL_POOL.len()));
        let mut pool: Vec<&str> = LABEL_POOL.to_vec();
        for i in 0..n_labels {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let labels: Vec<String> = pool[..n_labels].iter().map(|s| s.to_string()).collect();
        let n_docs = rng.random_range(1..=max_docs);
        let draw = |rng: &mut R| -> BTreeSet<String> {
            labels
                .iter()
                .filter(|_| rng.random_bool(0.4))
                .cloned()
                .collect()
        };
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n_docs {
            gold.push(draw(rng));
            pred.push(draw(rng));
        }
        Instance { labels, gold, pred }
    }

    pub fn sets(&self) -> (PredictionSet, PredictionSet) {
        let mut p = PredictionSet::new();
        let mut g = PredictionSet::new();
        for (i, (gs, ps)) in self.gold.iter().zip(&self.pred).enumerate() {
            let id = format!("d{i}");
            g.insert(id.clone(), gs.iter().map(|s| code(s)));
            p.insert(id, ps.iter().map(|s| code(s)));
        }
        (p, g)
    }
}

pub fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// (micro P, R, F1, macro P, R, F1) over labels accepted by `keep`. Macro
/// averages labels that occur at least once in gold or predictions.
pub fn brute_force_prf(inst: &Instance, keep: impl Fn(&str) -> bool) -> Option<[f64; 6]> {
    let labels: Vec<&String> = inst.labels.iter().filter(|l| keep(l)).collect();
    let mut tp = vec![0.0; labels.len()];
    let mut fp = vec![0.0; labels.len()];
    let mut fn_ = vec![0.0; labels.len()];
    for (g, p) in inst.gold.iter().zip(&inst.pred) {
        for (k, l) in labels.iter().enumerate() {
            match (g.contains(*l), p.contains(*l)) {
                (true, true) => tp[k] += 1.0,
                (false, true) => fp[k] += 1.0,
                (true, false) => fn_[k] += 1.0,
                (false, false) => {}
            }
        }
    }
    let observed: Vec<usize> = (0..labels.len()).filter(|&k| tp[k] + fp[k] + fn_[k] > 0.0).collect();
    if observed.is_empty() {
        return None;
    }
    let (t, f, n): (f64, f64, f64) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let mp = safe_div(t, t + f);
    let mr = safe_div(t, t + n);
    let mf = safe_div(2.0 * mp * mr, mp + mr);
    let (mut ap, mut ar, mut af) = (0.0, 0.0, 0.0);
    for &k in &observed {
        let p = safe_div(tp[k], tp[k] + fp[k]);
        let r = safe_div(tp[k], tp[k] + fn_[k]);
        ap += p;
        ar += r;
        af += safe_div(2.0 * p * r, p + r);
    }
    let m = observed.len() as f64;
    Some([mp, mr, mf, ap / m, ar / m, af / m])
}

/// Ancestor-extended node multiset of one document: the 3-character head
/// plus the code itself (when longer than the head).
pub fn extended_nodes(labels: &BTreeSet<String>, count_preserving: bool) -> BTreeMap<String, usize> {
    let mut nodes: BTreeMap<String, usize> = BTreeMap::new();
    for l in labels {
        let head = l[..3].to_string();
        *nodes.entry(head).or_default() += 1;
        if l.len() > 3 {
            *nodes.entry(l.clone()).or_default() += 1;
        }
    }
    if !count_preserving {
        for v in nodes.values_mut() {
            *v = 1;
        }
    }
    nodes
}

/// Pooled node-level P/R/F1.
pub fn brute_force_hier(inst: &Instance, count_preserving: bool) -> [f64; 3] {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (g, p) in inst.gold.iter().zip(&inst.pred) {
        let gn = extended_nodes(g, count_preserving);
        let pn = extended_nodes(p, count_preserving);
        let keys: BTreeSet<&String> = gn.keys().chain(pn.keys()).collect();
        for k in keys {
            let a = *pn.get(k).unwrap_or(&0) as f64;
            let b = *gn.get(k).unwrap_or(&0) as f64;
            tp += a.min(b);
            fp += (a - b).max(0.0);
            fn_ += (b - a).max(0.0);
        }
    }
    let p = safe_div(tp, tp + fp);
    let r = safe_div(tp, tp + fn_);
    [p, r, safe_div(2.0 * p * r, p + r)]
}

/// Fleiss' kappa straight from a ratings matrix (items x raters) with
/// categories `1..=k`.
pub fn textbook_kappa(ratings: &[Vec<u8>], k: u8) -> f64 {
    let n_items = ratings.len() as f64;
    let n = ratings[0].len() as f64;
    let mut p_j = vec![0.0; k as usize + 1];
    let mut p_bar = 0.0;
    for item in ratings {
        let mut counts = vec![0.0; k as usize + 1];
        for &r in item {
            counts[r as usize] += 1.0;
        }
        let agree: f64 = counts.iter().map(|c| c * (c - 1.0)).sum();
        p_bar += agree / (n * (n - 1.0));
        for j in 1..=k as usize {
            p_j[j] += counts[j];
        }
    }
    p_bar /= n_items;
    let total = n_items * n;
    let pe: f64 = p_j.iter().map(|c| (c / total).powi(2)).sum();
    (p_bar - pe) / (1.0 - pe)
}

pub fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
