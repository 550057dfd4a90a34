//! Evaluation: leaf micro/macro P/R/F1 under codeset filters, MAP,
//! set-based and count-preserving hierarchical scores, weak hierarchical
//! confusion (in-family vs out-of-family errors), Fleiss' kappa and mean
//! rating scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Document, Provenance};
use crate::icd::{family_of, FamilyId, Hierarchy, IcdCode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("nothing to evaluate: no gold or predicted labels within the codeset")]
    EmptyEvaluationSet,
    #[error("document {0} has predictions but no scores")]
    MissingScores(String),
    #[error("document {0} is predicted but absent from the gold standard")]
    UnknownDocument(String),
    #[error("agreement is undefined: every rating falls in one category")]
    DegenerateAgreement,
    #[error("incomplete ratings: {0}")]
    IncompleteRatings(String),
    #[error("no ratings selected")]
    EmptySelection,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocPrediction {
    pub codes: BTreeSet<IcdCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<IcdCode, f64>>,
}

/// Per-document code sets (predicted or gold).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub docs: BTreeMap<String, DocPrediction>,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    doc_id: String,
    codes: Vec<IcdCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<BTreeMap<IcdCode, f64>>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, codes: impl IntoIterator<Item = IcdCode>) {
        self.docs.insert(
            doc_id.into(),
            DocPrediction {
                codes: codes.into_iter().collect(),
                scores: None,
            },
        );
    }

    /// Gold standard from documents' label sets.
    pub fn from_documents(docs: &[Document]) -> Self {
        let mut set = Self::new();
        for d in docs {
            set.insert(d.id.clone(), d.labels.iter().cloned());
        }
        set
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn codes(&self, doc_id: &str) -> Option<&BTreeSet<IcdCode>> {
        self.docs.get(doc_id).map(|d| &d.codes)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, d) in &self.docs {
            let line = PredictionLine {
                doc_id: id.clone(),
                codes: d.codes.iter().cloned().collect(),
                scores: d.scores.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, MetricsError> {
        let mut set = Self::new();
        for (i, line) in input.lines().enumerate() {
            let err = |message: String| MetricsError::Parse { line: i + 1, message };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PredictionLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            set.docs.insert(
                p.doc_id,
                DocPrediction {
                    codes: p.codes.into_iter().collect(),
                    scores: p.scores,
                },
            );
        }
        Ok(set)
    }
}

/// Restricts evaluation to part of the label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodesetFilter {
    Overall,
    /// Every code whose head is one of these families.
    Families(BTreeSet<FamilyId>),
    /// An explicit list, e.g. the generation codes.
    Generation(BTreeSet<IcdCode>),
}

impl CodesetFilter {
    pub fn contains(&self, code: &IcdCode) -> bool {
        match self {
            CodesetFilter::Overall => true,
            CodesetFilter::Families(f) => f.contains(&family_of(code)),
            CodesetFilter::Generation(c) => c.contains(code),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CodesetFilter::Overall => "overall",
            CodesetFilter::Families(_) => "f",
            CodesetFilter::Generation(_) => "f_gen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp as f64, self.fp as f64, self.fn_ as f64)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

impl Prf {
    pub fn from_counts(tp: f64, fp: f64, fn_: f64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Which labels a macro average runs over.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum MacroUniverse {
    /// Labels in the filter that occur in gold or predictions.
    #[default]
    Observed,
    /// A fixed list (intersected with the filter), for cross-run comparison.
    Fixed(BTreeSet<IcdCode>),
}

fn check_universe(pred: &PredictionSet, gold: &PredictionSet) -> Result<(), MetricsError> {
    match pred.docs.keys().find(|id| !gold.docs.contains_key(*id)) {
        Some(id) => Err(MetricsError::UnknownDocument(id.clone())),
        None => Ok(()),
    }
}

static EMPTY: BTreeSet<IcdCode> = BTreeSet::new();

/// Per-label TP/FP/FN over the filtered label space. Gold documents with
/// no prediction count as predicting nothing.
pub fn label_counts(
    pred: &PredictionSet,
    gold: &PredictionSet,
    filter: &CodesetFilter,
) -> Result<BTreeMap<IcdCode, Counts>, MetricsError> {
    check_universe(pred, gold)?;
    let mut counts: BTreeMap<IcdCode, Counts> = BTreeMap::new();
    for (id, g) in &gold.docs {
        let p = pred.codes(id).unwrap_or(&EMPTY);
        for code in g.codes.iter().filter(|c| filter.contains(c)) {
            let c = counts.entry(code.clone()).or_default();
            if p.contains(code) {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
        for code in p.iter().filter(|c| filter.contains(c) && !g.codes.contains(*c)) {
            counts.entry(code.clone()).or_default().fp += 1;
        }
    }
    Ok(counts)
}

pub fn prf(
    pred: &PredictionSet,
    gold: &PredictionSet,
    averaging: Averaging,
    filter: &CodesetFilter,
) -> Result<Prf, MetricsError> {
    prf_with_universe(pred, gold, averaging, filter, &MacroUniverse::Observed)
}

pub fn prf_with_universe(
    pred: &PredictionSet,
    gold: &PredictionSet,
    averaging: Averaging,
    filter: &CodesetFilter,
    universe: &MacroUniverse,
) -> Result<Prf, MetricsError> {
    let counts = label_counts(pred, gold, filter)?;
    match averaging {
        Averaging::Micro => {
            if counts.is_empty() {
                return Err(MetricsError::EmptyEvaluationSet);
            }
            let mut total = Counts::default();
            for c in counts.values() {
                total.add(*c);
            }
            Ok(total.prf())
        }
        Averaging::Macro => {
            let labels: Vec<Counts> = match universe {
                MacroUniverse::Observed => counts.values().copied().collect(),
                MacroUniverse::Fixed(list) => list
                    .iter()
                    .filter(|c| filter.contains(c))
                    .map(|c| counts.get(c).copied().unwrap_or_default())
                    .collect(),
            };
            if labels.is_empty() {
                return Err(MetricsError::EmptyEvaluationSet);
            }
            let n = labels.len() as f64;
            let per: Vec<Prf> = labels.iter().map(Counts::prf).collect();
            Ok(Prf {
                precision: per.iter().map(|p| p.precision).sum::<f64>() / n,
                recall: per.iter().map(|p| p.recall).sum::<f64>() / n,
                f1: per.iter().map(|p| p.f1).sum::<f64>() / n,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub documents: usize,
    /// Gold documents without labels, left out of the mean.
    pub skipped_empty_gold: usize,
}

/// Average precision of one ranked list against a gold set. Codes are
/// ranked by descending score; ties go to the lexicographically smaller
/// code.
pub fn average_precision(scores: &BTreeMap<IcdCode, f64>, gold: &BTreeSet<IcdCode>) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<(&IcdCode, f64)> = scores.iter().map(|(c, s)| (c, *s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, (code, _)) in ranked.iter().enumerate() {
        if gold.contains(*code) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / gold.len() as f64
}

pub fn mean_average_precision(pred: &PredictionSet, gold: &PredictionSet) -> Result<MapReport, MetricsError> {
    check_universe(pred, gold)?;
    let empty = BTreeMap::new();
    let mut total = 0.0;
    let mut n = 0;
    let mut skipped = 0;
    for (id, g) in &gold.docs {
        if g.codes.is_empty() {
            skipped += 1;
            continue;
        }
        let scores = match pred.docs.get(id) {
            Some(p) => p
                .scores
                .as_ref()
                .ok_or_else(|| MetricsError::MissingScores(id.clone()))?,
            None => &empty,
        };
        total += average_precision(scores, &g.codes);
        n += 1;
    }
    Ok(MapReport {
        map: if n > 0 { total / n as f64 } else { 0.0 },
        documents: n,
        skipped_empty_gold: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierFlavor {
    /// Ancestor nodes record presence only.
    SetBased,
    /// Ancestor nodes carry the number of descendant labels.
    Cophe,
}

/// A label multiset extended with its ancestor nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedRepresentation {
    pub flavor: HierFlavor,
    pub counts: BTreeMap<String, u32>,
}

pub fn extend(labels: &[IcdCode], hierarchy: &Hierarchy, flavor: HierFlavor) -> ExtendedRepresentation {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for code in labels {
        for node in hierarchy.chain(code) {
            *counts.entry(node).or_insert(0) += 1;
        }
    }
    if flavor == HierFlavor::SetBased {
        counts.values_mut().for_each(|v| *v = 1);
    }
    ExtendedRepresentation { flavor, counts }
}

/// Node-level TP/FP/FN between two extended representations.
pub fn node_counts(pred: &ExtendedRepresentation, gold: &ExtendedRepresentation) -> Counts {
    let nodes: BTreeSet<&String> = pred.counts.keys().chain(gold.counts.keys()).collect();
    let mut c = Counts::default();
    for node in nodes {
        let p = pred.counts.get(node).copied().unwrap_or(0) as usize;
        let g = gold.counts.get(node).copied().unwrap_or(0) as usize;
        c.tp += p.min(g);
        c.fp += p.saturating_sub(g);
        c.fn_ += g.saturating_sub(p);
    }
    c
}

/// Micro P/R/F1 over extended node counts, pooled across documents.
pub fn hierarchical_prf(
    pred: &PredictionSet,
    gold: &PredictionSet,
    hierarchy: &Hierarchy,
    flavor: HierFlavor,
) -> Result<Prf, MetricsError> {
    check_universe(pred, gold)?;
    let mut total = Counts::default();
    for (id, g) in &gold.docs {
        let p: Vec<IcdCode> = pred.codes(id).unwrap_or(&EMPTY).iter().cloned().collect();
        let g: Vec<IcdCode> = g.codes.iter().cloned().collect();
        total.add(node_counts(
            &extend(&p, hierarchy, flavor),
            &extend(&g, hierarchy, flavor),
        ));
    }
    Ok(total.prf())
}

/// Leaf, set-based and count-preserving scores side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingReport {
    pub leaf: Prf,
    pub set_based: Prf,
    pub cophe: Prf,
}

pub fn coding_report(
    pred: &PredictionSet,
    gold: &PredictionSet,
    hierarchy: &Hierarchy,
) -> Result<CodingReport, MetricsError> {
    Ok(CodingReport {
        leaf: prf(pred, gold, Averaging::Micro, &CodesetFilter::Overall)?,
        set_based: hierarchical_prf(pred, gold, hierarchy, HierFlavor::SetBased)?,
        cophe: hierarchical_prf(pred, gold, hierarchy, HierFlavor::Cophe)?,
    })
}

impl CodingReport {
    pub fn write_csv<W: Write>(&self, name: &str, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "evaluation_set", "leaf_p", "leaf_r", "leaf_f1", "set_p", "set_r", "set_f1", "cophe_p", "cophe_r", "cophe_f1",
        ])?;
        let mut row = vec![name.to_string()];
        for p in [self.leaf, self.set_based, self.cophe] {
            row.extend([p.precision, p.recall, p.f1].map(|v| format!("{:.2}", v * 100.0)));
        }
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhcmLabel {
    pub tp: usize,
    pub fn_in_family: usize,
    pub fn_out_of_family: usize,
}

impl WhcmLabel {
    pub fn gold(&self) -> usize {
        self.tp + self.fn_in_family + self.fn_out_of_family
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhcmDenominator {
    /// TP + FN, i.e. gold occurrences of the label.
    #[default]
    GoldOccurrences,
    /// FN only (share of the label's errors).
    ErrorsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhcmReport {
    pub filter: String,
    pub denominator: WhcmDenominator,
    pub per_label: BTreeMap<IcdCode, WhcmLabel>,
    /// Macro-averaged out-of-family proportion; `None` when no filtered
    /// label occurs in gold.
    pub oof: Option<f64>,
    pub in_family: Option<f64>,
}

pub fn whcm(pred: &PredictionSet, gold: &PredictionSet, filter: &CodesetFilter) -> Result<WhcmReport, MetricsError> {
    whcm_with(pred, gold, filter, WhcmDenominator::GoldOccurrences)
}

/// False negatives of filtered gold labels are matched, family by family
/// and in code order, against false positives from the same family (any
/// predicted code). Matched ones are in-family errors, the rest
/// out-of-family.
pub fn whcm_with(
    pred: &PredictionSet,
    gold: &PredictionSet,
    filter: &CodesetFilter,
    denominator: WhcmDenominator,
) -> Result<WhcmReport, MetricsError> {
    check_universe(pred, gold)?;
    let mut per_label: BTreeMap<IcdCode, WhcmLabel> = BTreeMap::new();
    for (id, g) in &gold.docs {
        let p = pred.codes(id).unwrap_or(&EMPTY);
        let mut fps: BTreeMap<FamilyId, usize> = BTreeMap::new();
        for code in p.iter().filter(|c| !g.codes.contains(*c)) {
            *fps.entry(family_of(code)).or_insert(0) += 1;
        }
        for code in g.codes.iter().filter(|c| filter.contains(c)) {
            let entry = per_label.entry(code.clone()).or_default();
            if p.contains(code) {
                entry.tp += 1;
                continue;
            }
            match fps.get_mut(&family_of(code)) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    entry.fn_in_family += 1;
                }
                _ => entry.fn_out_of_family += 1,
            }
        }
    }
    let (mut oof, mut inf) = (0.0, 0.0);
    for l in per_label.values() {
        let den = match denominator {
            WhcmDenominator::GoldOccurrences => l.gold(),
            WhcmDenominator::ErrorsOnly => l.fn_in_family + l.fn_out_of_family,
        } as f64;
        oof += ratio(l.fn_out_of_family as f64, den);
        inf += ratio(l.fn_in_family as f64, den);
    }
    let n = per_label.len() as f64;
    Ok(WhcmReport {
        filter: filter.name().to_string(),
        denominator,
        oof: (n > 0.0).then(|| oof / n),
        in_family: (n > 0.0).then(|| inf / n),
        per_label,
    })
}

/// The seven review dimensions, in presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReviewMetric {
    #[serde(rename = "Correctness-NonLR")]
    CorrectnessNonLr,
    #[serde(rename = "Correctness-LR")]
    CorrectnessLr,
    #[serde(rename = "Informativeness-NonLR")]
    InformativenessNonLr,
    #[serde(rename = "Informativeness-LR")]
    InformativenessLr,
    #[serde(rename = "Authenticity-Patient")]
    AuthenticityPatient,
    #[serde(rename = "Authenticity-Scenario")]
    AuthenticityScenario,
    #[serde(rename = "Acceptability")]
    Acceptability,
}

impl ReviewMetric {
    pub const ALL: [ReviewMetric; 7] = [
        ReviewMetric::CorrectnessNonLr,
        ReviewMetric::CorrectnessLr,
        ReviewMetric::InformativenessNonLr,
        ReviewMetric::InformativenessLr,
        ReviewMetric::AuthenticityPatient,
        ReviewMetric::AuthenticityScenario,
        ReviewMetric::Acceptability,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReviewMetric::CorrectnessNonLr => "Correctness-NonLR",
            ReviewMetric::CorrectnessLr => "Correctness-LR",
            ReviewMetric::InformativenessNonLr => "Informativeness-NonLR",
            ReviewMetric::InformativenessLr => "Informativeness-LR",
            ReviewMetric::AuthenticityPatient => "Authenticity-Patient",
            ReviewMetric::AuthenticityScenario => "Authenticity-Scenario",
            ReviewMetric::Acceptability => "Acceptability",
        }
    }
}

impl fmt::Display for ReviewMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReviewMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReviewMetric::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown review metric {s:?}"))
    }
}

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingCell {
    pub evaluator: String,
    pub doc_id: String,
    pub provenance: Provenance,
    pub metric: ReviewMetric,
    pub score: u8,
    #[serde(default)]
    pub comment: String,
}

/// Evaluator × document × metric scores.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSheet {
    pub cells: Vec<RatingCell>,
}

impl RatingSheet {
    /// CSV with columns `evaluator,doc_id,provenance,metric,score,comment`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for cell in &self.cells {
            w.serialize(cell)?;
        }
        if self.cells.is_empty() {
            w.write_record(["evaluator", "doc_id", "provenance", "metric", "score", "comment"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        let mut cells = Vec::new();
        for (i, row) in r.deserialize::<RatingCell>().enumerate() {
            let cell = row.map_err(|e| MetricsError::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            if !(MIN_SCORE..=MAX_SCORE).contains(&cell.score) {
                return Err(MetricsError::Parse {
                    line: i + 2,
                    message: format!("score {} outside 1..=5", cell.score),
                });
            }
            cells.push(cell);
        }
        Ok(RatingSheet { cells })
    }

    fn select(&self, metric: ReviewMetric, provenance: Provenance) -> impl Iterator<Item = &RatingCell> {
        self.cells
            .iter()
            .filter(move |c| c.metric == metric && c.provenance == provenance)
    }
}

/// Fleiss' kappa from a per-item category-count matrix. Every row must sum
/// to the same number of raters (at least 2).
pub fn fleiss_kappa_counts(rows: &[Vec<usize>]) -> Result<f64, MetricsError> {
    let items = rows.len();
    if items == 0 {
        return Err(MetricsError::EmptySelection);
    }
    let raters: usize = rows[0].iter().sum();
    if raters < 2 {
        return Err(MetricsError::IncompleteRatings("fewer than two raters".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.iter().sum::<usize>() != raters) {
        return Err(MetricsError::IncompleteRatings(format!(
            "item {i} does not have {raters} ratings"
        )));
    }
    let categories = rows.iter().map(Vec::len).max().unwrap_or(0);
    let n = raters as f64;
    let mut p_bar = 0.0;
    let mut totals = vec![0usize; categories];
    for row in rows {
        let agree: usize = row.iter().map(|&c| c * c.saturating_sub(1)).sum();
        p_bar += agree as f64 / (n * (n - 1.0));
        for (j, &c) in row.iter().enumerate() {
            totals[j] += c;
        }
    }
    p_bar /= items as f64;
    let all = (items * raters) as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / all).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(MetricsError::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa over categories 1..=5 for one metric and provenance.
/// Every selected document must be rated once by every evaluator.
pub fn fleiss_kappa(sheet: &RatingSheet, metric: ReviewMetric, provenance: Provenance) -> Result<f64, MetricsError> {
    let cells: Vec<&RatingCell> = sheet.select(metric, provenance).collect();
    if cells.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let evaluators: BTreeSet<&str> = cells.iter().map(|c| c.evaluator.as_str()).collect();
    let mut by_doc: BTreeMap<&str, BTreeMap<&str, u8>> = BTreeMap::new();
    for c in &cells {
        if by_doc
            .entry(c.doc_id.as_str())
            .or_default()
            .insert(c.evaluator.as_str(), c.score)
            .is_some()
        {
            return Err(MetricsError::IncompleteRatings(format!(
                "{} rated {} twice for {metric}",
                c.evaluator, c.doc_id
            )));
        }
    }
    let mut rows = Vec::with_capacity(by_doc.len());
    for (doc, ratings) in &by_doc {
        if ratings.len() != evaluators.len() {
            return Err(MetricsError::IncompleteRatings(format!(
                "{doc} has {} of {} ratings for {metric}",
                ratings.len(),
                evaluators.len()
            )));
        }
        let mut row = vec![0usize; MAX_SCORE as usize];
        for &score in ratings.values() {
            row[(score - MIN_SCORE) as usize] += 1;
        }
        rows.push(row);
    }
    fleiss_kappa_counts(&rows)
}

/// Mean over evaluator × document cells.
pub fn mean_scores(sheet: &RatingSheet, metric: ReviewMetric, provenance: Provenance) -> Result<f64, MetricsError> {
    let (sum, n) = sheet
        .select(metric, provenance)
        .fold((0u64, 0u64), |(s, n), c| (s + c.score as u64, n + 1));
    if n == 0 {
        return Err(MetricsError::EmptySelection);
    }
    Ok(sum as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> IcdCode {
        IcdCode::parse_any(s).unwrap()
    }

    fn set(docs: &[(&str, &[&str])]) -> PredictionSet {
        let mut p = PredictionSet::new();
        for (id, codes) in docs {
            p.insert(*id, codes.iter().map(|c| code(c)));
        }
        p
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn identity_scores_one() {
        let g = set(&[("a", &["E1021", "G430"]), ("b", &["I10"])]);
        for avg in [Averaging::Micro, Averaging::Macro] {
            let r = prf(&g, &g, avg, &CodesetFilter::Overall).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn filters_restrict_both_sides() {
        let g = set(&[("a", &["E1021", "G430"])]);
        let p = set(&[("a", &["E1021", "G431", "I10"])]);
        let f = CodesetFilter::Families([FamilyId::new("E10")].into());
        let r = prf(&p, &g, Averaging::Micro, &f).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        let gen = CodesetFilter::Generation([code("Z999")].into());
        assert_eq!(prf(&p, &g, Averaging::Micro, &gen), Err(MetricsError::EmptyEvaluationSet));
        assert_eq!(
            prf(&set(&[("zz", &["I10"])]), &g, Averaging::Micro, &CodesetFilter::Overall),
            Err(MetricsError::UnknownDocument("zz".into()))
        );
    }

    #[test]
    fn macro_with_fixed_universe() {
        let g = set(&[("a", &["A01"])]);
        let fixed = MacroUniverse::Fixed([code("A01"), code("B01")].into());
        let r = prf_with_universe(&g, &g, Averaging::Macro, &CodesetFilter::Overall, &fixed).unwrap();
        assert!(close(r.f1, 0.5));
    }

    #[test]
    fn map_examples() {
        let mut p = PredictionSet::new();
        p.docs.insert(
            "d".into(),
            DocPrediction {
                codes: BTreeSet::new(),
                scores: Some([(code("A01"), 0.9), (code("B01"), 0.5)].into()),
            },
        );
        let g = set(&[("d", &["B01"])]);
        assert!(close(mean_average_precision(&p, &g).unwrap().map, 0.5));
        let g2 = set(&[("d", &["A01", "B01"])]);
        assert!(close(mean_average_precision(&p, &g2).unwrap().map, 1.0));
        let g3 = set(&[("d", &["A01"]), ("e", &[])]);
        let r = mean_average_precision(&p, &g3).unwrap();
        assert_eq!(r.skipped_empty_gold, 1);
        assert_eq!(r.documents, 1);
        let no_scores = set(&[("d", &["A01"])]);
        assert_eq!(
            mean_average_precision(&no_scores, &g),
            Err(MetricsError::MissingScores("d".into()))
        );
    }

    #[test]
    fn tie_break_by_code() {
        let scores: BTreeMap<IcdCode, f64> = [(code("B01"), 0.5), (code("A01"), 0.5)].into();
        assert!(close(average_precision(&scores, &[code("A01")].into()), 1.0));
        assert!(close(average_precision(&scores, &[code("B01")].into()), 0.5));
    }

    #[test]
    fn extension_examples() {
        let h = Hierarchy::family_only();
        let g = extend(&[code("E101")], &h, HierFlavor::Cophe);
        assert_eq!(g.counts, [("E10".to_string(), 1), ("E101".to_string(), 1)].into());
        let p: Vec<IcdCode> = ["E101", "E102", "E103"].iter().map(|c| code(c)).collect();
        assert_eq!(extend(&p, &h, HierFlavor::Cophe).counts["E10"], 3);
        assert_eq!(extend(&p, &h, HierFlavor::SetBased).counts["E10"], 1);
    }

    #[test]
    fn hierarchical_worked_example() {
        let h = Hierarchy::family_only();
        let g = set(&[("d", &["E101"])]);
        let p = set(&[("d", &["E101", "E102", "E103"])]);
        let s = hierarchical_prf(&p, &g, &h, HierFlavor::SetBased).unwrap();
        assert!(close(s.precision, 0.5) && close(s.recall, 1.0) && close(s.f1, 2.0 / 3.0));
        let c = hierarchical_prf(&p, &g, &h, HierFlavor::Cophe).unwrap();
        assert!(close(c.precision, 1.0 / 3.0) && close(c.recall, 1.0) && close(c.f1, 0.5));
    }

    #[test]
    fn whcm_worked_example() {
        let g = set(&[("d", &["E1021", "G430"])]);
        let p = set(&[("d", &["E1029", "S0290"])]);
        let f = CodesetFilter::Generation([code("E1021"), code("G430")].into());
        let r = whcm(&p, &g, &f).unwrap();
        assert_eq!(r.per_label[&code("E1021")].fn_in_family, 1);
        assert_eq!(r.per_label[&code("G430")].fn_out_of_family, 1);
        assert!(close(r.oof.unwrap(), 0.5));
        assert!(close(r.in_family.unwrap(), 0.5));

        let same = whcm(&g, &g, &f).unwrap();
        assert_eq!((same.oof, same.in_family), (Some(0.0), Some(0.0)));
        let errs = whcm_with(&p, &g, &f, WhcmDenominator::ErrorsOnly).unwrap();
        assert!(close(errs.oof.unwrap(), 0.5));
    }

    fn cell(ev: &str, doc: &str, score: u8) -> RatingCell {
        RatingCell {
            evaluator: ev.into(),
            doc_id: doc.into(),
            provenance: Provenance::Synthetic,
            metric: ReviewMetric::Acceptability,
            score,
            comment: String::new(),
        }
    }

    #[test]
    fn kappa_limits() {
        let sheet = RatingSheet {
            cells: vec![cell("a", "1", 5), cell("b", "1", 5), cell("a", "2", 2), cell("b", "2", 2)],
        };
        let k = fleiss_kappa(&sheet, ReviewMetric::Acceptability, Provenance::Synthetic).unwrap();
        assert!(close(k, 1.0));
        let flat = RatingSheet {
            cells: vec![cell("a", "1", 5), cell("b", "1", 5)],
        };
        assert_eq!(
            fleiss_kappa(&flat, ReviewMetric::Acceptability, Provenance::Synthetic),
            Err(MetricsError::DegenerateAgreement)
        );
        let partial = RatingSheet {
            cells: vec![cell("a", "1", 5), cell("b", "1", 4), cell("a", "2", 3)],
        };
        assert!(matches!(
            fleiss_kappa(&partial, ReviewMetric::Acceptability, Provenance::Synthetic),
            Err(MetricsError::IncompleteRatings(_))
        ));
    }

    #[test]
    fn kappa_hand_computed_two_raters() {
        // items: (1,1) (1,2) (2,2) (3,3)
        // P_i: 1, 0, 1, 1 → P̄ = 0.75
        // totals: c1=3, c2=3, c3=2 of 8 → P̄e = (9+9+4)/64 = 22/64
        // κ = (0.75 − 22/64)/(1 − 22/64) = (26/64)/(42/64) = 13/21
        let sheet = RatingSheet {
            cells: vec![
                cell("a", "1", 1),
                cell("b", "1", 1),
                cell("a", "2", 1),
                cell("b", "2", 2),
                cell("a", "3", 2),
                cell("b", "3", 2),
                cell("a", "4", 3),
                cell("b", "4", 3),
            ],
        };
        let k = fleiss_kappa(&sheet, ReviewMetric::Acceptability, Provenance::Synthetic).unwrap();
        assert!(close(k, 13.0 / 21.0));
    }

    #[test]
    fn means() {
        let sheet = RatingSheet {
            cells: vec![cell("a", "1", 4), cell("b", "1", 5), cell("a", "2", 4), cell("b", "2", 5)],
        };
        assert!(close(mean_scores(&sheet, ReviewMetric::Acceptability, Provenance::Synthetic).unwrap(), 4.5));
        assert_eq!(
            mean_scores(&sheet, ReviewMetric::Acceptability, Provenance::Real),
            Err(MetricsError::EmptySelection)
        );
    }

    #[test]
    fn sheet_csv_round_trip() {
        let sheet = RatingSheet {
            cells: vec![cell("a", "1", 4), RatingCell { comment: "terse, \"odd\"".into(), ..cell("b", "1", 2) }],
        };
        let mut buf = Vec::new();
        sheet.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("evaluator,doc_id,provenance,metric,score,comment"));
        assert_eq!(RatingSheet::read_csv(buf.as_slice()).unwrap(), sheet);
        let bad = "evaluator,doc_id,provenance,metric,score,comment\na,1,real,Acceptability,6,\n";
        assert!(RatingSheet::read_csv(bad.as_bytes()).is_err());
    }
}
