//! Desk-scale stand-in for a neural coder: one-vs-rest logistic regression
//! over length-normalised term frequencies, trained by SGD with per-epoch
//! dev-MAP snapshot selection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Document, SplitCorpus};
use crate::icd::{FamilyId, IcdCode};
use crate::metrics::{self, Averaging, CodesetFilter, DocPrediction, MetricsError, PredictionSet};
use crate::postprocess::{preprocess_document, DEFAULT_MAX_TOKENS};
use crate::rng;

pub const MODEL_FORMAT: &str = "icdaug-linear-coder";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("training split has no labels")]
    NoLabels,
    #[error("baseline and augmented corpora do not share {0} documents")]
    SplitMismatch(&'static str),
    #[error("unsupported model archive: {0}")]
    Format(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sparse feature vector: (vocabulary index, value), sorted by index.
pub type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    /// Sorted; a token's index is its position.
    pub vocabulary: Vec<String>,
    pub max_tokens: usize,
    #[serde(skip)]
    lookup: BTreeMap<String, u32>,
}

impl FeatureSpace {
    pub fn fit(train: &[Document], max_tokens: usize) -> Self {
        let vocab: BTreeSet<String> = train
            .iter()
            .flat_map(|d| preprocess_document(&d.text, max_tokens))
            .collect();
        Self::from_vocabulary(vocab.into_iter().collect(), max_tokens)
    }

    pub fn from_vocabulary(mut vocabulary: Vec<String>, max_tokens: usize) -> Self {
        vocabulary.sort();
        vocabulary.dedup();
        let lookup = vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        FeatureSpace {
            vocabulary,
            max_tokens,
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    /// L2-normalised term counts; out-of-vocabulary tokens are ignored.
    pub fn transform(&self, text: &str) -> SparseVec {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for token in preprocess_document(text, self.max_tokens) {
            if let Some(&i) = self.lookup.get(&token) {
                *counts.entry(i).or_insert(0.0) += 1.0;
            }
        }
        let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
        counts
            .into_iter()
            .map(|(i, v)| (i, if norm > 0.0 { v / norm } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// One step per example in a seeded order.
    Sgd,
    /// One step per epoch on the exact mean gradient.
    FullBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub threshold: f64,
    pub optimizer: Optimizer,
    pub max_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.5,
            l2: 1e-5,
            seed: 0,
            threshold: 0.5,
            optimizer: Optimizer::Sgd,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_map: f64,
}

/// Per-label weights and bias plus the vocabulary they index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCoder {
    pub format: String,
    pub format_version: u32,
    pub features: FeatureSpace,
    /// Labels with at least one positive training example. Anything else
    /// is never scored.
    pub labels: Vec<IcdCode>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub threshold: f64,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(w: &[f64], x: &SparseVec) -> f64 {
    x.iter().map(|&(i, v)| w[i as usize] * v).sum()
}

/// Mean logistic loss plus `l2/2 * |w|^2` for one label, with its
/// gradient with respect to `w` and `b`.
pub fn logistic_loss_and_gradient(
    w: &[f64],
    b: f64,
    xs: &[SparseVec],
    ys: &[bool],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    let mut grad_b = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(w, x) + b;
        let y = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        let g = sigmoid(z) - y;
        for &(i, v) in x {
            grad[i as usize] += g * v / n;
        }
        grad_b += g / n;
    }
    let sq: f64 = w.iter().map(|v| v * v).sum();
    for (g, wi) in grad.iter_mut().zip(w) {
        *g += l2 * wi;
    }
    (loss / n + 0.5 * l2 * sq, grad, grad_b)
}

type Snapshot = (usize, f64, Vec<Vec<f64>>, Vec<f64>);

/// Weights stored as `scale * v` so that per-step L2 decay is O(1).
struct LabelState {
    v: Vec<f64>,
    scale: f64,
    bias: f64,
}

impl LabelState {
    fn new(dim: usize) -> Self {
        LabelState {
            v: vec![0.0; dim],
            scale: 1.0,
            bias: 0.0,
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.v.iter().map(|v| v * self.scale).collect()
    }

    fn sgd_epoch(&mut self, order: &[usize], xs: &[SparseVec], ys: &[bool], lr: f64, l2: f64) {
        for &i in order {
            let x = &xs[i];
            let z = self.scale * dot(&self.v, x) + self.bias;
            let g = sigmoid(z) - if ys[i] { 1.0 } else { 0.0 };
            self.scale *= 1.0 - lr * l2;
            let step = lr * g / self.scale;
            for &(j, v) in x {
                self.v[j as usize] -= step * v;
            }
            self.bias -= lr * g;
            if self.scale < 1e-6 {
                self.v.iter_mut().for_each(|v| *v *= self.scale);
                self.scale = 1.0;
            }
        }
    }

    fn full_batch_step(&mut self, xs: &[SparseVec], ys: &[bool], lr: f64, l2: f64) {
        let w = self.weights();
        let (_, grad, grad_b) = logistic_loss_and_gradient(&w, self.bias, xs, ys, l2);
        self.v = w.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
        self.scale = 1.0;
        self.bias -= lr * grad_b;
    }
}

impl LinearCoder {
    /// Builds a model from explicit parameters (no training).
    pub fn from_parts(
        features: FeatureSpace,
        labels: Vec<IcdCode>,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        threshold: f64,
    ) -> Self {
        LinearCoder {
            format: MODEL_FORMAT.to_string(),
            format_version: MODEL_FORMAT_VERSION,
            features,
            labels,
            weights,
            bias,
            threshold: threshold.clamp(0.0, 1.0),
            config: TrainConfig::default(),
            history: Vec::new(),
            selected_epoch: 0,
        }
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold.clamp(0.0, 1.0);
    }

    /// Probability per model label.
    pub fn probabilities(&self, text: &str) -> Vec<f64> {
        let x = self.features.transform(text);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| sigmoid(dot(w, &x) + b))
            .collect()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), BaselineError> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self, BaselineError> {
        let mut model: LinearCoder = serde_json::from_reader(input)?;
        if model.format != MODEL_FORMAT || model.format_version != MODEL_FORMAT_VERSION {
            return Err(BaselineError::Format(format!("{} v{}", model.format, model.format_version)));
        }
        if model.weights.len() != model.labels.len() || model.bias.len() != model.labels.len() {
            return Err(BaselineError::Format("label/weight count mismatch".into()));
        }
        model.features = FeatureSpace::from_vocabulary(model.features.vocabulary, model.features.max_tokens);
        Ok(model)
    }
}

fn scored(labels: &[IcdCode], weights: &[Vec<f64>], bias: &[f64], x: &SparseVec, threshold: f64) -> DocPrediction {
    let mut scores = BTreeMap::new();
    let mut codes = BTreeSet::new();
    for ((label, w), b) in labels.iter().zip(weights).zip(bias) {
        let p = sigmoid(dot(w, x) + b);
        if p >= threshold {
            codes.insert(label.clone());
        }
        scores.insert(label.clone(), p);
    }
    DocPrediction {
        codes,
        scores: Some(scores),
    }
}

/// Codes at or above the model threshold, with every label's probability
/// as its score.
pub fn predict(model: &LinearCoder, docs: &[Document]) -> PredictionSet {
    let docs_out = docs
        .par_iter()
        .map(|d| {
            let x = model.features.transform(&d.text);
            (
                d.id.clone(),
                scored(&model.labels, &model.weights, &model.bias, &x, model.threshold),
            )
        })
        .collect();
    PredictionSet { docs: docs_out }
}

fn dev_map(
    labels: &[IcdCode],
    states: &[LabelState],
    dev_x: &[SparseVec],
    gold: &PredictionSet,
    dev: &[Document],
) -> Result<f64, MetricsError> {
    let weights: Vec<Vec<f64>> = states.iter().map(LabelState::weights).collect();
    let bias: Vec<f64> = states.iter().map(|s| s.bias).collect();
    let pred = PredictionSet {
        docs: dev
            .iter()
            .zip(dev_x)
            .map(|(d, x)| (d.id.clone(), scored(labels, &weights, &bias, x, 1.0)))
            .collect(),
    };
    Ok(metrics::mean_average_precision(&pred, gold)?.map)
}

/// Trains one logistic model per training label for `config.epochs`
/// epochs and keeps the snapshot with the best dev MAP (earliest on ties;
/// the last epoch when the dev split is empty).
pub fn train(corpus: &SplitCorpus, config: &TrainConfig) -> Result<LinearCoder, BaselineError> {
    if corpus.train.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    let features = FeatureSpace::fit(&corpus.train, config.max_tokens);
    let labels: Vec<IcdCode> = corpus
        .train
        .iter()
        .flat_map(|d| d.labels.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.is_empty() {
        return Err(BaselineError::NoLabels);
    }
    let xs: Vec<SparseVec> = corpus.train.par_iter().map(|d| features.transform(&d.text)).collect();
    let ys: Vec<Vec<bool>> = labels
        .iter()
        .map(|l| corpus.train.iter().map(|d| d.labels.contains(l)).collect())
        .collect();
    let dev_x: Vec<SparseVec> = corpus.dev.par_iter().map(|d| features.transform(&d.text)).collect();
    let dev_gold = PredictionSet::from_documents(&corpus.dev);

    let mut states: Vec<LabelState> = labels.iter().map(|_| LabelState::new(features.len())).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut order_rng = rng::stream(config.seed, "baseline:order");
    let mut history = Vec::with_capacity(config.epochs);
    // (epoch, dev MAP, weights, bias) of the best epoch so far
    let mut best: Option<Snapshot> = None;

    for epoch in 1..=config.epochs {
        rng::shuffle(&mut order_rng, &mut order);
        states.par_iter_mut().zip(&ys).for_each(|(state, y)| match config.optimizer {
            Optimizer::Sgd => state.sgd_epoch(&order, &xs, y, config.learning_rate, config.l2),
            Optimizer::FullBatch => state.full_batch_step(&xs, y, config.learning_rate, config.l2),
        });
        let train_loss = states
            .par_iter()
            .zip(&ys)
            .map(|(s, y)| logistic_loss_and_gradient(&s.weights(), s.bias, &xs, y, config.l2).0)
            .sum::<f64>();
        let map = if corpus.dev.is_empty() {
            0.0
        } else {
            dev_map(&labels, &states, &dev_x, &dev_gold, &corpus.dev)?
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_map: map,
        });
        let improved = match &best {
            None => true,
            Some((_, m, _, _)) => map > *m || corpus.dev.is_empty(),
        };
        if improved {
            best = Some((
                epoch,
                map,
                states.iter().map(LabelState::weights).collect(),
                states.iter().map(|s| s.bias).collect(),
            ));
        }
    }

    let (selected_epoch, _, weights, bias) = best.unwrap_or_else(|| {
        (
            0,
            0.0,
            states.iter().map(LabelState::weights).collect(),
            states.iter().map(|s| s.bias).collect(),
        )
    });
    Ok(LinearCoder {
        format: MODEL_FORMAT.to_string(),
        format_version: MODEL_FORMAT_VERSION,
        features,
        labels,
        weights,
        bias,
        threshold: config.threshold.clamp(0.0, 1.0),
        config: *config,
        history,
        selected_epoch,
    })
}

/// Picks the threshold on a 0.05 grid that maximises dev micro-F1
/// (smallest threshold on ties) and stores it in the model.
pub fn sweep_threshold(model: &mut LinearCoder, dev: &[Document]) -> Result<f64, BaselineError> {
    let gold = PredictionSet::from_documents(dev);
    let mut scored = predict(model, dev);
    let mut best = (model.threshold, f64::NEG_INFINITY);
    for step in 1..20 {
        let t = step as f64 * 0.05;
        for d in scored.docs.values_mut() {
            let scores = d.scores.as_ref().expect("predict always scores");
            d.codes = scores.iter().filter(|(_, p)| **p >= t).map(|(c, _)| c.clone()).collect();
        }
        let f1 = match metrics::prf(&scored, &gold, Averaging::Micro, &CodesetFilter::Overall) {
            Ok(p) => p.f1,
            Err(MetricsError::EmptyEvaluationSet) => 0.0,
            Err(e) => return Err(e.into()),
        };
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    model.set_threshold(best.0);
    Ok(best.0)
}

/// Code sets used for the filtered columns of the comparison table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFilters {
    pub families: BTreeSet<FamilyId>,
    pub generation: BTreeSet<IcdCode>,
}

/// One row of the base/aug comparison (fractions in [0,1]; `None` when a
/// filtered set has nothing to evaluate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub variant: String,
    pub train_documents: usize,
    pub selected_epoch: usize,
    pub dev_map: f64,
    pub mi_f1: Option<f64>,
    pub ma_f1: Option<f64>,
    pub mi_f1_f: Option<f64>,
    pub ma_f1_f: Option<f64>,
    pub mi_f1_f_gen: Option<f64>,
    pub ma_f1_f_gen: Option<f64>,
    pub oof_f: Option<f64>,
    pub if_f: Option<f64>,
    pub oof_f_gen: Option<f64>,
    pub if_f_gen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: TrainConfig,
    pub filters: EvalFilters,
    pub rows: Vec<ComparisonRow>,
}

const ROW_COLUMNS: [&str; 14] = [
    "model", "variant", "mi_f1", "ma_f1", "mi_f1_f", "ma_f1_f", "mi_f1_f_gen", "ma_f1_f_gen", "oof_f", "if_f",
    "oof_f_gen", "if_f_gen", "dev_map", "selected_epoch",
];

impl ComparisonReport {
    /// Percentages with two decimals; empty cells for undefined values.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ROW_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.variant.clone(),
                pct(r.mi_f1),
                pct(r.ma_f1),
                pct(r.mi_f1_f),
                pct(r.ma_f1_f),
                pct(r.mi_f1_f_gen),
                pct(r.ma_f1_f_gen),
                pct(r.oof_f),
                pct(r.if_f),
                pct(r.oof_f_gen),
                pct(r.if_f_gen),
                pct(Some(r.dev_map)),
                r.selected_epoch.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn optional(r: Result<metrics::Prf, MetricsError>) -> Result<Option<f64>, MetricsError> {
    match r {
        Ok(p) => Ok(Some(p.f1)),
        Err(MetricsError::EmptyEvaluationSet) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Test-split scores of a trained model in the comparison-row shape.
pub fn evaluate_row(
    model: &LinearCoder,
    test: &[Document],
    filters: &EvalFilters,
    variant: &str,
    train_documents: usize,
) -> Result<ComparisonRow, BaselineError> {
    let pred = predict(model, test);
    let gold = PredictionSet::from_documents(test);
    let f = CodesetFilter::Families(filters.families.clone());
    let g = CodesetFilter::Generation(filters.generation.clone());
    let score = |avg, filter: &CodesetFilter| optional(metrics::prf(&pred, &gold, avg, filter));
    let whcm_f = metrics::whcm(&pred, &gold, &f)?;
    let whcm_g = metrics::whcm(&pred, &gold, &g)?;
    Ok(ComparisonRow {
        model: "linear".to_string(),
        variant: variant.to_string(),
        train_documents,
        selected_epoch: model.selected_epoch,
        dev_map: model
            .history
            .iter()
            .find(|h| h.epoch == model.selected_epoch)
            .map_or(0.0, |h| h.dev_map),
        mi_f1: score(Averaging::Micro, &CodesetFilter::Overall)?,
        ma_f1: score(Averaging::Macro, &CodesetFilter::Overall)?,
        mi_f1_f: score(Averaging::Micro, &f)?,
        ma_f1_f: score(Averaging::Macro, &f)?,
        mi_f1_f_gen: score(Averaging::Micro, &g)?,
        ma_f1_f_gen: score(Averaging::Macro, &g)?,
        oof_f: whcm_f.oof,
        if_f: whcm_f.in_family,
        oof_f_gen: whcm_g.oof,
        if_f_gen: whcm_g.in_family,
    })
}

fn ids(docs: &[Document]) -> Vec<&str> {
    docs.iter().map(|d| d.id.as_str()).collect()
}

/// Trains on both corpora with the same config and reports base and aug
/// rows on the shared test split.
pub fn compare_runs(
    baseline: &SplitCorpus,
    augmented: &SplitCorpus,
    filters: &EvalFilters,
    config: &TrainConfig,
) -> Result<ComparisonReport, BaselineError> {
    if ids(&baseline.dev) != ids(&augmented.dev) {
        return Err(BaselineError::SplitMismatch("dev"));
    }
    if ids(&baseline.test) != ids(&augmented.test) {
        return Err(BaselineError::SplitMismatch("test"));
    }
    let mut rows = Vec::with_capacity(2);
    for (variant, corpus) in [("base", baseline), ("aug", augmented)] {
        let model = train(corpus, config)?;
        rows.push(evaluate_row(&model, &baseline.test, filters, variant, corpus.train.len())?);
    }
    Ok(ComparisonReport {
        config: *config,
        filters: filters.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use rand::Rng;

    fn code(s: &str) -> IcdCode {
        IcdCode::parse_any(s).unwrap()
    }

    fn doc(id: &str, text: &str, labels: &[&str]) -> Document {
        Document::new(id, text, labels.iter().map(|c| code(c)), Provenance::Real)
    }

    fn toy() -> SplitCorpus {
        let mut train = Vec::new();
        for i in 0..12 {
            train.push(doc(&format!("a{i}"), "fever cough fever", &["J189"]));
            train.push(doc(&format!("b{i}"), "thirst insulin glucose", &["E1021"]));
        }
        SplitCorpus {
            dev: vec![doc("d1", "cough fever", &["J189"]), doc("d2", "insulin thirst", &["E1021"])],
            test: vec![doc("t1", "fever", &["J189"]), doc("t2", "glucose", &["E1021"]), doc("t3", "glucose", &["Z999"])],
            train,
        }
    }

    #[test]
    fn separable_toy_fits() {
        let c = toy();
        let cfg = TrainConfig::default();
        let model = train(&c, &cfg).unwrap();
        let pred = predict(&model, &c.train);
        let gold = PredictionSet::from_documents(&c.train);
        let r = metrics::prf(&pred, &gold, Averaging::Micro, &CodesetFilter::Overall).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(model.history.len(), 20);
        let again = train(&c, &cfg).unwrap();
        assert_eq!(model.weights, again.weights);
        assert_eq!(model.bias, again.bias);
    }

    #[test]
    fn selected_epoch_is_first_maximum() {
        let model = train(&toy(), &TrainConfig::default()).unwrap();
        let best = model.history.iter().map(|h| h.dev_map).fold(f64::NEG_INFINITY, f64::max);
        let first = model.history.iter().find(|h| h.dev_map == best).unwrap();
        assert_eq!(model.selected_epoch, first.epoch);
    }

    #[test]
    fn train_absent_labels_are_never_scored() {
        let c = toy();
        let model = train(&c, &TrainConfig { threshold: 0.0, ..Default::default() }).unwrap();
        let pred = predict(&model, &c.test);
        for d in pred.docs.values() {
            assert!(!d.codes.contains(&code("Z999")));
            assert_eq!(d.codes.len(), 2);
        }
    }

    #[test]
    fn full_batch_loss_non_increasing() {
        let cfg = TrainConfig {
            optimizer: Optimizer::FullBatch,
            learning_rate: 1.0,
            ..Default::default()
        };
        let model = train(&toy(), &cfg).unwrap();
        for w in model.history.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::stream(7, "grad");
        let dim = 30;
        let xs: Vec<SparseVec> = (0..15)
            .map(|_| {
                let mut x = SparseVec::new();
                for i in 0..dim as u32 {
                    if rng.random_bool(0.3) {
                        x.push((i, rng.random_range(0.0..1.0)));
                    }
                }
                x
            })
            .collect();
        let ys: Vec<bool> = (0..15).map(|_| rng.random_bool(0.5)).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad, grad_b) = logistic_loss_and_gradient(&w, 0.3, &xs, &ys, 0.01);
        let h = 1e-5;
        for i in 0..dim {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (logistic_loss_and_gradient(&p, 0.3, &xs, &ys, 0.01).0
                - logistic_loss_and_gradient(&m, 0.3, &xs, &ys, 0.01).0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5);
        }
        let fd_b = (logistic_loss_and_gradient(&w, 0.3 + h, &xs, &ys, 0.01).0
            - logistic_loss_and_gradient(&w, 0.3 - h, &xs, &ys, 0.01).0)
            / (2.0 * h);
        assert!((fd_b - grad_b).abs() <= 1e-5);
    }

    #[test]
    fn known_weights_and_threshold_clamp() {
        let fs = FeatureSpace::from_vocabulary(vec!["a".into(), "b".into()], 100);
        let mut m = LinearCoder::from_parts(fs, vec![code("A01"), code("B01")], vec![vec![2.0, 0.0], vec![0.0, -1.0]], vec![0.5, 0.0], 1.7);
        assert_eq!(m.threshold, 1.0);
        // "a a b": tf (2,1)/sqrt(5)
        let x = (2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt());
        let p = m.probabilities("a a b");
        assert!((p[0] - 1.0 / (1.0 + (-(2.0 * x.0 + 0.5)).exp())).abs() < 1e-9);
        assert!((p[1] - 1.0 / (1.0 + x.1.exp())).abs() < 1e-9);
        let docs = [doc("x", "a a b", &["A01"])];
        assert!(predict(&m, &docs).docs["x"].codes.is_empty());
        m.set_threshold(-3.0);
        assert_eq!(predict(&m, &docs).docs["x"].codes.len(), 2);
    }

    #[test]
    fn model_json_round_trip() {
        let model = train(&toy(), &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        model.write_json(&mut buf).unwrap();
        let back = LinearCoder::read_json(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.probabilities("fever"), model.probabilities("fever"));
    }

    #[test]
    fn identical_corpora_give_identical_rows() {
        let c = toy();
        let filters = EvalFilters {
            families: [FamilyId::new("J18")].into(),
            generation: [code("J189")].into(),
        };
        let r = compare_runs(&c, &c, &filters, &TrainConfig::default()).unwrap();
        let (mut a, b) = (r.rows[0].clone(), &r.rows[1]);
        a.variant = b.variant.clone();
        assert_eq!(&a, b);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn sweep_picks_grid_value() {
        let c = toy();
        let mut model = train(&c, &TrainConfig::default()).unwrap();
        let t = sweep_threshold(&mut model, &c.dev).unwrap();
        assert!((t / 0.05 - (t / 0.05).round()).abs() < 1e-9);
        assert_eq!(model.threshold, t);
    }
}
