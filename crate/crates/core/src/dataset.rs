//! Split corpora, label populations, few-/zero-shot strata and corpus
//! statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::{IcdCode, IcdError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("document {doc_id}: {source}")]
    MalformedCode {
        doc_id: String,
        #[source]
        source: IcdError,
    },
    #[error("duplicate document id {id:?} in {split}")]
    DuplicateId { id: String, split: Split },
    #[error("synthetic document {id:?} collides with an evaluation document in {split}")]
    Contamination { id: String, split: Split },
    #[error("document {0:?} merged as synthetic but carries real provenance")]
    NotSynthetic(String),
    #[error("corpus is empty")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "val" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<IcdCode>,
    pub provenance: Provenance,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        labels: impl IntoIterator<Item = IcdCode>,
        provenance: Provenance,
    ) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            labels: labels.into_iter().collect(),
            provenance,
        }
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitCorpus {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// One line of the JSONL corpus format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
    pub split: Split,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
}

fn default_provenance() -> Provenance {
    Provenance::Real
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    /// Columns `id,text,labels,split[,provenance]`; labels separated by `;`.
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl SplitCorpus {
    pub fn split(&self, split: Split) -> &[Document] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Document> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn documents(&self) -> impl Iterator<Item = (Split, &Document)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |d| (s, d)))
    }

    /// Builds a corpus from split-tagged documents, enforcing id uniqueness
    /// across all splits.
    pub fn from_documents<I>(docs: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (Split, Document)>,
    {
        let mut corpus = SplitCorpus::default();
        let mut seen = HashSet::new();
        for (split, doc) in docs {
            if !seen.insert(doc.id.clone()) {
                return Err(DatasetError::DuplicateId { id: doc.id, split });
            }
            corpus.split_mut(split).push(doc);
        }
        Ok(corpus)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read(file, CorpusFormat::from_path(path))
    }

    pub fn read<R: Read>(reader: R, format: CorpusFormat) -> Result<Self, DatasetError> {
        match format {
            CorpusFormat::Jsonl => read_jsonl(reader),
            CorpusFormat::Csv => read_csv(reader),
        }
    }

    pub fn records(&self) -> Vec<CorpusRecord> {
        self.documents()
            .map(|(split, d)| CorpusRecord {
                id: d.id.clone(),
                text: d.text.clone(),
                labels: d.labels.iter().map(|c| c.normalized().to_string()).collect(),
                split,
                provenance: d.provenance,
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in self.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Every label observed in any split.
    pub fn label_universe(&self) -> BTreeSet<IcdCode> {
        self.documents()
            .flat_map(|(_, d)| d.labels.iter().cloned())
            .collect()
    }
}

fn parse_labels<'a, I>(doc_id: &str, raw: I) -> Result<BTreeSet<IcdCode>, DatasetError>
where
    I: IntoIterator<Item = &'a str>,
{
    raw.into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            IcdCode::parse_any(s).map_err(|source| DatasetError::MalformedCode {
                doc_id: doc_id.to_string(),
                source,
            })
        })
        .collect()
}

fn read_jsonl<R: Read>(reader: R) -> Result<SplitCorpus, DatasetError> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let labels = parse_labels(&record.id, record.labels.iter().map(String::as_str))?;
        docs.push((
            record.split,
            Document {
                id: record.id,
                text: record.text,
                labels,
                provenance: record.provenance,
            },
        ));
    }
    SplitCorpus::from_documents(docs)
}

fn read_csv<R: Read>(reader: R) -> Result<SplitCorpus, DatasetError> {
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| DatasetError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| DatasetError::Parse {
        line: 1,
        message: format!("missing column {name:?}"),
    };
    let id_col = col("id").ok_or_else(|| missing("id"))?;
    let text_col = col("text").ok_or_else(|| missing("text"))?;
    let labels_col = col("labels").ok_or_else(|| missing("labels"))?;
    let split_col = col("split").ok_or_else(|| missing("split"))?;
    let prov_col = col("provenance");

    let mut docs = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| DatasetError::Parse {
            line,
            message: e.to_string(),
        })?;
        let get = |c: usize| row.get(c).unwrap_or("");
        let id = get(id_col).to_string();
        let split: Split = get(split_col)
            .parse()
            .map_err(|message| DatasetError::Parse { line, message })?;
        let provenance = match prov_col.map(get) {
            Some(p) if !p.is_empty() => p
                .parse()
                .map_err(|message| DatasetError::Parse { line, message })?,
            _ => Provenance::Real,
        };
        let labels = parse_labels(&id, get(labels_col).split(';'))?;
        docs.push((
            split,
            Document {
                id,
                text: get(text_col).to_string(),
                labels,
                provenance,
            },
        ));
    }
    SplitCorpus::from_documents(docs)
}

/// Document frequency of every code, per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationIndex {
    pub train: BTreeMap<IcdCode, usize>,
    pub dev: BTreeMap<IcdCode, usize>,
    pub test: BTreeMap<IcdCode, usize>,
}

impl PopulationIndex {
    pub fn split(&self, split: Split) -> &BTreeMap<IcdCode, usize> {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn count(&self, split: Split, code: &IcdCode) -> usize {
        self.split(split).get(code).copied().unwrap_or(0)
    }

    /// Codes observed in any split.
    pub fn codes(&self) -> BTreeSet<IcdCode> {
        self.train
            .keys()
            .chain(self.dev.keys())
            .chain(self.test.keys())
            .cloned()
            .collect()
    }
}

pub fn population_index(corpus: &SplitCorpus) -> PopulationIndex {
    let count = |docs: &[Document]| {
        let mut map = BTreeMap::new();
        for doc in docs {
            for code in &doc.labels {
                *map.entry(code.clone()).or_insert(0) += 1;
            }
        }
        map
    };
    PopulationIndex {
        train: count(&corpus.train),
        dev: count(&corpus.dev),
        test: count(&corpus.test),
    }
}

/// Train-count boundaries for the label strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrataThresholds {
    /// Largest train count that is still few-shot.
    pub few_shot_max: usize,
    /// Smallest train count that counts as frequent.
    pub frequent_min: usize,
}

impl Default for StrataThresholds {
    fn default() -> Self {
        StrataThresholds {
            few_shot_max: 5,
            frequent_min: 101,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStrata {
    pub zero_shot: BTreeSet<IcdCode>,
    pub few_shot: BTreeSet<IcdCode>,
    pub frequent: BTreeSet<IcdCode>,
    pub other: BTreeSet<IcdCode>,
}

pub fn stratify(index: &PopulationIndex, thresholds: StrataThresholds) -> LabelStrata {
    let mut strata = LabelStrata::default();
    for code in index.codes() {
        let train = index.count(Split::Train, &code);
        let bucket = if train == 0 {
            // every code reaching here occurs in dev or test
            &mut strata.zero_shot
        } else if train <= thresholds.few_shot_max {
            &mut strata.few_shot
        } else if train >= thresholds.frequent_min {
            &mut strata.frequent
        } else {
            &mut strata.other
        };
        bucket.insert(code);
    }
    strata
}

/// Per-split unique-label tallies in the shape of a dataset summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub documents: usize,
    pub label_assignments: usize,
    pub unique_labels: usize,
    /// `None` for the training split.
    pub unique_zero_shot: Option<usize>,
    pub unique_few_shot: usize,
}

pub fn split_summary(
    corpus: &SplitCorpus,
    index: &PopulationIndex,
    thresholds: StrataThresholds,
) -> Vec<SplitSummary> {
    Split::ALL
        .into_iter()
        .map(|split| {
            let codes = index.split(split);
            let few = codes
                .keys()
                .filter(|c| (1..=thresholds.few_shot_max).contains(&index.count(Split::Train, c)))
                .count();
            let zero = (split != Split::Train).then(|| {
                codes
                    .keys()
                    .filter(|c| index.count(Split::Train, c) == 0)
                    .count()
            });
            SplitSummary {
                split,
                documents: corpus.split(split).len(),
                label_assignments: codes.values().sum(),
                unique_labels: codes.len(),
                unique_zero_shot: zero,
                unique_few_shot: few,
            }
        })
        .collect()
}

/// Word and label distributions of one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub word_bucket_width: usize,
    /// bucket lower bound → document count
    pub words_per_document: BTreeMap<usize, usize>,
    /// one value per document
    pub words_per_label: Vec<f64>,
    pub labels_per_document: BTreeMap<usize, usize>,
    /// ids of documents without labels (their words-per-label uses divisor 1)
    pub zero_label_documents: Vec<String>,
}

pub const DEFAULT_WORD_BUCKET: usize = 250;

pub fn corpus_stats(docs: &[Document], word_bucket_width: usize) -> Result<CorpusStats, DatasetError> {
    if docs.is_empty() {
        return Err(DatasetError::Empty);
    }
    let width = word_bucket_width.max(1);
    let mut stats = CorpusStats {
        documents: docs.len(),
        word_bucket_width: width,
        words_per_document: BTreeMap::new(),
        words_per_label: Vec::with_capacity(docs.len()),
        labels_per_document: BTreeMap::new(),
        zero_label_documents: Vec::new(),
    };
    for doc in docs {
        let words = doc.word_count();
        let labels = doc.labels.len();
        *stats.words_per_document.entry(words / width * width).or_insert(0) += 1;
        *stats.labels_per_document.entry(labels).or_insert(0) += 1;
        if labels == 0 {
            stats.zero_label_documents.push(doc.id.clone());
        }
        stats.words_per_label.push(words as f64 / labels.max(1) as f64);
    }
    Ok(stats)
}

impl CorpusStats {
    /// `metric,bucket,count` rows for external plotting. Words-per-label
    /// values are bucketed at one fifth of the word bucket width.
    pub fn write_csv<W: Write>(&self, corpus: &str, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["corpus", "metric", "bucket", "count"])?;
        for (bucket, count) in &self.words_per_document {
            w.write_record([corpus, "words_per_document", &bucket.to_string(), &count.to_string()])?;
        }
        let wpl_width = (self.word_bucket_width / 5).max(1);
        let mut wpl: BTreeMap<usize, usize> = BTreeMap::new();
        for v in &self.words_per_label {
            *wpl.entry((*v as usize) / wpl_width * wpl_width).or_insert(0) += 1;
        }
        for (bucket, count) in &wpl {
            w.write_record([corpus, "words_per_label", &bucket.to_string(), &count.to_string()])?;
        }
        for (bucket, count) in &self.labels_per_document {
            w.write_record([corpus, "labels_per_document", &bucket.to_string(), &count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adds synthetic documents to the training split. Dev and test are
/// returned untouched.
pub fn merge_augmented(
    baseline: &SplitCorpus,
    synthetic: &[Document],
) -> Result<SplitCorpus, DatasetError> {
    let eval_ids: BTreeMap<&str, Split> = baseline
        .dev
        .iter()
        .map(|d| (d.id.as_str(), Split::Dev))
        .chain(baseline.test.iter().map(|d| (d.id.as_str(), Split::Test)))
        .collect();
    let mut train_ids: HashSet<&str> = baseline.train.iter().map(|d| d.id.as_str()).collect();
    for doc in synthetic {
        if doc.provenance != Provenance::Synthetic {
            return Err(DatasetError::NotSynthetic(doc.id.clone()));
        }
        if let Some(split) = eval_ids.get(doc.id.as_str()) {
            return Err(DatasetError::Contamination {
                id: doc.id.clone(),
                split: *split,
            });
        }
        if !train_ids.insert(doc.id.as_str()) {
            return Err(DatasetError::DuplicateId {
                id: doc.id.clone(),
                split: Split::Train,
            });
        }
    }
    let mut merged = baseline.clone();
    merged.train.extend(synthetic.iter().cloned());
    Ok(merged)
}
