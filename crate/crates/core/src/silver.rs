//! Generation planning: cloning few-shot source documents with random
//! label drops, sibling substitution for zero-shot codes, and the
//! duplicate ledger over label sets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Document, SplitCorpus};
use crate::icd::{family_of, IcdCode};
use crate::rng;
use crate::selection::GenerationCodeSet;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("code {0} appears in no training document")]
    NoSourceDocuments(IcdCode),
    #[error("no training document carries a sibling of zero-shot code {0}")]
    NoSiblingDocuments(IcdCode),
    #[error("code {0} is present in training and cannot be planned as zero-shot")]
    NotZeroShot(IcdCode),
    #[error("plan manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    FewShot,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub sibling: IcdCode,
    pub zero_shot: IcdCode,
}

/// The silver-standard label set for one synthetic document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub plan_id: String,
    pub kind: RecordKind,
    pub source_doc_id: String,
    pub target_code: IcdCode,
    pub label_set: Vec<IcdCode>,
    pub dropped_labels: Vec<IcdCode>,
    pub substitution: Option<Substitution>,
    pub is_duplicate: bool,
}

impl SilverRecord {
    /// Sorted, deduplicated label list that identifies duplicate prompts.
    pub fn canonical_key(&self) -> String {
        let set: BTreeSet<&str> = self.label_set.iter().map(IcdCode::normalized).collect();
        set.into_iter().collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub target_population: usize,
    pub max_drop: usize,
    /// Count clones made for other generation codes toward a code's
    /// population. Off by default: only originals and own clones count.
    pub count_foreign_clones: bool,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            target_population: 100,
            max_drop: 5,
            count_foreign_clones: false,
            seed: 0,
        }
    }
}

fn train_docs_sorted(corpus: &SplitCorpus) -> Vec<&Document> {
    let mut docs: Vec<&Document> = corpus.train.iter().collect();
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    docs
}

/// Removes up to `d ~ U{0..=max_drop}` labels other than the protected one.
fn drop_labels<R: Rng>(
    rng: &mut R,
    labels: &mut Vec<IcdCode>,
    protected: &IcdCode,
    max_drop: usize,
) -> Vec<IcdCode> {
    let drawn = rng.random_range(0..=max_drop);
    let droppable: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, c)| *c != protected)
        .map(|(i, _)| i)
        .collect();
    let picks: BTreeSet<usize> = rng::sample_indices(rng, droppable.len(), drawn)
        .into_iter()
        .map(|i| droppable[i])
        .collect();
    let mut dropped = Vec::with_capacity(picks.len());
    let mut kept = Vec::with_capacity(labels.len() - picks.len());
    for (i, code) in labels.drain(..).enumerate() {
        if picks.contains(&i) {
            dropped.push(code);
        } else {
            kept.push(code);
        }
    }
    *labels = kept;
    dropped
}

/// Clones of the training documents carrying `code`, enough to lift its
/// population (`current_population`) to the target.
pub fn plan_few_shot(
    corpus: &SplitCorpus,
    code: &IcdCode,
    current_population: usize,
    config: &PlanConfig,
) -> Result<Vec<SilverRecord>, PlanError> {
    let sources: Vec<&Document> = train_docs_sorted(corpus)
        .into_iter()
        .filter(|d| d.labels.contains(code))
        .collect();
    if sources.is_empty() {
        return Err(PlanError::NoSourceDocuments(code.clone()));
    }
    let needed = config.target_population.saturating_sub(current_population);
    let mut rng = rng::stream(config.seed, &format!("few_shot:{code}"));
    let records = (0..needed)
        .map(|i| {
            let source = sources[i % sources.len()];
            let mut labels: Vec<IcdCode> = source.labels.iter().cloned().collect();
            let dropped = drop_labels(&mut rng, &mut labels, code, config.max_drop);
            SilverRecord {
                plan_id: format!("fs-{}-{:04}", code.normalized(), i),
                kind: RecordKind::FewShot,
                source_doc_id: source.id.clone(),
                target_code: code.clone(),
                label_set: labels,
                dropped_labels: dropped,
                substitution: None,
                is_duplicate: false,
            }
        })
        .collect();
    Ok(records)
}

/// One record per training document holding a sibling of `zero_shot`,
/// with one such sibling (chosen at random) replaced by the zero-shot code.
pub fn plan_zero_shot(
    corpus: &SplitCorpus,
    zero_shot: &IcdCode,
    config: &PlanConfig,
) -> Result<Vec<SilverRecord>, PlanError> {
    let family = family_of(zero_shot);
    let docs = train_docs_sorted(corpus);
    if docs.iter().any(|d| d.labels.contains(zero_shot)) {
        return Err(PlanError::NotZeroShot(zero_shot.clone()));
    }
    let mut rng = rng::stream(config.seed, &format!("zero_shot:{zero_shot}"));
    let mut records = Vec::new();
    for doc in docs {
        let present: Vec<&IcdCode> = doc.labels.iter().filter(|c| family.contains(c)).collect();
        if present.is_empty() {
            continue;
        }
        let sibling = present[rng.random_range(0..present.len())].clone();
        let mut labels: Vec<IcdCode> = doc
            .labels
            .iter()
            .map(|c| if *c == sibling { zero_shot.clone() } else { c.clone() })
            .collect();
        labels.sort();
        let dropped = drop_labels(&mut rng, &mut labels, zero_shot, config.max_drop);
        records.push(SilverRecord {
            plan_id: format!("zs-{}-{:04}", zero_shot.normalized(), records.len()),
            kind: RecordKind::ZeroShot,
            source_doc_id: doc.id.clone(),
            target_code: zero_shot.clone(),
            label_set: labels,
            dropped_labels: dropped,
            substitution: Some(Substitution {
                sibling,
                zero_shot: zero_shot.clone(),
            }),
            is_duplicate: false,
        });
    }
    if records.is_empty() {
        return Err(PlanError::NoSiblingDocuments(zero_shot.clone()));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanHeader {
    pub toolkit_version: String,
    pub rng_algorithm: String,
    pub config: PlanConfig,
    pub records: usize,
    pub unique: usize,
    pub duplicates: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerationPlan {
    pub config: PlanConfig,
    pub records: Vec<SilverRecord>,
    /// canonical label set → plan ids carrying it, in plan order
    pub ledger: BTreeMap<String, Vec<String>>,
    pub warnings: Vec<String>,
}

impl GenerationPlan {
    pub fn unique_count(&self) -> usize {
        self.ledger.len()
    }

    pub fn duplicate_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_duplicate).count()
    }

    fn from_records(config: PlanConfig, mut records: Vec<SilverRecord>, warnings: Vec<String>) -> Self {
        let mut ledger: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for record in &mut records {
            let ids = ledger.entry(record.canonical_key()).or_default();
            record.is_duplicate = !ids.is_empty();
            ids.push(record.plan_id.clone());
        }
        GenerationPlan {
            config,
            records,
            ledger,
            warnings,
        }
    }

    pub fn header(&self) -> PlanHeader {
        PlanHeader {
            toolkit_version: crate::VERSION.to_string(),
            rng_algorithm: rng::RNG_ALGORITHM.to_string(),
            config: self.config,
            records: self.records.len(),
            unique: self.unique_count(),
            duplicates: self.duplicate_count(),
            warnings: self.warnings.clone(),
        }
    }

    /// Header line followed by one record per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &PlanLine::Header(self.header()))?;
        out.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut out, &PlanLine::Record(record.clone()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, PlanError> {
        let mut header: Option<PlanHeader> = None;
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let err = |message: String| PlanError::Manifest { line: i + 1, message };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<PlanLine>(&line).map_err(|e| err(e.to_string()))? {
                PlanLine::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
                PlanLine::Header(_) => return Err(err("unexpected header line".into())),
                PlanLine::Record(r) => records.push(r),
            }
        }
        let header = header.ok_or(PlanError::Manifest {
            line: 1,
            message: "missing header line".into(),
        })?;
        let plan = Self::from_records(header.config, records, header.warnings);
        if plan.records.len() != header.records {
            return Err(PlanError::Manifest {
                line: 1,
                message: format!("header announces {} records, found {}", header.records, plan.records.len()),
            });
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum PlanLine {
    Header(PlanHeader),
    Record(SilverRecord),
}

/// Few-shot records (code order) followed by zero-shot records, with the
/// duplicate ledger. Per-code failures become warnings.
pub fn build_plan(gcs: &GenerationCodeSet, corpus: &SplitCorpus, config: &PlanConfig) -> GenerationPlan {
    let mut originals: BTreeMap<&IcdCode, usize> = BTreeMap::new();
    for doc in &corpus.train {
        for code in &doc.labels {
            *originals.entry(code).or_insert(0) += 1;
        }
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut foreign: BTreeMap<IcdCode, usize> = BTreeMap::new();
    for code in &gcs.few_shot_codes {
        let mut population = originals.get(code).copied().unwrap_or(0);
        if config.count_foreign_clones {
            population += foreign.get(code).copied().unwrap_or(0);
        }
        match plan_few_shot(corpus, code, population, config) {
            Ok(batch) => {
                if config.count_foreign_clones {
                    for r in &batch {
                        for c in r.label_set.iter().filter(|c| *c != code) {
                            *foreign.entry(c.clone()).or_insert(0) += 1;
                        }
                    }
                }
                records.extend(batch);
            }
            Err(e) => {
                tracing::warn!("{e}");
                warnings.push(e.to_string());
            }
        }
    }
    for code in &gcs.zero_shot_codes {
        match plan_zero_shot(corpus, code, config) {
            Ok(batch) => records.extend(batch),
            Err(e) => {
                tracing::warn!("{e}");
                warnings.push(e.to_string());
            }
        }
    }
    GenerationPlan::from_records(*config, records, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;

    fn code(s: &str) -> IcdCode {
        IcdCode::parse_any(s).unwrap()
    }

    fn doc(id: &str, labels: &[&str]) -> Document {
        Document::new(id, "", labels.iter().map(|l| code(l)), Provenance::Real)
    }

    fn cfg(max_drop: usize) -> PlanConfig {
        PlanConfig {
            max_drop,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn few_shot_fills_to_target() {
        let corpus = SplitCorpus {
            train: vec![doc("b", &["T001", "X01"]), doc("a", &["T001", "Y01"])],
            ..Default::default()
        };
        let recs = plan_few_shot(&corpus, &code("T001"), 40, &cfg(5)).unwrap();
        assert_eq!(recs.len(), 60);
        // round robin in id order
        assert_eq!(recs[0].source_doc_id, "a");
        assert_eq!(recs[1].source_doc_id, "b");
        assert_eq!(recs[2].source_doc_id, "a");
        assert!(recs.iter().all(|r| r.label_set.contains(&code("T001"))));
        assert!(plan_few_shot(&corpus, &code("T001"), 100, &cfg(5)).unwrap().is_empty());
        assert_eq!(
            plan_few_shot(&corpus, &code("Q001"), 0, &cfg(5)),
            Err(PlanError::NoSourceDocuments(code("Q001")))
        );
    }

    #[test]
    fn drop_cap_is_available_labels() {
        let mut labels = vec![code("T001"), code("X01"), code("Y01"), code("Z01")];
        // max_drop 5 with a seed that draws 5 must stop at 3
        for seed in 0..64 {
            let mut l = labels.clone();
            let mut rng = rng::stream(seed, "t");
            let dropped = drop_labels(&mut rng, &mut l, &code("T001"), 5);
            assert!(dropped.len() <= 3);
            assert!(l.contains(&code("T001")));
            if dropped.len() == 3 {
                assert_eq!(l, vec![code("T001")]);
            }
        }
        let mut rng = rng::stream(0, "t");
        let none = drop_labels(&mut rng, &mut labels, &code("T001"), 0);
        assert!(none.is_empty());
        assert_eq!(labels.len(), 4);
    }

    #[test]
    fn zero_shot_substitution() {
        let corpus = SplitCorpus {
            train: vec![doc("d1", &["E1011", "G430"]), doc("d2", &["E1011", "E1021"]), doc("d3", &["J449"])],
            ..Default::default()
        };
        let recs = plan_zero_shot(&corpus, &code("E1010"), &cfg(0)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label_set, vec![code("E1010"), code("G430")]);
        assert_eq!(
            recs[0].substitution,
            Some(Substitution { sibling: code("E1011"), zero_shot: code("E1010") })
        );
        let second = &recs[1];
        let replaced = &second.substitution.as_ref().unwrap().sibling;
        assert!(second.label_set.contains(&code("E1010")));
        assert!(!second.label_set.contains(replaced));
        assert_eq!(second.label_set.len(), 2);

        assert_eq!(
            plan_zero_shot(&corpus, &code("H8110"), &cfg(0)),
            Err(PlanError::NoSiblingDocuments(code("H8110")))
        );
    }

    #[test]
    fn ledger_uses_set_identity() {
        let mk = |id: &str, labels: &[&str]| SilverRecord {
            plan_id: id.into(),
            kind: RecordKind::FewShot,
            source_doc_id: "s".into(),
            target_code: code(labels[0]),
            label_set: labels.iter().map(|l| code(l)).collect(),
            dropped_labels: vec![],
            substitution: None,
            is_duplicate: false,
        };
        let plan = GenerationPlan::from_records(
            PlanConfig::default(),
            vec![mk("1", &["A01", "B01"]), mk("2", &["B01", "A01"]), mk("3", &["C01"])],
            vec![],
        );
        assert!(!plan.records[0].is_duplicate);
        assert!(plan.records[1].is_duplicate);
        assert_eq!(plan.unique_count(), 2);
        assert_eq!(plan.duplicate_count(), 1);
    }

    #[test]
    fn manifest_round_trip() {
        let corpus = SplitCorpus {
            train: vec![doc("a", &["T001", "X01", "Y01"]), doc("b", &["T002", "T001"])],
            ..Default::default()
        };
        let gcs = GenerationCodeSet {
            families: vec![],
            few_shot_codes: [code("T001")].into(),
            zero_shot_codes: [code("T003"), code("Q999")].into(),
        };
        let plan = build_plan(&gcs, &corpus, &PlanConfig { target_population: 10, ..cfg(2) });
        assert_eq!(plan.warnings.len(), 1);
        let mut buf = Vec::new();
        plan.write_jsonl(&mut buf).unwrap();
        let back = GenerationPlan::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, plan);
    }
}
