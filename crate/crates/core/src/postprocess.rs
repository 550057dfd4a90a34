//! From raw model text to corpus-ready documents: code extraction, code
//! scrubbing, coding-response parsing and tokenization.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Document, Provenance};
use crate::icd::{looks_like_code, IcdCode};
use crate::silver::SilverRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PostprocessError {
    #[error("no diagnosis/code pairs found in response")]
    UnparseableResponse,
}

static GROUP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[[^\[\]\n]*\]|\([^()\n]*\)").expect("valid regex"));
static GROUP_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[A-Za-z0-9]+(?:\.[A-Za-z0-9]+)?").expect("valid regex"));
// Bare mentions need more than the 3-character category so that tokens
// like "B12" in running text survive.
static BARE_CM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b[A-Z][0-9][0-9A-Z](?:\.[0-9A-Z]{1,4}|[0-9A-Z]{1,4})\b").expect("valid regex")
});
static BARE_PCS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b[0-9][0-9A-HJ-NP-Z]{6}\b").expect("valid regex"));

fn bare_mentions(text: &str, offset: usize, out: &mut Vec<Range<usize>>) {
    for m in BARE_CM.find_iter(text).chain(BARE_PCS.find_iter(text)) {
        if looks_like_code(m.as_str()) {
            out.push(offset + m.start()..offset + m.end());
        }
    }
}

/// A bracket or parenthesis group and the code tokens inside it.
struct Group {
    span: Range<usize>,
    codes: Vec<Range<usize>>,
    only_codes: bool,
}

fn groups(text: &str) -> Vec<Group> {
    GROUP
        .find_iter(text)
        .map(|m| {
            let inner = &text[m.start() + 1..m.end() - 1];
            let mut codes = Vec::new();
            let mut only_codes = true;
            let mut any = false;
            let mut prev = 0;
            for t in GROUP_TOKEN.find_iter(inner) {
                any = true;
                let gap = &inner[prev..t.start()];
                if !gap.chars().all(|c| c.is_whitespace() || ",;/&+-".contains(c)) {
                    only_codes = false;
                }
                prev = t.end();
                if looks_like_code(t.as_str()) {
                    codes.push(m.start() + 1 + t.start()..m.start() + 1 + t.end());
                } else {
                    only_codes = false;
                }
            }
            if !inner[prev..].chars().all(|c| c.is_whitespace() || ",;/&+-".contains(c)) {
                only_codes = false;
            }
            Group {
                span: m.range(),
                only_codes: any && only_codes,
                codes,
            }
        })
        .collect()
}

/// Every code mention in `text`: code tokens inside brackets or
/// parentheses (any case, any length) and bare upper-case codes longer
/// than their 3-character category.
pub fn find_code_mentions(text: &str) -> Vec<String> {
    mention_spans(text)
        .into_iter()
        .map(|r| text[r].to_string())
        .collect()
}

fn mention_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut last = 0;
    for g in groups(text) {
        bare_mentions(&text[last..g.span.start], last, &mut spans);
        spans.extend(g.codes.iter().cloned());
        last = g.span.end;
    }
    bare_mentions(&text[last..], last, &mut spans);
    spans.sort_by_key(|r| r.start);
    spans
}

/// Codes written in square brackets, normalized, deduplicated in order of
/// first appearance.
pub fn extract_bracketed_codes(text: &str) -> Vec<IcdCode> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for g in groups(text) {
        if !text[g.span.clone()].starts_with('[') {
            continue;
        }
        for r in g.codes {
            if let Ok(code) = IcdCode::parse_any(&text[r]) {
                if seen.insert(code.clone()) {
                    out.push(code);
                }
            }
        }
    }
    out
}

/// Removes every code mention. Brackets left empty by the removal go too,
/// and the whitespace at each removal site is collapsed once.
pub fn scrub_code_mentions(text: &str) -> String {
    let mut current = text.to_string();
    // removal can join fragments into a new mention; run to a fixed point
    for _ in 0..8 {
        let next = scrub_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn scrub_once(text: &str) -> String {
    let mut removals: Vec<Range<usize>> = Vec::new();
    let mut last = 0;
    for g in groups(text) {
        bare_mentions(&text[last..g.span.start], last, &mut removals);
        if g.only_codes {
            removals.push(g.span.clone());
        } else {
            removals.extend(g.codes.iter().cloned());
        }
        last = g.span.end;
    }
    bare_mentions(&text[last..], last, &mut removals);
    if removals.is_empty() {
        return text.to_string();
    }
    removals.sort_by_key(|r| r.start);

    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for r in removals {
        if r.start < cursor {
            continue;
        }
        let mut start = r.start;
        let mut end = r.end;
        let before_ws = start > cursor && bytes[start - 1] == b' ';
        let after = bytes.get(end).copied();
        let after_ws = after == Some(b' ');
        let after_closes = matches!(after, None | Some(b'.' | b',' | b';' | b':' | b'!' | b'?' | b')' | b']' | b'\n'));
        if before_ws && (after_ws || after_closes) {
            start -= 1;
        } else if after_ws && (start == 0 || bytes[start - 1] == b'\n' || bytes[start - 1] == b'(' || bytes[start - 1] == b'[') {
            end += 1;
        }
        out.push_str(&text[cursor..start]);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRoute {
    Json,
    RegexFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingPrediction {
    pub doc_id: String,
    pub pairs: Vec<(String, IcdCode)>,
    pub route: ParseRoute,
    /// Pairs whose code failed validation.
    pub malformed_codes: usize,
}

impl CodingPrediction {
    pub fn codes(&self) -> BTreeSet<IcdCode> {
        self.pairs.iter().map(|(_, c)| c.clone()).collect()
    }
}

#[derive(Deserialize)]
struct JsonPair {
    diagnosis: String,
    icd_code: String,
}

static KEYED_PAIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#""diagnosis"\s*:\s*"([^"]*)"\s*,\s*"icd_code"\s*:\s*"([^"]*)""#).expect("valid regex")
});
static LINE_PAIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?m)^\s*(?:[-*•]|\d+[.)])?\s*(?P<diag>[^\n:\[\(]*?[A-Za-z][^\n:\[\(]*?)\s*(?:[-\x{2013}\x{2014}:]\s*|\(\s*|\[\s*)(?:ICD(?:-10)?(?:-CM)?\s*(?:code)?\s*:?\s*)?(?P<code>[A-Za-z][0-9][0-9A-Za-z](?:\.[0-9A-Za-z]{1,4})?)\b",
    )
    .expect("valid regex")
});

fn accept(diag: &str, code: &str, pairs: &mut Vec<(String, IcdCode)>, malformed: &mut usize) {
    match IcdCode::parse_any(code) {
        Ok(c) if looks_like_code(code.trim()) => pairs.push((diag.trim().to_string(), c)),
        _ => *malformed += 1,
    }
}

/// Reads a coding response: a JSON array of `{diagnosis, icd_code}`
/// objects when well formed, a pattern scan for diagnosis/code pairs
/// otherwise.
pub fn parse_coding_response(doc_id: &str, text: &str) -> Result<CodingPrediction, PostprocessError> {
    let mut malformed = 0;
    if let (Some(start), Some(end)) = (text.find('['), text.rfind(']')) {
        if start < end {
            if let Ok(items) = serde_json::from_str::<Vec<JsonPair>>(&text[start..=end]) {
                let mut pairs = Vec::new();
                for item in &items {
                    accept(&item.diagnosis, &item.icd_code, &mut pairs, &mut malformed);
                }
                return Ok(CodingPrediction {
                    doc_id: doc_id.to_string(),
                    pairs,
                    route: ParseRoute::Json,
                    malformed_codes: malformed,
                });
            }
        }
    }
    let mut pairs = Vec::new();
    for cap in KEYED_PAIR.captures_iter(text) {
        accept(&cap[1], &cap[2], &mut pairs, &mut malformed);
    }
    if pairs.is_empty() {
        for cap in LINE_PAIR.captures_iter(text) {
            accept(&cap["diag"], &cap["code"], &mut pairs, &mut malformed);
        }
    }
    if pairs.is_empty() && !text.trim().is_empty() {
        return Err(PostprocessError::UnparseableResponse);
    }
    Ok(CodingPrediction {
        doc_id: doc_id.to_string(),
        pairs,
        route: ParseRoute::RegexFallback,
        malformed_codes: malformed,
    })
}

pub const DEFAULT_MAX_TOKENS: usize = 4000;

/// Lower-cased alphanumeric tokens, numbers kept, truncated to
/// `max_tokens`.
pub fn preprocess_document(text: &str, max_tokens: usize) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_tokens)
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDoc {
    pub plan_id: String,
    pub raw_text: String,
    pub extracted_codes: Vec<IcdCode>,
    pub scrubbed_text: String,
    pub token_count: usize,
}

pub fn process_generation(plan_id: &str, raw_text: &str, max_tokens: usize) -> GeneratedDoc {
    let scrubbed = scrub_code_mentions(raw_text);
    GeneratedDoc {
        plan_id: plan_id.to_string(),
        raw_text: raw_text.to_string(),
        extracted_codes: extract_bracketed_codes(raw_text),
        token_count: preprocess_document(&scrubbed, max_tokens).len(),
        scrubbed_text: scrubbed,
    }
}

/// Which label set a synthetic training document carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Silver,
    SelfAssigned,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessingReport {
    pub documents: usize,
    pub zero_code_documents: Vec<String>,
    pub scrub_residuals: usize,
    pub route_tallies: BTreeMap<String, usize>,
    /// plan id → |extracted ∩ silver| / |silver|
    pub coverage: BTreeMap<String, f64>,
    pub mean_coverage: f64,
    pub missing_records: Vec<String>,
}

/// Converts generations into synthetic training documents.
pub fn synthetic_documents<'a, I>(
    generations: I,
    records: &[SilverRecord],
    label_source: LabelSource,
    max_tokens: usize,
) -> (Vec<Document>, ProcessingReport)
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let by_id: BTreeMap<&str, &SilverRecord> = records.iter().map(|r| (r.plan_id.as_str(), r)).collect();
    let mut docs = Vec::new();
    let mut report = ProcessingReport::default();
    for (plan_id, raw) in generations {
        let Some(record) = by_id.get(plan_id) else {
            report.missing_records.push(plan_id.to_string());
            continue;
        };
        let generated = process_generation(plan_id, raw, max_tokens);
        report.documents += 1;
        if generated.extracted_codes.is_empty() {
            report.zero_code_documents.push(plan_id.to_string());
        }
        report.scrub_residuals += find_code_mentions(&generated.scrubbed_text).len();
        let silver: BTreeSet<&IcdCode> = record.label_set.iter().collect();
        let hit = generated.extracted_codes.iter().filter(|c| silver.contains(c)).count();
        report
            .coverage
            .insert(plan_id.to_string(), hit as f64 / silver.len().max(1) as f64);
        let labels: Vec<IcdCode> = match label_source {
            LabelSource::Silver => record.label_set.clone(),
            LabelSource::SelfAssigned => generated.extracted_codes.clone(),
        };
        docs.push(Document::new(
            format!("syn-{plan_id}"),
            generated.scrubbed_text,
            labels,
            Provenance::Synthetic,
        ));
    }
    if !report.coverage.is_empty() {
        report.mean_coverage = report.coverage.values().sum::<f64>() / report.coverage.len() as f64;
    }
    (docs, report)
}
