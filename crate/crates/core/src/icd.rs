//! ICD-10-CM/PCS code identity, families, ancestor chains and the
//! description table.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IcdError {
    #[error("malformed ICD-10 code {raw:?}: {reason}")]
    MalformedCode { raw: String, reason: &'static str },
    #[error("description table schema error: {0}")]
    Schema(String),
    #[error("description table read error: {0}")]
    Read(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSystem {
    /// ICD-10-CM diagnosis codes.
    Diagnosis,
    /// ICD-10-PCS procedure codes.
    Procedure,
}

/// A parsed ICD-10 code.
///
/// Equality, ordering and hashing use the normalized form only, so the
/// same code written as `E10.21` and `e1021` is one label.
#[derive(Debug, Clone)]
pub struct IcdCode {
    raw: String,
    normalized: String,
    system: CodeSystem,
}

impl IcdCode {
    /// Parses a display string for a known code system.
    pub fn parse(raw: &str, system: CodeSystem) -> Result<Self, IcdError> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(malformed(raw, "empty code"));
        }
        let normalized = normalize(trimmed, system).map_err(|reason| malformed(raw, reason))?;
        Ok(IcdCode {
            raw: trimmed.to_string(),
            normalized,
            system,
        })
    }

    /// Parses a code whose system is not stated.
    ///
    /// Digit-led 7-character codes are procedures; everything else is read
    /// as a diagnosis first and falls back to the procedure pattern.
    pub fn parse_any(raw: &str) -> Result<Self, IcdError> {
        let trimmed = raw.trim();
        let starts_with_digit = trimmed.chars().next().is_some_and(|c| c.is_ascii_digit());
        if starts_with_digit {
            return Self::parse(raw, CodeSystem::Procedure);
        }
        Self::parse(raw, CodeSystem::Diagnosis).or_else(|err| {
            Self::parse(raw, CodeSystem::Procedure).map_err(|_| err)
        })
    }

    pub fn normalized(&self) -> &str {
        &self.normalized
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn system(&self) -> CodeSystem {
        self.system
    }

    /// Display form with the conventional dot after the category (CM only).
    pub fn dotted(&self) -> String {
        match self.system {
            CodeSystem::Diagnosis if self.normalized.len() > 3 => {
                format!("{}.{}", &self.normalized[..3], &self.normalized[3..])
            }
            _ => self.normalized.clone(),
        }
    }

    pub fn family(&self) -> FamilyId {
        family_of(self)
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

fn malformed(raw: &str, reason: &'static str) -> IcdError {
    IcdError::MalformedCode {
        raw: raw.to_string(),
        reason,
    }
}

fn normalize(trimmed: &str, system: CodeSystem) -> Result<String, &'static str> {
    let dots = trimmed.matches('.').count();
    if dots > 1 {
        return Err("more than one dot");
    }
    if dots == 1 {
        if system == CodeSystem::Procedure {
            return Err("procedure codes have no dot form");
        }
        if trimmed.find('.') != Some(3) {
            return Err("dot must follow the 3-character category");
        }
    }
    let normalized: String = trimmed
        .chars()
        .filter(|c| *c != '.')
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if !normalized.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err("non-alphanumeric character");
    }
    let first = normalized.chars().next().ok_or("empty code")?;
    match system {
        CodeSystem::Diagnosis => {
            if !first.is_ascii_alphabetic() {
                return Err("diagnosis codes start with a letter");
            }
            if !(3..=7).contains(&normalized.len()) {
                return Err("diagnosis codes have 3 to 7 characters");
            }
        }
        CodeSystem::Procedure => {
            if normalized.len() != 7 {
                return Err("procedure codes have exactly 7 characters");
            }
        }
    }
    Ok(normalized)
}

impl PartialEq for IcdCode {
    fn eq(&self, other: &Self) -> bool {
        self.normalized == other.normalized
    }
}

impl Eq for IcdCode {}

impl Hash for IcdCode {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.normalized.hash(state);
    }
}

impl PartialOrd for IcdCode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for IcdCode {
    fn cmp(&self, other: &Self) -> Ordering {
        self.normalized.cmp(&other.normalized)
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.normalized)
    }
}

impl std::str::FromStr for IcdCode {
    type Err = IcdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IcdCode::parse_any(s)
    }
}

impl Serialize for IcdCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.normalized)
    }
}

impl<'de> Deserialize<'de> for IcdCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        IcdCode::parse_any(&raw).map_err(serde::de::Error::custom)
    }
}

/// The 3-character category that heads a code family.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FamilyId(String);

impl FamilyId {
    pub fn new(head: impl Into<String>) -> Self {
        FamilyId(head.into().to_ascii_uppercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn contains(&self, code: &IcdCode) -> bool {
        code.normalized().starts_with(&self.0)
    }
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub const FAMILY_HEAD_LEN: usize = 3;

pub fn family_of(code: &IcdCode) -> FamilyId {
    FamilyId(code.normalized()[..FAMILY_HEAD_LEN].to_string())
}

/// All members of `universe` sharing `code`'s family head, excluding `code`.
pub fn siblings<'a, I>(code: &IcdCode, universe: I) -> BTreeSet<IcdCode>
where
    I: IntoIterator<Item = &'a IcdCode>,
{
    let family = family_of(code);
    universe
        .into_iter()
        .filter(|c| *c != code && family.contains(c))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "policy", content = "depths")]
pub enum DepthPolicy {
    /// Only the 3-character family head is an ancestor.
    #[default]
    FamilyOnly,
    /// Every listed prefix length shorter than the code is an ancestor.
    PrefixDepths(Vec<usize>),
}

/// Ancestor structure over codes, derived from prefix depths.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    depths: Vec<usize>,
    policy: DepthPolicy,
}

impl Hierarchy {
    pub fn new(policy: DepthPolicy) -> Self {
        let mut depths = match &policy {
            DepthPolicy::FamilyOnly => vec![FAMILY_HEAD_LEN],
            DepthPolicy::PrefixDepths(d) => d.iter().copied().filter(|d| *d > 0).collect(),
        };
        depths.sort_unstable();
        depths.dedup();
        Hierarchy { depths, policy }
    }

    pub fn family_only() -> Self {
        Self::new(DepthPolicy::FamilyOnly)
    }

    pub fn policy(&self) -> &DepthPolicy {
        &self.policy
    }

    /// Proper ancestors of `code`, ordered general to specific.
    pub fn ancestors(&self, code: &IcdCode) -> Vec<String> {
        let norm = code.normalized();
        self.depths
            .iter()
            .filter(|d| **d < norm.len())
            .map(|d| norm[..*d].to_string())
            .collect()
    }

    /// Ancestors followed by the code itself.
    pub fn chain(&self, code: &IcdCode) -> Vec<String> {
        let mut chain = self.ancestors(code);
        chain.push(code.normalized().to_string());
        chain
    }

    /// Materialized code → chain map for a set of leaves.
    pub fn nodes<'a, I>(&self, codes: I) -> BTreeMap<IcdCode, Vec<String>>
    where
        I: IntoIterator<Item = &'a IcdCode>,
    {
        codes
            .into_iter()
            .map(|c| (c.clone(), self.chain(c)))
            .collect()
    }
}

static CM_MENTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[A-Z][0-9][0-9A-Z](?:[0-9A-Z]{1,4})?$").expect("valid regex")
});
static PCS_MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[0-9][0-9A-HJ-NP-Z]{6}$").expect("valid regex"));

/// Stricter than [`IcdCode::parse_any`]: true when `token` has the
/// surface shape of a real code mention (CM categories are letter, digit,
/// alphanumeric; PCS codes are digit-led and carry at least one letter).
/// Used wherever free text is scanned for codes.
pub fn looks_like_code(token: &str) -> bool {
    let upper = token.to_ascii_uppercase();
    let compact: Cow<str> = match upper.find('.') {
        Some(3) if upper.len() > 4 && upper.matches('.').count() == 1 => {
            Cow::Owned(upper.replace('.', ""))
        }
        Some(_) => return false,
        None => Cow::Borrowed(&upper),
    };
    if CM_MENTION.is_match(&compact) {
        return true;
    }
    PCS_MENTION.is_match(&compact) && compact.chars().any(|c| c.is_ascii_alphabetic())
}

/// Official long titles keyed by normalized code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DescriptionIndex {
    titles: BTreeMap<String, String>,
    duplicate_warnings: usize,
    skipped_rows: usize,
}

/// Outcome of resolving a code to its title.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved<'a> {
    pub title: Cow<'a, str>,
    pub placeholder: bool,
}

pub const PLACEHOLDER_PREFIX: &str = "Unlisted condition";

impl DescriptionIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a `icd_code,icd_version,long_title` table. Gzip input is
    /// detected by its magic bytes.
    pub fn from_path(path: &Path) -> Result<Self, IcdError> {
        let mut index = Self::new();
        index.extend_from_path(path)?;
        Ok(index)
    }

    pub fn extend_from_path(&mut self, path: &Path) -> Result<(), IcdError> {
        let file = std::fs::File::open(path)
            .map_err(|e| IcdError::Read(format!("{}: {e}", path.display())))?;
        self.extend_from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, IcdError> {
        let mut index = Self::new();
        index.extend_from_reader(reader)?;
        Ok(index)
    }

    pub fn extend_from_reader<R: Read>(&mut self, reader: R) -> Result<(), IcdError> {
        let mut buffered = BufReader::new(reader);
        let gzip = {
            let head = buffered
                .fill_buf()
                .map_err(|e| IcdError::Read(e.to_string()))?;
            head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b
        };
        if gzip {
            self.ingest_csv(flate2::read::GzDecoder::new(buffered))
        } else {
            self.ingest_csv(buffered)
        }
    }

    fn ingest_csv<R: Read>(&mut self, reader: R) -> Result<(), IcdError> {
        let mut csv = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
        let headers = csv
            .headers()
            .map_err(|e| IcdError::Schema(e.to_string()))?
            .clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| IcdError::Schema(format!("missing column {name:?}")))
        };
        let code_col = column("icd_code")?;
        let version_col = column("icd_version")?;
        let title_col = column("long_title")?;
        for row in csv.records() {
            let row = row.map_err(|e| IcdError::Read(e.to_string()))?;
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            if field(version_col) != "10" {
                continue;
            }
            let Ok(code) = IcdCode::parse_any(field(code_col)) else {
                self.skipped_rows += 1;
                continue;
            };
            let title = field(title_col).to_string();
            if let Some(previous) = self.titles.insert(code.normalized().to_string(), title) {
                tracing::warn!(code = %code, previous = %previous, "duplicate description row, keeping the last");
                self.duplicate_warnings += 1;
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, code: &IcdCode, title: impl Into<String>) {
        self.titles.insert(code.normalized().to_string(), title.into());
    }

    pub fn lookup(&self, code: &IcdCode) -> Option<&str> {
        self.titles.get(code.normalized()).map(String::as_str)
    }

    /// Title for `code`, or a placeholder when the table lacks it.
    pub fn resolve(&self, code: &IcdCode) -> Resolved<'_> {
        match self.lookup(code) {
            Some(title) => Resolved {
                title: Cow::Borrowed(title),
                placeholder: false,
            },
            None => Resolved {
                title: Cow::Owned(format!("{PLACEHOLDER_PREFIX} (category {})", family_of(code))),
                placeholder: true,
            },
        }
    }

    /// Codes from `codes` that have no title here.
    pub fn missing<'a, I>(&self, codes: I) -> BTreeSet<IcdCode>
    where
        I: IntoIterator<Item = &'a IcdCode>,
    {
        codes
            .into_iter()
            .filter(|c| self.lookup(c).is_none())
            .cloned()
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.titles.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn duplicate_warnings(&self) -> usize {
        self.duplicate_warnings
    }

    pub fn skipped_rows(&self) -> usize {
        self.skipped_rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(s: &str) -> IcdCode {
        IcdCode::parse(s, CodeSystem::Diagnosis).unwrap()
    }

    #[test]
    fn parse_normalizes_dot_and_case() {
        assert_eq!(cm("E10.21").normalized(), "E1021");
        assert_eq!(cm("e1021").normalized(), "E1021");
        assert_eq!(cm(" S02.63XA ").normalized(), "S0263XA");
        assert_eq!(cm("E10.21").dotted(), "E10.21");
    }

    #[test]
    fn parse_rejects_malformed() {
        for bad in ["10.E2", "", "  ", "E1", "E10.2.1", "E1.021", "E10-21", "E1021XYZ"] {
            assert!(
                matches!(IcdCode::parse(bad, CodeSystem::Diagnosis), Err(IcdError::MalformedCode { .. })),
                "{bad} should be malformed"
            );
        }
        assert!(IcdCode::parse("0JH6.04Z", CodeSystem::Procedure).is_err());
        assert!(IcdCode::parse("0JH604", CodeSystem::Procedure).is_err());
    }

    #[test]
    fn parse_any_routes_systems() {
        let pcs = IcdCode::parse_any("0jh604z").unwrap();
        assert_eq!(pcs.system(), CodeSystem::Procedure);
        assert_eq!(pcs.normalized(), "0JH604Z");
        assert_eq!(IcdCode::parse_any("E10.21").unwrap().system(), CodeSystem::Diagnosis);
    }

    #[test]
    fn family_heads() {
        assert_eq!(cm("S02.63XA").family().as_str(), "S02");
        assert_eq!(cm("E1021").family().as_str(), "E10");
        let pcs = IcdCode::parse("0JH604Z", CodeSystem::Procedure).unwrap();
        assert_eq!(family_of(&pcs).as_str(), "0JH");
    }

    #[test]
    fn sibling_examples() {
        let universe: Vec<IcdCode> = ["E1010", "E1011", "G430"].iter().map(|s| cm(s)).collect();
        let got = siblings(&cm("E1010"), &universe);
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![cm("E1011")]);
        assert!(siblings(&cm("E1010"), &[cm("G430")]).is_empty());

        let t82: Vec<IcdCode> = ["T820", "T821", "T822", "T8231", "T827XXA", "G430"]
            .iter()
            .map(|s| cm(s))
            .collect();
        // Brute-force prefix scan over the raw strings.
        let expected: BTreeSet<IcdCode> = t82
            .iter()
            .filter(|c| c.normalized() != "T820" && c.normalized().as_bytes()[..3] == *b"T82")
            .cloned()
            .collect();
        assert_eq!(siblings(&cm("T820"), &t82), expected);
        assert_eq!(expected.len(), 4);
    }

    #[test]
    fn ancestor_policies() {
        let h = Hierarchy::family_only();
        assert_eq!(h.ancestors(&cm("E1021")), vec!["E10"]);
        assert!(h.ancestors(&cm("E10")).is_empty());
        let deep = Hierarchy::new(DepthPolicy::PrefixDepths(vec![5, 3]));
        assert_eq!(deep.ancestors(&cm("S0263XA")), vec!["S02", "S0263"]);
        assert_eq!(deep.chain(&cm("S0263XA")), vec!["S02", "S0263", "S0263XA"]);
    }

    #[test]
    fn mention_shape() {
        for yes in ["E10.21", "E1021", "I10", "S0263XA", "0JH604Z", "c7a", "G43.909"] {
            assert!(looks_like_code(yes), "{yes}");
        }
        for no in ["CODE", "NOTE", "THE", "1234567", "E10.", "E1.021", "PATIENT", "note"] {
            assert!(!looks_like_code(no), "{no}");
        }
    }

    #[test]
    fn descriptions_load_filter_and_dedupe() {
        let table = "icd_code,icd_version,long_title\n\
            E10.21,10,Type 1 diabetes mellitus with diabetic nephropathy\n\
            0010,9,Cholera due to vibrio cholerae\n\
            G430,10,First title\n\
            G430,10,Second title\n";
        let index = DescriptionIndex::from_reader(table.as_bytes()).unwrap();
        assert_eq!(
            index.lookup(&cm("E1021")),
            Some("Type 1 diabetes mellitus with diabetic nephropathy")
        );
        assert_eq!(index.len(), 2);
        assert_eq!(index.lookup(&cm("G430")), Some("Second title"));
        assert_eq!(index.duplicate_warnings(), 1);
    }

    #[test]
    fn descriptions_gzip_and_schema() {
        use std::io::Write;
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(b"icd_code,icd_version,long_title\nE1021,10,Nephropathy\n").unwrap();
        let gz = enc.finish().unwrap();
        let index = DescriptionIndex::from_reader(gz.as_slice()).unwrap();
        assert_eq!(index.lookup(&cm("E10.21")), Some("Nephropathy"));

        let err = DescriptionIndex::from_reader("icd_code,long_title\nE1021,x\n".as_bytes());
        assert!(matches!(err, Err(IcdError::Schema(_))));
    }

    #[test]
    fn placeholder_resolution() {
        let index = DescriptionIndex::new();
        let r = index.resolve(&cm("H8110"));
        assert!(r.placeholder);
        assert!(r.title.contains("H81"));
        assert_eq!(index.missing(&[cm("H8110")]).len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cm_code() -> impl Strategy<Value = String> {
            "[A-Z][0-9][0-9A-Z][0-9A-Z]{0,4}"
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(raw in cm_code()) {
                let once = cm(&raw);
                let twice = cm(once.normalized());
                prop_assert_eq!(once.normalized(), twice.normalized());
                prop_assert!(once.normalized().starts_with(family_of(&once).as_str()));
            }

            #[test]
            fn dot_reinsertion_round_trips(raw in "[A-Z][0-9][0-9A-Z][0-9A-Z]{1,4}") {
                let code = cm(&raw);
                let again = cm(&code.dotted());
                prop_assert_eq!(code.normalized(), again.normalized());
            }

            #[test]
            fn siblings_are_symmetric(codes in proptest::collection::btree_set("[A-C][0-2][0-2][0-2]{0,2}", 1..20)) {
                let universe: Vec<IcdCode> = codes.iter().map(|s| cm(s)).collect();
                for a in &universe {
                    for b in &universe {
                        if a == b { continue; }
                        prop_assert_eq!(
                            siblings(a, &universe).contains(b),
                            siblings(b, &universe).contains(a)
                        );
                    }
                }
            }

            #[test]
            fn family_only_ancestor_length(raw in cm_code()) {
                let code = cm(&raw);
                let anc = Hierarchy::family_only().ancestors(&code);
                prop_assert!(anc.len() <= 1);
                prop_assert_eq!(anc.is_empty(), code.len() == 3);
            }
        }
    }
}
