//! Seeded synthetic corpora with known token/label correlations, for
//! offline end-to-end runs and the augmentation-direction check.
//!
//! Each code owns a few signature tokens and each family a few shared
//! tokens, so a bag-of-words model can learn a code only from documents
//! that carry it, and confuses rare members with the frequent member of
//! the same family.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Document, Provenance, Split, SplitCorpus};
use crate::icd::{family_of, DescriptionIndex, FamilyId, IcdCode};
use crate::rng;

/// Heads and condition names for families that can become eligible.
pub const TARGET_FAMILIES: [(&str, &str); 10] = [
    ("E10", "Type 1 diabetes mellitus"),
    ("G43", "Migraine"),
    ("H35", "Retinal disorder"),
    ("H81", "Vestibular disorder"),
    ("S00", "Superficial injury of head"),
    ("S02", "Fracture of skull and facial bones"),
    ("S06", "Intracranial injury"),
    ("T82", "Complication of cardiac and vascular device"),
    ("T84", "Complication of internal orthopedic device"),
    ("T85", "Complication of internal prosthetic device"),
];

/// Families with no frequent or zero-shot member; used for comorbidities
/// and padding.
pub const DISTRACTOR_FAMILIES: [(&str, &str); 6] = [
    ("J45", "Asthma"),
    ("K21", "Gastro-esophageal reflux disease"),
    ("N18", "Chronic kidney disease"),
    ("I25", "Chronic ischemic heart disease"),
    ("M54", "Dorsalgia"),
    ("F32", "Depressive episode"),
];

const QUALIFIERS: [&str; 8] = [
    "with renal complication",
    "with ophthalmic complication",
    "with persistent course",
    "of left side",
    "of right side",
    "with recurrent episodes",
    "with late effect",
    "with acute onset",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mir", "ten", "vas", "quo", "rin", "sel", "tor", "ux", "bel", "cor", "dra", "fen", "gal", "hov",
    "jet", "lum", "nax", "pil", "ros", "sim", "vek", "zan",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub target_families: usize,
    pub distractor_families: usize,
    pub few_shot_per_family: usize,
    pub zero_shot_per_family: usize,
    /// Split counts (train, dev, test) of each family's frequent member.
    pub frequent_counts: (usize, usize, usize),
    /// Dev and test counts of few-shot members; train is drawn from 1..=5.
    pub few_shot_eval: (usize, usize),
    /// Dev and test counts of zero-shot members.
    pub zero_shot_eval: (usize, usize),
    pub distractor_counts: (usize, usize, usize),
    pub distractor_members: usize,
    /// Chance that a document also carries a distractor code.
    pub comorbidity_rate: f64,
    pub signature_tokens: usize,
    pub family_tokens: usize,
    pub noise_vocabulary: usize,
    pub noise_words: usize,
    /// Extra train documents with distractor codes until the corpus
    /// reaches this size.
    pub total_documents: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 17,
            target_families: 4,
            distractor_families: 3,
            few_shot_per_family: 2,
            zero_shot_per_family: 1,
            frequent_counts: (105, 6, 6),
            few_shot_eval: (2, 3),
            zero_shot_eval: (1, 3),
            distractor_counts: (10, 2, 2),
            distractor_members: 2,
            comorbidity_rate: 0.2,
            signature_tokens: 3,
            family_tokens: 2,
            noise_vocabulary: 150,
            noise_words: 25,
            total_documents: None,
        }
    }
}

impl BenchmarkConfig {
    /// The 500-document corpus used by the silver-standard checks.
    pub fn fixture_500(seed: u64) -> Self {
        BenchmarkConfig {
            seed,
            target_families: 3,
            frequent_counts: (101, 4, 4),
            distractor_counts: (8, 2, 2),
            total_documents: Some(500),
            ..Default::default()
        }
    }
}

/// Token inventory behind every rendered note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub signatures: BTreeMap<IcdCode, Vec<String>>,
    pub family_tokens: BTreeMap<FamilyId, Vec<String>>,
    pub noise: Vec<String>,
    pub titles: BTreeMap<IcdCode, String>,
}

impl Lexicon {
    /// A short note mentioning each label's signature and family tokens,
    /// padded with noise words.
    pub fn render<R: Rng>(&self, labels: &[IcdCode], noise_words: usize, rng: &mut R) -> String {
        let mut sentences = vec!["Patient admitted for evaluation.".to_string()];
        for code in labels {
            let sig = self.signatures.get(code).map(|v| v.join(" ")).unwrap_or_default();
            let fam = self
                .family_tokens
                .get(&family_of(code))
                .map(|v| v.join(" "))
                .unwrap_or_default();
            sentences.push(format!("Findings include {sig} with {fam}."));
            sentences.push(format!("Course notable for {fam} and {sig}."));
        }
        if !self.noise.is_empty() && noise_words > 0 {
            let words: Vec<&str> = (0..noise_words)
                .map(|_| self.noise[rng.random_range(0..self.noise.len())].as_str())
                .collect();
            sentences.push(format!("Additional notes: {}.", words.join(" ")));
        }
        sentences.join(" ")
    }

    /// Codes whose signature tokens all occur in `text`.
    pub fn detect(&self, text: &str) -> BTreeSet<IcdCode> {
        let words: BTreeSet<String> = text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .map(str::to_string)
            .collect();
        self.signatures
            .iter()
            .filter(|(_, sig)| !sig.is_empty() && sig.iter().all(|t| words.contains(t)))
            .map(|(c, _)| c.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRole {
    Frequent,
    FewShot,
    ZeroShot,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedCode {
    pub code: IcdCode,
    pub role: MemberRole,
    /// Documents per split in which the code is the primary label.
    pub primary: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub corpus: SplitCorpus,
    pub descriptions: DescriptionIndex,
    pub lexicon: Lexicon,
    pub planned: Vec<PlannedCode>,
}

impl Benchmark {
    pub fn codes_with_role(&self, role: MemberRole) -> BTreeSet<IcdCode> {
        self.planned
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.code.clone())
            .collect()
    }

    pub fn target_families(&self) -> BTreeSet<FamilyId> {
        self.planned
            .iter()
            .filter(|p| p.role != MemberRole::Distractor)
            .map(|p| family_of(&p.code))
            .collect()
    }

    /// Description table in the `icd_code,icd_version,long_title` layout.
    pub fn descriptions_csv(&self) -> String {
        let mut out = String::from("icd_code,icd_version,long_title\n");
        for (code, title) in &self.lexicon.titles {
            out.push_str(&format!("{},10,\"{}\"\n", code.normalized(), title.replace('"', "\"\"")));
        }
        out
    }
}

fn pseudo_word<R: Rng>(rng: &mut R, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.random_range(2..=3);
        let w: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if w.len() >= 5 && used.insert(w.clone()) {
            return w;
        }
    }
}

fn member_code(head: &str, i: usize) -> IcdCode {
    IcdCode::parse_any(&format!("{head}{}{}", i, (i * 7 + 3) % 10)).expect("constructed code is valid")
}

/// Builds the corpus. Every non-distractor code appears as primary label
/// in exactly its planned number of documents; comorbidities only add
/// distractor codes.
pub fn generate(config: &BenchmarkConfig) -> Benchmark {
    let mut rng = rng::stream(config.seed, "benchmark");
    let mut used = BTreeSet::new();
    let mut planned = Vec::new();
    let mut titles = BTreeMap::new();

    let targets = &TARGET_FAMILIES[..config.target_families.min(TARGET_FAMILIES.len())];
    for (head, name) in targets {
        let mut i = 0;
        let mut push = |role, primary, title: String, planned: &mut Vec<PlannedCode>| {
            let code = member_code(head, i);
            i += 1;
            titles.insert(code.clone(), title);
            planned.push(PlannedCode { code, role, primary });
        };
        let (tr, dv, te) = config.frequent_counts;
        push(MemberRole::Frequent, (tr, dv, te), format!("{name}, unspecified"), &mut planned);
        for k in 0..config.few_shot_per_family {
            let train = rng.random_range(1..=5);
            let q = QUALIFIERS[k % QUALIFIERS.len()];
            push(
                MemberRole::FewShot,
                (train, config.few_shot_eval.0, config.few_shot_eval.1),
                format!("{name} {q}"),
                &mut planned,
            );
        }
        for k in 0..config.zero_shot_per_family {
            let title = if k == 0 {
                format!("Other specified {}", name.to_lowercase())
            } else {
                format!("{name} {}", QUALIFIERS[(k + 4) % QUALIFIERS.len()])
            };
            push(
                MemberRole::ZeroShot,
                (0, config.zero_shot_eval.0, config.zero_shot_eval.1),
                title,
                &mut planned,
            );
        }
    }
    let distractors = &DISTRACTOR_FAMILIES[..config.distractor_families.min(DISTRACTOR_FAMILIES.len())];
    for (head, name) in distractors {
        for k in 0..config.distractor_members {
            let code = member_code(head, k);
            titles.insert(code.clone(), format!("{name} {}", QUALIFIERS[(k + 2) % QUALIFIERS.len()]));
            planned.push(PlannedCode {
                code,
                role: MemberRole::Distractor,
                primary: config.distractor_counts,
            });
        }
    }

    let mut signatures = BTreeMap::new();
    for p in &planned {
        let sig = (0..config.signature_tokens).map(|_| pseudo_word(&mut rng, &mut used)).collect();
        signatures.insert(p.code.clone(), sig);
    }
    let mut family_tokens = BTreeMap::new();
    for p in &planned {
        family_tokens
            .entry(family_of(&p.code))
            .or_insert_with(|| (0..config.family_tokens).map(|_| pseudo_word(&mut rng, &mut used)).collect::<Vec<_>>());
    }
    let noise = (0..config.noise_vocabulary).map(|_| pseudo_word(&mut rng, &mut used)).collect();
    let lexicon = Lexicon {
        signatures,
        family_tokens,
        noise,
        titles,
    };

    let distractor_codes: Vec<IcdCode> = planned
        .iter()
        .filter(|p| p.role == MemberRole::Distractor)
        .map(|p| p.code.clone())
        .collect();
    let mut primaries: BTreeMap<Split, Vec<IcdCode>> = BTreeMap::new();
    for p in &planned {
        let (tr, dv, te) = p.primary;
        for (split, n) in [(Split::Train, tr), (Split::Dev, dv), (Split::Test, te)] {
            primaries.entry(split).or_default().extend(std::iter::repeat_n(p.code.clone(), n));
        }
    }
    if let (Some(total), false) = (config.total_documents, distractor_codes.is_empty()) {
        let have: usize = primaries.values().map(Vec::len).sum();
        for _ in have..total {
            let c = distractor_codes[rng.random_range(0..distractor_codes.len())].clone();
            primaries.entry(Split::Train).or_default().push(c);
        }
    }

    let mut corpus = SplitCorpus::default();
    for split in Split::ALL {
        let mut labels = primaries.remove(&split).unwrap_or_default();
        rng::shuffle(&mut rng, &mut labels);
        let docs: Vec<Document> = labels
            .into_iter()
            .enumerate()
            .map(|(i, primary)| {
                let mut set = vec![primary.clone()];
                if !distractor_codes.is_empty() && rng.random_bool(config.comorbidity_rate) {
                    let extra = distractor_codes[rng.random_range(0..distractor_codes.len())].clone();
                    if family_of(&extra) != family_of(&primary) {
                        set.push(extra);
                    }
                }
                let text = lexicon.render(&set, config.noise_words, &mut rng);
                Document::new(format!("{split}-{i:05}"), text, set, Provenance::Real)
            })
            .collect();
        match split {
            Split::Train => corpus.train = docs,
            Split::Dev => corpus.dev = docs,
            Split::Test => corpus.test = docs,
        }
    }

    let mut descriptions = DescriptionIndex::new();
    for (code, title) in &lexicon.titles {
        descriptions.insert(code, title.clone());
    }
    Benchmark {
        config: *config,
        corpus,
        descriptions,
        lexicon,
        planned,
    }
}
