//! Prompt construction for synthetic-note generation and for coding real
//! notes, plus the decoding-parameter policy.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::DescriptionIndex;
use crate::postprocess::scrub_code_mentions;
use crate::silver::SilverRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("silver record {0} has an empty label set")]
    EmptyLabelSet(String),
    #[error("note text is empty")]
    EmptyNote,
    #[error("template is missing mandatory section [[{0}]]")]
    MissingSection(&'static str),
    #[error("template line {line}: {message}")]
    Template { line: usize, message: String },
    #[error("cannot read template: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub presence_penalty: Option<f64>,
    /// Context budget shared by prompt and completion.
    pub max_total_tokens: usize,
}

/// Context window of the generation model; prompt and output share it.
pub const MAX_TOTAL_TOKENS: usize = 4096;
pub const UNIQUE_TEMPERATURE: f64 = 0.0;
pub const DUPLICATE_TEMPERATURE: f64 = 0.1;

impl DecodingParams {
    /// All sampling parameters at zero, for deterministic coding responses.
    pub fn deterministic() -> Self {
        DecodingParams {
            temperature: 0.0,
            top_p: 0.0,
            frequency_penalty: Some(0.0),
            presence_penalty: Some(0.0),
            max_total_tokens: MAX_TOTAL_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub messages: Vec<Message>,
    pub decoding: DecodingParams,
    pub template_version: String,
    /// Template sections rendered into the prompt, in order.
    pub sections: Vec<String>,
}

impl PromptSpec {
    /// Rough token count of the messages (4 characters per token plus a
    /// per-message overhead).
    pub fn estimated_prompt_tokens(&self) -> usize {
        self.messages
            .iter()
            .map(|m| m.content.chars().count().div_ceil(4) + 4)
            .sum::<usize>()
            + 3
    }

    /// Completion tokens left after the prompt.
    pub fn completion_budget(&self) -> usize {
        self.decoding
            .max_total_tokens
            .saturating_sub(self.estimated_prompt_tokens())
    }
}

/// Sections every generation template must define, one per constraint.
pub const MANDATORY_SECTIONS: [&str; 9] = [
    "intro",
    "length",
    "social_family_history",
    "anonymisation",
    "no_code_mentions",
    "numeric_values",
    "specific_other",
    "omit_unspecified",
    "coding_format",
];

const DEFAULT_TEMPLATE: &str = include_str!("../templates/generation_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTemplate {
    version: String,
    system: Option<String>,
    sections: Vec<(String, String)>,
}

impl GenerationTemplate {
    pub fn builtin() -> Self {
        Self::parse("v1", DEFAULT_TEMPLATE).expect("built-in template is valid")
    }

    pub fn load(path: &Path, version: &str) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(e.to_string()))?;
        Self::parse(version, &text)
    }

    /// Resolves a template version: `v1` is built in, anything else is read
    /// from `<dir>/generation_<version>.txt`.
    pub fn by_version(version: &str, dir: Option<&Path>) -> Result<Self, PromptError> {
        match (version, dir) {
            ("v1", _) => Ok(Self::builtin()),
            (v, Some(dir)) => Self::load(&dir.join(format!("generation_{v}.txt")), v),
            (v, None) => Err(PromptError::Io(format!("no template directory for version {v}"))),
        }
    }

    pub fn parse(version: &str, text: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(String, String)> = Vec::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let finish = |cur: Option<(String, Vec<&str>)>, out: &mut Vec<(String, String)>| {
            if let Some((name, lines)) = cur {
                out.push((name, lines.join("\n").trim().to_string()));
            }
        };
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') {
                continue;
            }
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")) {
                finish(current.take(), &mut sections);
                if sections.iter().any(|(n, _)| n == name) {
                    return Err(PromptError::Template {
                        line: i + 1,
                        message: format!("duplicate section {name}"),
                    });
                }
                current = Some((name.to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !trimmed.is_empty() {
                return Err(PromptError::Template {
                    line: i + 1,
                    message: "text outside of a section".into(),
                });
            }
        }
        finish(current, &mut sections);
        for required in MANDATORY_SECTIONS {
            match sections.iter().find(|(n, _)| n == required) {
                Some((_, body)) if !body.is_empty() => {}
                _ => return Err(PromptError::MissingSection(required)),
            }
        }
        let system = sections
            .iter()
            .position(|(n, _)| n == "system")
            .map(|i| sections.remove(i).1);
        Ok(GenerationTemplate {
            version: version.to_string(),
            system,
            sections,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

/// Temperature 0 for the first occurrence of a label set, 0.1 for
/// duplicates so repeated prompts still vary.
pub fn decoding_for(record: &SilverRecord) -> DecodingParams {
    DecodingParams {
        temperature: if record.is_duplicate {
            DUPLICATE_TEMPERATURE
        } else {
            UNIQUE_TEMPERATURE
        },
        top_p: 1.0,
        frequency_penalty: None,
        presence_penalty: None,
        max_total_tokens: MAX_TOTAL_TOKENS,
    }
}

fn is_other_description(title: &str) -> bool {
    title
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w.eq_ignore_ascii_case("other"))
}

/// Result of rendering a generation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub spec: PromptSpec,
    /// Codes rendered with a placeholder title.
    pub placeholders: Vec<String>,
}

pub fn build_generation_prompt(
    record: &SilverRecord,
    index: &DescriptionIndex,
    template: &GenerationTemplate,
) -> Result<RenderedPrompt, PromptError> {
    if record.label_set.is_empty() {
        return Err(PromptError::EmptyLabelSet(record.plan_id.clone()));
    }
    let mut placeholders = Vec::new();
    let mut titles: BTreeMap<&str, String> = BTreeMap::new();
    for code in &record.label_set {
        let resolved = index.resolve(code);
        if resolved.placeholder {
            tracing::warn!(code = %code, plan_id = %record.plan_id, "no description, using placeholder");
            placeholders.push(code.normalized().to_string());
        }
        titles.insert(code.normalized(), scrub_code_mentions(&resolved.title));
    }
    let conditions: Vec<String> = record
        .label_set
        .iter()
        .map(|c| format!("- {}", titles[c.normalized()]))
        .collect();
    let others: Vec<&String> = titles.values().filter(|t| is_other_description(t)).collect();
    let other_concepts = if others.is_empty() {
        String::new()
    } else {
        let quoted: Vec<String> = others.iter().map(|t| format!("\"{t}\"")).collect();
        format!(" This applies to: {}.", quoted.join("; "))
    };

    let mut body = Vec::with_capacity(template.sections.len());
    let mut rendered_sections = Vec::with_capacity(template.sections.len());
    for (name, text) in &template.sections {
        body.push(
            text.replace("{{conditions}}", &conditions.join("\n"))
                .replace("{{other_concepts}}", &other_concepts),
        );
        rendered_sections.push(name.clone());
    }
    let mut messages = Vec::new();
    if let Some(system) = &template.system {
        messages.push(Message {
            role: Role::System,
            content: system.clone(),
        });
    }
    messages.push(Message {
        role: Role::User,
        content: body.join("\n"),
    });
    Ok(RenderedPrompt {
        spec: PromptSpec {
            messages,
            decoding: decoding_for(record),
            template_version: template.version.clone(),
            sections: rendered_sections,
        },
        placeholders,
    })
}

pub const CODING_TEMPLATE_VERSION: &str = "coding-v1";

const CODING_SYSTEM_PROMPT: &str = "You are a clinician assigning ICD-10 diagnosis codes to clinical notes. \
Read the clinical note supplied by the user and identify every diagnosis it supports. \
Answer only with a JSON array of objects. Each object must have exactly two keys: \
\"diagnosis\" (the diagnosis in words) and \"icd_code\" (its ICD-10-CM code). \
Do not add any text before or after the JSON array.";

pub fn build_coding_prompt(note_text: &str) -> Result<PromptSpec, PromptError> {
    if note_text.trim().is_empty() {
        return Err(PromptError::EmptyNote);
    }
    Ok(PromptSpec {
        messages: vec![
            Message {
                role: Role::System,
                content: CODING_SYSTEM_PROMPT.to_string(),
            },
            Message {
                role: Role::User,
                content: note_text.to_string(),
            },
        ],
        decoding: DecodingParams::deterministic(),
        template_version: CODING_TEMPLATE_VERSION.to_string(),
        sections: vec!["system".into(), "note".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icd::IcdCode;
    use crate::postprocess::find_code_mentions;
    use crate::silver::RecordKind;

    fn code(s: &str) -> IcdCode {
        IcdCode::parse_any(s).unwrap()
    }

    fn record(labels: &[&str], dup: bool) -> SilverRecord {
        SilverRecord {
            plan_id: "p".into(),
            kind: RecordKind::FewShot,
            source_doc_id: "s".into(),
            target_code: code(labels[0]),
            label_set: labels.iter().map(|l| code(l)).collect(),
            dropped_labels: vec![],
            substitution: None,
            is_duplicate: dup,
        }
    }

    fn index() -> DescriptionIndex {
        let mut idx = DescriptionIndex::new();
        idx.insert(&code("E10.21"), "Type 1 diabetes mellitus with diabetic nephropathy");
        idx.insert(&code("E10.69"), "Type 1 diabetes mellitus with other specified complication");
        idx.insert(&code("G43.909"), "Migraine, unspecified, not intractable, without status migrainosus");
        idx
    }

    #[test]
    fn generation_prompt_has_every_constraint() {
        let t = GenerationTemplate::builtin();
        let p = build_generation_prompt(&record(&["E1021"], false), &index(), &t).unwrap();
        for s in MANDATORY_SECTIONS {
            assert!(p.spec.sections.iter().any(|x| x == s), "missing {s}");
        }
        let user = &p.spec.messages.last().unwrap().content;
        assert!(user.contains("Type 1 diabetes mellitus with diabetic nephropathy"));
        assert!(user.contains("4,000 words"));
        assert!(user.contains("square brackets") || user.contains("[CODE]"));
        assert!(find_code_mentions(user).is_empty());
        assert!(p.placeholders.is_empty());
    }

    #[test]
    fn other_descriptions_are_called_out() {
        let t = GenerationTemplate::builtin();
        let p = build_generation_prompt(&record(&["E1069", "G43909"], false), &index(), &t).unwrap();
        let user = &p.spec.messages.last().unwrap().content;
        assert!(user.contains("This applies to: \"Type 1 diabetes mellitus with other specified complication\""));
        let plain = build_generation_prompt(&record(&["E1021"], false), &index(), &t).unwrap();
        assert!(!plain.spec.messages.last().unwrap().content.contains("This applies to"));
    }

    #[test]
    fn identical_label_sets_give_identical_prompts() {
        let t = GenerationTemplate::builtin();
        let a = build_generation_prompt(&record(&["E1021", "G43909"], false), &index(), &t).unwrap();
        let mut r = record(&["E1021", "G43909"], false);
        r.plan_id = "other".into();
        r.source_doc_id = "elsewhere".into();
        let b = build_generation_prompt(&r, &index(), &t).unwrap();
        assert_eq!(a.spec, b.spec);
    }

    #[test]
    fn empty_labels_and_placeholders() {
        let t = GenerationTemplate::builtin();
        let mut r = record(&["E1021"], false);
        r.label_set.clear();
        assert_eq!(
            build_generation_prompt(&r, &index(), &t),
            Err(PromptError::EmptyLabelSet("p".into()))
        );
        let p = build_generation_prompt(&record(&["H8110"], false), &index(), &t).unwrap();
        assert_eq!(p.placeholders, vec!["H8110".to_string()]);
        assert!(find_code_mentions(&p.spec.messages[1].content).is_empty());
    }

    #[test]
    fn decoding_policy() {
        let unique = decoding_for(&record(&["E1021"], false));
        let dup = decoding_for(&record(&["E1021"], true));
        assert_eq!(unique.temperature, 0.0);
        assert_eq!(dup.temperature, 0.1);
        assert_eq!(unique.max_total_tokens, 4096);
        assert_eq!(dup.max_total_tokens, 4096);
    }

    #[test]
    fn coding_prompt_contract() {
        let p = build_coding_prompt("Patient with anemia.").unwrap();
        assert!(p.messages[0].content.contains("\"diagnosis\""));
        assert!(p.messages[0].content.contains("\"icd_code\""));
        let d = p.decoding;
        assert_eq!(
            (d.temperature, d.top_p, d.frequency_penalty, d.presence_penalty),
            (0.0, 0.0, Some(0.0), Some(0.0))
        );
        assert_eq!(build_coding_prompt("  "), Err(PromptError::EmptyNote));
        assert_eq!(build_coding_prompt("x").unwrap(), build_coding_prompt("x").unwrap());
    }

    #[test]
    fn template_validation() {
        let broken = "[[intro]]\nhello\n[[length]]\nx\n";
        assert_eq!(
            GenerationTemplate::parse("t", broken),
            Err(PromptError::MissingSection("social_family_history"))
        );
        assert!(matches!(
            GenerationTemplate::parse("t", "stray\n[[intro]]\n"),
            Err(PromptError::Template { line: 1, .. })
        ));
    }
}
