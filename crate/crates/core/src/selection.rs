//! Picks the code families and low-population codes that augmentation
//! targets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PopulationIndex, Split, StrataThresholds};
use crate::icd::{family_of, FamilyId, IcdCode};
use crate::rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("requested {requested} families but only {available} are eligible")]
    InsufficientFamilies { requested: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberCounts {
    pub code: IcdCode,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl MemberCounts {
    /// Absent from training but present in the test split.
    pub fn is_zero_shot(&self) -> bool {
        self.train == 0 && self.test > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyProfile {
    pub family: FamilyId,
    pub members: Vec<MemberCounts>,
    pub has_frequent: bool,
    pub has_zero_shot: bool,
}

impl FamilyProfile {
    fn build(family: FamilyId, members: Vec<MemberCounts>, thresholds: StrataThresholds) -> Self {
        let has_frequent = members.iter().any(|m| m.train >= thresholds.frequent_min);
        let has_zero_shot = members.iter().any(MemberCounts::is_zero_shot);
        FamilyProfile {
            family,
            members,
            has_frequent,
            has_zero_shot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GenerationCodeSet {
    pub families: Vec<FamilyId>,
    pub few_shot_codes: BTreeSet<IcdCode>,
    pub zero_shot_codes: BTreeSet<IcdCode>,
}

impl GenerationCodeSet {
    pub fn all(&self) -> BTreeSet<IcdCode> {
        self.few_shot_codes
            .union(&self.zero_shot_codes)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.few_shot_codes.len() + self.zero_shot_codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Codes present in all three splits whose train count is few-shot.
pub fn candidate_codes(index: &PopulationIndex, thresholds: StrataThresholds) -> BTreeSet<IcdCode> {
    index
        .train
        .iter()
        .filter(|(code, _)| index.count(Split::Dev, code) > 0 && index.count(Split::Test, code) > 0)
        .filter(|(_, n)| (1..=thresholds.few_shot_max).contains(*n))
        .map(|(code, _)| code.clone())
        .collect()
}

/// Observed members of every family, with their per-split counts.
pub fn family_members(index: &PopulationIndex) -> BTreeMap<FamilyId, Vec<MemberCounts>> {
    let mut families: BTreeMap<FamilyId, Vec<MemberCounts>> = BTreeMap::new();
    for code in index.codes() {
        families.entry(family_of(&code)).or_default().push(MemberCounts {
            train: index.count(Split::Train, &code),
            dev: index.count(Split::Dev, &code),
            test: index.count(Split::Test, &code),
            code,
        });
    }
    families
}

/// Families of the candidates that hold both a frequent and a zero-shot
/// member.
pub fn eligible_families(
    candidates: &BTreeSet<IcdCode>,
    index: &PopulationIndex,
    thresholds: StrataThresholds,
) -> Vec<FamilyProfile> {
    let heads: BTreeSet<FamilyId> = candidates.iter().map(family_of).collect();
    let mut members = family_members(index);
    heads
        .into_iter()
        .filter_map(|head| {
            let m = members.remove(&head)?;
            let profile = FamilyProfile::build(head, m, thresholds);
            (profile.has_frequent && profile.has_zero_shot).then_some(profile)
        })
        .collect()
}

/// Uniform sample of `k` families without replacement, returned sorted.
pub fn sample_families(
    profiles: &[FamilyProfile],
    k: usize,
    seed: u64,
) -> Result<Vec<FamilyId>, SelectionError> {
    if k > profiles.len() {
        return Err(SelectionError::InsufficientFamilies {
            requested: k,
            available: profiles.len(),
        });
    }
    let mut heads: Vec<FamilyId> = profiles.iter().map(|p| p.family.clone()).collect();
    heads.sort();
    let mut rng = rng::stream(seed, "sample_families");
    let mut chosen: Vec<FamilyId> = rng::sample_indices(&mut rng, heads.len(), k)
        .into_iter()
        .map(|i| heads[i].clone())
        .collect();
    chosen.sort();
    Ok(chosen)
}

/// Members of the chosen families with train count below `cap`.
pub fn generation_codes(families: &[FamilyId], index: &PopulationIndex, cap: usize) -> GenerationCodeSet {
    let members = family_members(index);
    let mut set = GenerationCodeSet {
        families: families.to_vec(),
        ..Default::default()
    };
    for family in families {
        for m in members.get(family).into_iter().flatten() {
            if m.train >= cap {
                continue;
            }
            if m.train > 0 {
                set.few_shot_codes.insert(m.code.clone());
            } else if m.test > 0 {
                set.zero_shot_codes.insert(m.code.clone());
            }
        }
    }
    set
}

/// Audit trail of one selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub toolkit_version: String,
    pub rng_algorithm: String,
    pub seed: u64,
    pub thresholds: StrataThresholds,
    pub family_sample_size: usize,
    pub generation_cap: usize,
    pub candidates: BTreeSet<IcdCode>,
    pub eligible_families: Vec<FamilyProfile>,
    pub chosen_families: Vec<FamilyId>,
    pub generation_codes: GenerationCodeSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub thresholds: StrataThresholds,
    pub family_sample_size: usize,
    pub generation_cap: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            thresholds: StrataThresholds::default(),
            family_sample_size: 10,
            generation_cap: 100,
            seed: 0,
        }
    }
}

/// Runs candidate → eligible → sample → generation codes.
///
/// When fewer families are eligible than requested, all eligible families
/// are used only if `allow_fewer` is set.
pub fn select(
    index: &PopulationIndex,
    config: &SelectionConfig,
    allow_fewer: bool,
) -> Result<SelectionManifest, SelectionError> {
    let candidates = candidate_codes(index, config.thresholds);
    let eligible = eligible_families(&candidates, index, config.thresholds);
    let k = if allow_fewer {
        config.family_sample_size.min(eligible.len())
    } else {
        config.family_sample_size
    };
    let chosen = sample_families(&eligible, k, config.seed)?;
    let generation = generation_codes(&chosen, index, config.generation_cap);
    Ok(SelectionManifest {
        toolkit_version: crate::VERSION.to_string(),
        rng_algorithm: rng::RNG_ALGORITHM.to_string(),
        seed: config.seed,
        thresholds: config.thresholds,
        family_sample_size: config.family_sample_size,
        generation_cap: config.generation_cap,
        candidates,
        eligible_families: eligible,
        chosen_families: chosen,
        generation_codes: generation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> IcdCode {
        IcdCode::parse_any(s).unwrap()
    }

    fn index<S: AsRef<str>>(rows: &[(S, usize, usize, usize)]) -> PopulationIndex {
        let mut idx = PopulationIndex::default();
        for (c, tr, dv, te) in rows {
            let c = c.as_ref();
            for (map, n) in [(&mut idx.train, tr), (&mut idx.dev, dv), (&mut idx.test, te)] {
                if *n > 0 {
                    map.insert(code(c), *n);
                }
            }
        }
        idx
    }

    #[test]
    fn candidates_require_all_splits() {
        let idx = index(&[("A011", 3, 1, 2), ("A012", 3, 0, 2), ("A013", 6, 1, 1)]);
        let c = candidate_codes(&idx, StrataThresholds::default());
        assert_eq!(c, [code("A011")].into());
    }

    #[test]
    fn eligibility_needs_frequent_and_zero_shot() {
        let idx = index(&[
            ("A011", 120, 5, 5),
            ("A012", 3, 1, 1),
            ("A013", 0, 0, 2),
            ("B011", 100, 5, 5),
            ("B012", 3, 1, 1),
            ("B013", 0, 0, 1),
        ]);
        let th = StrataThresholds::default();
        let c = candidate_codes(&idx, th);
        let e = eligible_families(&c, &idx, th);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].family.as_str(), "A01");
        assert!(e[0].members.len() >= 2);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let idx = index(
            &(0..16)
                .flat_map(|i| {
                    let f = format!("K{:02}", i);
                    vec![(f.clone() + "0", 150, 1, 1), (f.clone() + "1", 2, 1, 1), (f + "2", 0, 0, 1)]
                })
                .collect::<Vec<_>>(),
        );
        let th = StrataThresholds::default();
        let e = eligible_families(&candidate_codes(&idx, th), &idx, th);
        assert_eq!(e.len(), 16);
        let a = sample_families(&e, 10, 42).unwrap();
        let b = sample_families(&e, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let all = sample_families(&e, 16, 3).unwrap();
        assert_eq!(all, e.iter().map(|p| p.family.clone()).collect::<Vec<_>>());
        assert_eq!(
            sample_families(&e, 17, 3),
            Err(SelectionError::InsufficientFamilies { requested: 17, available: 16 })
        );
    }

    #[test]
    fn generation_code_partition() {
        let idx = index(&[("A011", 120, 1, 1), ("A012", 4, 1, 1), ("A013", 0, 0, 1), ("A014", 0, 2, 0)]);
        let g = generation_codes(&[FamilyId::new("A01")], &idx, 100);
        assert_eq!(g.few_shot_codes, [code("A012")].into());
        assert_eq!(g.zero_shot_codes, [code("A013")].into());
        assert_eq!(g.len(), g.all().len());

        let none = index(&[("C011", 150, 1, 1)]);
        assert!(generation_codes(&[FamilyId::new("C01")], &none, 100).is_empty());
    }
}
