//! Canonical data model for longitudinal event-sequence cohorts.
//!
//! A [`Cohort`] bundles a [`Vocabulary`] with a list of [`PatientRecord`]s.
//! Cohorts are immutable after construction and all operations here are pure,
//! so values can be shared freely across threads.

mod encode;
mod io;

pub use encode::{
    bp_bucket_index, encode_patient, encode_patient_with, EncodedSequence, StaticField,
    BP_BUCKET_COUNT,
};
pub use io::{read_cohort, write_cohort, write_cohort_to};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CelError, Result};

pub type TokenId = u32;
pub type GroupId = u32;

/// Upper bound on the region cardinality; region embedding tables and
/// one-hot feature blocks are sized against this.
pub const MAX_REGIONS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenCategory {
    Diagnosis,
    Medication,
    BpBucket,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDef {
    pub id: TokenId,
    pub label: String,
    pub category: TokenCategory,
}

/// Token table plus group memberships and the protected set (tokens that
/// define exposure or outcome and must never be drawn as replacements).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<TokenDef>,
    /// token-id -> group-id, for baseline featurization and code-set confounders.
    pub groups: BTreeMap<TokenId, GroupId>,
    pub protected: BTreeSet<TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const MASK: TokenId = 2;
    pub const CLS: TokenId = 3;
    pub const SEP: TokenId = 4;

    pub const SPECIAL_COUNT: usize = 5;

    pub fn new(
        tokens: Vec<TokenDef>,
        groups: BTreeMap<TokenId, GroupId>,
        protected: BTreeSet<TokenId>,
    ) -> Result<Self> {
        let vocab = Vocabulary { tokens, groups, protected };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let labels = ["PAD", "UNK", "MASK", "CLS", "SEP"];
        if self.tokens.len() < Self::SPECIAL_COUNT {
            return Err(CelError::validation("vocabulary must contain the special tokens"));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.id as usize != i {
                return Err(CelError::validation(format!(
                    "token ids must be dense from 0; found id {} at index {}",
                    tok.id, i
                )));
            }
            if i < Self::SPECIAL_COUNT {
                if tok.category != TokenCategory::Special || tok.label != labels[i] {
                    return Err(CelError::validation(format!(
                        "token {i} must be the special token {}",
                        labels[i]
                    )));
                }
            }
        }
        for id in self.groups.keys().chain(self.protected.iter()) {
            if *id as usize >= self.tokens.len() {
                return Err(CelError::validation(format!("token id {id} out of range")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn category(&self, id: TokenId) -> Option<TokenCategory> {
        self.tokens.get(id as usize).map(|t| t.category)
    }

    pub fn label(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|t| t.label.as_str())
    }

    pub fn group_of(&self, id: TokenId) -> Option<GroupId> {
        self.groups.get(&id).copied()
    }

    pub fn is_protected(&self, id: TokenId) -> bool {
        self.protected.contains(&id)
    }

    /// All token ids in `category`, in id order.
    pub fn tokens_in_category(&self, category: TokenCategory) -> Vec<TokenId> {
        self.tokens
            .iter()
            .filter(|t| t.category == category)
            .map(|t| t.id)
            .collect()
    }

    /// Token ids belonging to `group`, in id order.
    pub fn tokens_in_group(&self, group: GroupId) -> Vec<TokenId> {
        self.groups
            .iter()
            .filter(|(_, g)| **g == group)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Sorted list of distinct group ids.
    pub fn group_ids(&self) -> Vec<GroupId> {
        let set: BTreeSet<GroupId> = self.groups.values().copied().collect();
        set.into_iter().collect()
    }

    /// Token id of the bp-bucket with the given bucket index, if present.
    pub fn bp_token(&self, bucket: usize) -> Option<TokenId> {
        self.tokens_in_category(TokenCategory::BpBucket)
            .get(bucket)
            .copied()
    }
}

/// One timestamped clinical encounter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub code: TokenId,
    /// Age in whole years at the encounter.
    pub age: u16,
    /// Calendar year of the encounter.
    pub year: u16,
    /// Relative index within the patient history; strictly increasing.
    pub position: u32,
}

/// The three static variables modelled alongside the event sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticVars {
    pub sex: u8,
    pub region: u8,
    pub smoking: u8,
}

impl StaticVars {
    pub fn validate(&self) -> Result<()> {
        if self.sex > 1 {
            return Err(CelError::validation(format!("sex must be 0/1, got {}", self.sex)));
        }
        if self.smoking > 1 {
            return Err(CelError::validation(format!(
                "smoking must be 0/1, got {}",
                self.smoking
            )));
        }
        if self.region as usize >= MAX_REGIONS {
            return Err(CelError::validation(format!(
                "region must be < {MAX_REGIONS}, got {}",
                self.region
            )));
        }
        Ok(())
    }
}

/// One subject: statics, ordered encounters, exposure/outcome, and — in
/// synthetic mode — the counterfactual pair and the propensity lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub statics: StaticVars,
    pub encounters: Vec<Encounter>,
    /// Exposure flag t.
    pub exposure: u8,
    /// Factual outcome y.
    pub outcome: u8,
    /// (y0, y1): potential outcomes under control/treatment (synthetic mode).
    pub potential: Option<(u8, u8)>,
    /// Empirical P(T=1 | Z) for this patient's confounder stratum.
    pub lambda: Option<f64>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let pid = &self.id;
        self.statics
            .validate()
            .map_err(|e| CelError::validation(format!("patient {pid}: {e}")))?;
        if self.exposure > 1 || self.outcome > 1 {
            return Err(CelError::validation(format!(
                "patient {pid}: exposure/outcome must be 0/1"
            )));
        }
        if let Some((y0, y1)) = self.potential {
            if y0 > 1 || y1 > 1 {
                return Err(CelError::validation(format!(
                    "patient {pid}: potential outcomes must be 0/1"
                )));
            }
            let factual = if self.exposure == 1 { y1 } else { y0 };
            if factual != self.outcome {
                return Err(CelError::validation(format!(
                    "patient {pid}: outcome {} inconsistent with potential pair ({y0},{y1}) under t={}",
                    self.outcome, self.exposure
                )));
            }
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && (0.0..=1.0).contains(&l)) {
                return Err(CelError::validation(format!(
                    "patient {pid}: lambda {l} outside [0,1]"
                )));
            }
        }
        let mut prev: Option<&Encounter> = None;
        for e in &self.encounters {
            if let Some(p) = prev {
                if e.age < p.age {
                    return Err(CelError::validation(format!(
                        "patient {pid}: ages must be non-decreasing"
                    )));
                }
                if e.position <= p.position {
                    return Err(CelError::validation(format!(
                        "patient {pid}: positions must be strictly increasing"
                    )));
                }
            }
            prev = Some(e);
        }
        Ok(())
    }

    /// Keep the `max_n` most recent encounters. Exposure, outcome, and the
    /// counterfactual pair are untouched.
    pub fn truncated(&self, max_n: usize) -> PatientRecord {
        let mut out = self.clone();
        if out.encounters.len() > max_n {
            out.encounters.drain(..out.encounters.len() - max_n);
        }
        out
    }

    /// Re-base encounter positions to 0..n (canonical form for serialization).
    pub fn canonicalized(&self) -> PatientRecord {
        let mut out = self.clone();
        for (i, e) in out.encounters.iter_mut().enumerate() {
            e.position = i as u32;
        }
        out
    }

    /// Age at the end of the recorded history, or None for empty histories.
    pub fn baseline_age(&self) -> Option<u16> {
        self.encounters.last().map(|e| e.age)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub vocabulary: Vocabulary,
    pub patients: Vec<PatientRecord>,
    /// Generator config hash, or "ingested" for externally supplied files.
    pub provenance: String,
}

impl Cohort {
    pub fn new(vocabulary: Vocabulary, patients: Vec<PatientRecord>, provenance: String) -> Result<Self> {
        let cohort = Cohort { vocabulary, patients, provenance };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        let mut seen = HashSet::with_capacity(self.patients.len());
        for p in &self.patients {
            p.validate()?;
            if !seen.insert(p.id.as_str()) {
                return Err(CelError::validation(format!("duplicate patient id {}", p.id)));
            }
            for e in &p.encounters {
                if !self.vocabulary.contains(e.code) {
                    return Err(CelError::validation(format!(
                        "patient {}: code {} not in vocabulary",
                        p.id, e.code
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Canonical form: every patient's positions re-based to 0..n.
    pub fn canonicalized(&self) -> Cohort {
        Cohort {
            vocabulary: self.vocabulary.clone(),
            patients: self.patients.iter().map(|p| p.canonicalized()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Largest observed region value plus one (feature one-hot width).
    pub fn observed_regions(&self) -> usize {
        self.patients
            .iter()
            .map(|p| p.statics.region as usize + 1)
            .max()
            .unwrap_or(1)
    }
}
