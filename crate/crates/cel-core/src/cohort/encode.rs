//! Feature encoding: BP bucketing and sequence layout.
//!
//! Layout: `[CLS] e_1 ... e_n  sex region smoking`. The CLS slot feeds the
//! causal heads; the trailing static slots put static information in the
//! last latent position, which feeds the VAE.

use serde::{Deserialize, Serialize};

use super::{PatientRecord, TokenId, Vocabulary};
use crate::error::{CelError, Result};

pub const BP_BUCKET_COUNT: usize = 16;

/// Lower edges of the systolic buckets after the first: [116, 121, ..., 186].
/// Bucket 0 is everything below 116 (values under 90 clamp down into it),
/// bucket 15 is >= 186.
const BP_EDGES: [f64; BP_BUCKET_COUNT - 1] = [
    116.0, 121.0, 126.0, 131.0, 136.0, 141.0, 146.0, 151.0, 156.0, 161.0, 166.0, 171.0, 176.0,
    181.0, 186.0,
];

/// Map a systolic blood pressure reading to its bucket index in [0, 16).
///
/// Buckets are half-open [lo, hi); a reading equal to an edge belongs to the
/// upper bucket.
pub fn bp_bucket_index(systolic: f64) -> Result<usize> {
    if !systolic.is_finite() || systolic <= 0.0 {
        return Err(CelError::validation(format!(
            "systolic reading must be a finite positive number, got {systolic}"
        )));
    }
    Ok(BP_EDGES.iter().take_while(|edge| systolic >= **edge).count())
}

/// Which static variable a trailing slot carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaticField {
    Sex,
    Region,
    Smoking,
}

impl StaticField {
    pub const ALL: [StaticField; 3] = [StaticField::Sex, StaticField::Region, StaticField::Smoking];
}

/// Model-ready view of one patient: aligned parallel arrays of length L.
///
/// Slots `0..n_temporal` are temporal (CLS then encounters); the remaining
/// slots carry one static variable each in `static_ids`. For temporal slots
/// `static_ids` is None; for static slots `code_ids` holds PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub code_ids: Vec<TokenId>,
    pub ages: Vec<u16>,
    pub years: Vec<u16>,
    pub positions: Vec<u32>,
    pub static_ids: Vec<Option<(StaticField, u8)>>,
    pub n_temporal: usize,
    /// Codes not found in the vocabulary, mapped to UNK.
    pub unknown_codes: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.code_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code_ids.is_empty()
    }

    pub fn n_static(&self) -> usize {
        self.len() - self.n_temporal
    }
}

/// Encode a patient with the full static block. See [`encode_patient_with`].
pub fn encode_patient(p: &PatientRecord, vocab: &Vocabulary, max_len: usize) -> Result<EncodedSequence> {
    encode_patient_with(p, vocab, max_len, None)
}

/// Encode a patient, optionally omitting one static field entirely
/// (confounder withholding: the slot is absent, not blanked).
///
/// Histories longer than the temporal capacity keep the most recent
/// encounters. Unknown codes map to UNK and are tallied.
pub fn encode_patient_with(
    p: &PatientRecord,
    vocab: &Vocabulary,
    max_len: usize,
    withhold: Option<StaticField>,
) -> Result<EncodedSequence> {
    let static_fields: Vec<StaticField> = StaticField::ALL
        .iter()
        .copied()
        .filter(|f| Some(*f) != withhold)
        .collect();
    let reserved = 1 + static_fields.len();
    if max_len <= reserved {
        return Err(CelError::config(format!(
            "max_len {max_len} leaves no room for encounters (needs > {reserved})"
        )));
    }
    let capacity = max_len - reserved;
    let kept = if p.encounters.len() > capacity {
        &p.encounters[p.encounters.len() - capacity..]
    } else {
        &p.encounters[..]
    };

    let len = 1 + kept.len() + static_fields.len();
    let mut code_ids = Vec::with_capacity(len);
    let mut ages = Vec::with_capacity(len);
    let mut years = Vec::with_capacity(len);
    let mut unknown_codes = 0;

    let first_age = kept.first().map_or(0, |e| e.age);
    let first_year = kept.first().map_or(0, |e| e.year);
    code_ids.push(Vocabulary::CLS);
    ages.push(first_age);
    years.push(first_year);

    for e in kept {
        if vocab.contains(e.code) {
            code_ids.push(e.code);
        } else {
            code_ids.push(Vocabulary::UNK);
            unknown_codes += 1;
        }
        ages.push(e.age);
        years.push(e.year);
    }

    let last_age = kept.last().map_or(first_age, |e| e.age);
    let last_year = kept.last().map_or(first_year, |e| e.year);
    let mut static_ids: Vec<Option<(StaticField, u8)>> = vec![None; 1 + kept.len()];
    for field in &static_fields {
        let value = match field {
            StaticField::Sex => p.statics.sex,
            StaticField::Region => p.statics.region,
            StaticField::Smoking => p.statics.smoking,
        };
        code_ids.push(Vocabulary::PAD);
        ages.push(last_age);
        years.push(last_year);
        static_ids.push(Some((*field, value)));
    }

    let positions = (0..len as u32).collect();
    Ok(EncodedSequence {
        code_ids,
        ages,
        years,
        positions,
        static_ids,
        n_temporal: 1 + kept.len(),
        unknown_codes,
    })
}
