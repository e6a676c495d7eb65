//! Cohort serialization: JSONL, one patient per line, vocabulary header on
//! line 1. UTF-8, LF line endings, decimal integers.
//!
//! The wire format carries no provenance; reading a file yields provenance
//! "ingested". Generated cohorts keep their config hash in the sidecar
//! truth file instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, Encounter, GroupId, PatientRecord, StaticVars, TokenDef, TokenId, Vocabulary};
use crate::error::{CelError, Result};

#[derive(Serialize, Deserialize)]
struct VocabHeader {
    tokens: Vec<TokenDef>,
    protected: BTreeSet<TokenId>,
    groups: BTreeMap<TokenId, GroupId>,
}

#[derive(Serialize, Deserialize)]
struct EncounterLine {
    code: TokenId,
    age: u16,
    year: u16,
}

#[derive(Serialize, Deserialize)]
struct PatientLine {
    id: String,
    sex: u8,
    region: u8,
    smoking: u8,
    encounters: Vec<EncounterLine>,
    t: u8,
    y: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    y0: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    y1: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    lambda: Option<f64>,
}

impl From<&PatientRecord> for PatientLine {
    fn from(p: &PatientRecord) -> Self {
        PatientLine {
            id: p.id.clone(),
            sex: p.statics.sex,
            region: p.statics.region,
            smoking: p.statics.smoking,
            encounters: p
                .encounters
                .iter()
                .map(|e| EncounterLine { code: e.code, age: e.age, year: e.year })
                .collect(),
            t: p.exposure,
            y: p.outcome,
            y0: p.potential.map(|(y0, _)| y0),
            y1: p.potential.map(|(_, y1)| y1),
            lambda: p.lambda,
        }
    }
}

impl PatientLine {
    fn into_record(self, line: usize) -> Result<PatientRecord> {
        let potential = match (self.y0, self.y1) {
            (Some(y0), Some(y1)) => Some((y0, y1)),
            (None, None) => None,
            _ => {
                return Err(CelError::Parse {
                    line,
                    msg: format!("patient {}: y0 and y1 must both be present or both absent", self.id),
                })
            }
        };
        Ok(PatientRecord {
            id: self.id,
            statics: StaticVars { sex: self.sex, region: self.region, smoking: self.smoking },
            encounters: self
                .encounters
                .into_iter()
                .enumerate()
                .map(|(i, e)| Encounter { code: e.code, age: e.age, year: e.year, position: i as u32 })
                .collect(),
            exposure: self.t,
            outcome: self.y,
            potential,
            lambda: self.lambda,
        })
    }
}

/// Serialize a cohort to any writer. Positions are re-based on write, so the
/// emitted file is always canonical.
pub fn write_cohort_to(cohort: &Cohort, mut w: impl Write) -> Result<()> {
    let header = VocabHeader {
        tokens: cohort.vocabulary.tokens.clone(),
        protected: cohort.vocabulary.protected.clone(),
        groups: cohort.vocabulary.groups.clone(),
    };
    let mut line = serde_json::to_string(&header)
        .map_err(|e| CelError::validation(format!("vocabulary serialization: {e}")))?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    for p in &cohort.patients {
        let canonical = p.canonicalized();
        let mut line = serde_json::to_string(&PatientLine::from(&canonical))
            .map_err(|e| CelError::validation(format!("patient {}: {e}", p.id)))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_cohort_to(cohort, BufWriter::new(file))
}

/// Parse a cohort from any reader, validating all invariants.
pub fn read_cohort_from(r: impl Read) -> Result<Cohort> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CelError::Parse { line: 1, msg: "empty file, expected vocabulary header".into() })??;
    let header: VocabHeader = serde_json::from_str(&header_line)
        .map_err(|e| CelError::Parse { line: 1, msg: format!("vocabulary header: {e}") })?;
    let vocabulary = Vocabulary::new(header.tokens, header.groups, header.protected)?;

    let mut patients = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PatientLine = serde_json::from_str(&line)
            .map_err(|e| CelError::Parse { line: line_no, msg: e.to_string() })?;
        patients.push(parsed.into_record(line_no)?);
    }
    Cohort::new(vocabulary, patients, "ingested".to_string())
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    read_cohort_from(File::open(path)?)
}
