//! Synthetic cohort generation with controlled confounding.
//!
//! Histories are synthesized (real EHR ingestion is out of scope), then
//! factual/counterfactual outcomes are sampled from
//! `y ~ Bernoulli(sigmoid(a*t + m*beta*(lambda + c)))` where `lambda` is the
//! empirical P(T=1|Z) of the patient's confounder stratum. With `p1 != p0`
//! and `beta > 0`, Z is associated with both exposure and outcome, so the
//! empirical risk ratio is confounded while the ground truth stays known.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{
    bp_bucket_index, Cohort, Encounter, GroupId, PatientRecord, StaticVars, TokenCategory,
    TokenDef, TokenId, Vocabulary, BP_BUCKET_COUNT, MAX_REGIONS,
};
use crate::error::{CelError, Result};
use crate::rng::{self, Domain};

/// Sizes of the generated vocabulary, per category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub diagnoses: usize,
    pub medications: usize,
    pub diagnosis_groups: usize,
    pub medication_groups: usize,
    pub regions: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            diagnoses: 60,
            medications: 24,
            diagnosis_groups: 10,
            medication_groups: 4,
            regions: 8,
        }
    }
}

/// Binary static attributes usable as persistent confounders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaticAttribute {
    Sex,
    Smoking,
}

/// The confounder Z: fixed at birth (a static attribute) or manifesting
/// mid-history (occurrence of at least one code from a diagnosis group).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Confounder {
    Persistent { attribute: StaticAttribute },
    Transient { group: GroupId },
}

/// Coefficients of the outcome-sampling function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coeffs {
    pub a: f64,
    pub m: f64,
    pub c: f64,
}

impl Default for Coeffs {
    /// c = -0.5 centres the confounding term at lambda 0.5, so balanced
    /// strata contribute no confounding.
    fn default() -> Self {
        Coeffs { a: 1.0, m: 1.0, c: -0.5 }
    }
}

/// P(T=1 | Z=1) and P(T=1 | Z=0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureAssoc {
    pub p1: f64,
    pub p0: f64,
}

impl Default for ExposureAssoc {
    fn default() -> Self {
        ExposureAssoc { p1: 0.8, p0: 0.2 }
    }
}

fn default_z_prevalence() -> f64 {
    0.5
}

fn default_proxy_strength() -> f64 {
    0.8
}

fn default_history_len_range() -> (usize, usize) {
    (8, 24)
}

/// Generator knobs. Serialized form mirrors this struct field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    #[serde(default)]
    pub vocab_spec: VocabSpec,
    pub confounder: Confounder,
    pub beta: f64,
    #[serde(default)]
    pub coeffs: Coeffs,
    #[serde(default)]
    pub exposure_assoc: ExposureAssoc,
    /// P(Z=1).
    #[serde(default = "default_z_prevalence")]
    pub z_prevalence: f64,
    /// Strength in [0,1) of the Z signal leaked into non-confounder codes
    /// and BP readings, so models can infer Z after withholding.
    #[serde(default = "default_proxy_strength")]
    pub proxy_strength: f64,
    #[serde(default = "default_history_len_range")]
    pub history_len_range: (usize, usize),
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 2 {
            return Err(CelError::config("n_patients must be >= 2"));
        }
        let ExposureAssoc { p1, p0 } = self.exposure_assoc;
        if !(0.0 < p1 && p1 < 1.0 && 0.0 < p0 && p0 < 1.0) {
            return Err(CelError::config("exposure probabilities must lie strictly in (0,1)"));
        }
        if !(0.0 < self.z_prevalence && self.z_prevalence < 1.0) {
            return Err(CelError::config("z_prevalence must lie strictly in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.proxy_strength) {
            return Err(CelError::config("proxy_strength must lie in [0,1)"));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(CelError::config("beta must be a finite non-negative number"));
        }
        let (lo, hi) = self.history_len_range;
        if lo > hi {
            return Err(CelError::config("history_len_range min must be <= max"));
        }
        let spec = &self.vocab_spec;
        if spec.diagnoses == 0 || spec.medications == 0 {
            return Err(CelError::config("vocabulary needs at least one diagnosis and medication"));
        }
        if spec.diagnosis_groups == 0
            || spec.medication_groups == 0
            || spec.diagnosis_groups > spec.diagnoses
            || spec.medication_groups > spec.medications
        {
            return Err(CelError::config("group counts must be in [1, token count per category]"));
        }
        if spec.regions == 0 || spec.regions > MAX_REGIONS {
            return Err(CelError::config(format!("regions must be in [1, {MAX_REGIONS}]")));
        }
        if let Confounder::Transient { group } = self.confounder {
            if group as usize >= spec.diagnosis_groups {
                return Err(CelError::config(format!(
                    "transient confounder group {group} outside diagnosis groups"
                )));
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON form, used for provenance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Ground-truth potential-outcome means and their ratio, computed from the
/// sampling probabilities rather than sampled counterfactuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rr: f64,
    pub ey1: f64,
    pub ey0: f64,
}

/// Ground truth plus Monte-Carlo sampled counterfactual means, for the
/// sidecar truth file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub truth: GroundTruth,
    pub sampled_ey1: f64,
    pub sampled_ey0: f64,
    pub sampled_rr: f64,
    pub config_hash: String,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Build the synthetic vocabulary for `spec`.
///
/// Token layout: 5 specials, then diagnoses, medications, and the 16 BP
/// buckets. Diagnoses/medications are assigned to groups round-robin.
/// Protected tokens (exposure/outcome analogs, never drawn as MEM
/// replacements) are medication group 0 and the last diagnosis group.
pub fn build_synth_vocab(spec: &VocabSpec) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    for (i, label) in ["PAD", "UNK", "MASK", "CLS", "SEP"].iter().enumerate() {
        tokens.push(TokenDef {
            id: i as TokenId,
            label: (*label).to_string(),
            category: TokenCategory::Special,
        });
    }
    let mut groups = BTreeMap::new();
    let mut protected = BTreeSet::new();

    let diag_base = tokens.len() as TokenId;
    for i in 0..spec.diagnoses {
        let id = diag_base + i as TokenId;
        let group = (i % spec.diagnosis_groups) as GroupId;
        tokens.push(TokenDef {
            id,
            label: format!("D{i:03}"),
            category: TokenCategory::Diagnosis,
        });
        groups.insert(id, group);
        if group as usize == spec.diagnosis_groups - 1 {
            protected.insert(id);
        }
    }
    let med_base = tokens.len() as TokenId;
    for i in 0..spec.medications {
        let id = med_base + i as TokenId;
        let group = (spec.diagnosis_groups + i % spec.medication_groups) as GroupId;
        tokens.push(TokenDef {
            id,
            label: format!("M{i:03}"),
            category: TokenCategory::Medication,
        });
        groups.insert(id, group);
        if i % spec.medication_groups == 0 {
            protected.insert(id);
        }
    }
    let bp_base = tokens.len() as TokenId;
    for i in 0..BP_BUCKET_COUNT {
        tokens.push(TokenDef {
            id: bp_base + i as TokenId,
            label: format!("BP{i:02}"),
            category: TokenCategory::BpBucket,
        });
    }
    Vocabulary::new(tokens, groups, protected)
}

/// Z-tilted group weights: Z=1 favours high-index groups, Z=0 low-index.
fn group_weights(n_groups: usize, z: u8, strength: f64) -> Vec<f64> {
    (0..n_groups)
        .map(|g| {
            let center = if n_groups > 1 {
                2.0 * (g as f64 / (n_groups - 1) as f64) - 1.0
            } else {
                0.0
            };
            let sign = if z == 1 { 1.0 } else { -1.0 };
            1.0 + strength * sign * center
        })
        .collect()
}

fn weighted_index(rng: &mut rand_chacha::ChaCha12Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut dart = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Generate histories, statics, and exposures. Outcomes are attached later
/// by [`sample_outcomes`]. Deterministic for a fixed seed.
pub fn gen_histories(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let vocab = build_synth_vocab(&cfg.vocab_spec)?;
    let spec = &cfg.vocab_spec;

    // Per-category token pools indexed by group, to make tilted sampling cheap.
    let diag_by_group: Vec<Vec<TokenId>> = (0..spec.diagnosis_groups)
        .map(|g| vocab.tokens_in_group(g as GroupId))
        .collect();
    let med_by_group: Vec<Vec<TokenId>> = (0..spec.medication_groups)
        .map(|g| vocab.tokens_in_group((spec.diagnosis_groups + g) as GroupId))
        .collect();

    let transient_group = match cfg.confounder {
        Confounder::Transient { group } => Some(group as usize),
        Confounder::Persistent { .. } => None,
    };

    let mut patients = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut rng = rng::stream(cfg.seed, Domain::History, i as u64);
        let z: u8 = u8::from(rng.random::<f64>() < cfg.z_prevalence);

        let sex = match cfg.confounder {
            Confounder::Persistent { attribute: StaticAttribute::Sex } => z,
            _ => u8::from(rng.random::<f64>() < 0.5),
        };
        let smoking = match cfg.confounder {
            Confounder::Persistent { attribute: StaticAttribute::Smoking } => z,
            _ => u8::from(rng.random::<f64>() < 0.3),
        };
        let region = rng.random_range(0..spec.regions) as u8;
        let statics = StaticVars { sex, region, smoking };

        let (lo, hi) = cfg.history_len_range;
        let n_enc = rng.random_range(lo..=hi);
        let mut age: u16 = rng.random_range(35..=60);
        let mut year: u16 = rng.random_range(1990..=2005);

        let diag_weights = group_weights(spec.diagnosis_groups, z, cfg.proxy_strength);
        let med_weights = group_weights(spec.medication_groups, z, cfg.proxy_strength);
        // BP proxy channel: Z shifts the systolic mean.
        let bp_mean = 128.0 + if z == 1 { 10.0 } else { -10.0 } * cfg.proxy_strength;

        let mut encounters = Vec::with_capacity(n_enc);
        for k in 0..n_enc {
            let code = match rng.random_range(0..100u32) {
                0..=54 => {
                    // diagnosis; a transient Z=0 patient never draws the
                    // designated group
                    loop {
                        let g = weighted_index(&mut rng, &diag_weights);
                        if transient_group == Some(g) && z == 0 {
                            continue;
                        }
                        let pool = &diag_by_group[g];
                        break pool[rng.random_range(0..pool.len())];
                    }
                }
                55..=84 => {
                    let g = weighted_index(&mut rng, &med_weights);
                    let pool = &med_by_group[g];
                    pool[rng.random_range(0..pool.len())]
                }
                _ => {
                    let systolic = (bp_mean + 14.0 * rng::gauss(&mut rng)).max(60.0);
                    let bucket = bp_bucket_index(systolic)?;
                    vocab.bp_token(bucket).expect("bp bucket token exists")
                }
            };
            encounters.push(Encounter { code, age, year, position: k as u32 });
            if rng.random::<f64>() < 0.35 {
                age = age.saturating_add(1);
                year = year.saturating_add(1);
            }
        }

        // Transient Z=1 patients are guaranteed at least one group code.
        if let Some(g) = transient_group {
            if z == 1 && !encounters.is_empty() {
                let has = encounters
                    .iter()
                    .any(|e| vocab.group_of(e.code) == Some(g as GroupId));
                if !has {
                    let slot = rng.random_range(0..encounters.len());
                    let pool = &diag_by_group[g];
                    encounters[slot].code = pool[rng.random_range(0..pool.len())];
                }
            }
        }

        let p_t = if z == 1 { cfg.exposure_assoc.p1 } else { cfg.exposure_assoc.p0 };
        let exposure = u8::from(rng.random::<f64>() < p_t);

        patients.push(PatientRecord {
            id: format!("p{i:06}"),
            statics,
            encounters,
            exposure,
            outcome: 0,
            potential: None,
            lambda: None,
        });
    }

    Cohort::new(build_synth_vocab(&cfg.vocab_spec)?, patients, cfg.hash())
}

/// Evaluate Z for one patient under the given confounder definition.
pub fn confounder_value(p: &PatientRecord, vocab: &Vocabulary, confounder: &Confounder) -> u8 {
    match confounder {
        Confounder::Persistent { attribute: StaticAttribute::Sex } => p.statics.sex,
        Confounder::Persistent { attribute: StaticAttribute::Smoking } => p.statics.smoking,
        Confounder::Transient { group } => u8::from(
            p.encounters
                .iter()
                .any(|e| vocab.group_of(e.code) == Some(*group)),
        ),
    }
}

/// Attach the empirical propensity lambda_i = P(T=1 | Z=Z_i) to every patient.
pub fn compute_lambda(cohort: &mut Cohort, confounder: &Confounder) -> Result<()> {
    let mut count = [0usize; 2];
    let mut treated = [0usize; 2];
    let zs: Vec<u8> = cohort
        .patients
        .iter()
        .map(|p| confounder_value(p, &cohort.vocabulary, confounder))
        .collect();
    for (p, z) in cohort.patients.iter().zip(&zs) {
        count[*z as usize] += 1;
        treated[*z as usize] += usize::from(p.exposure == 1);
    }
    for z in 0..2 {
        if count[z] == 0 {
            return Err(CelError::validation(format!(
                "confounder stratum Z={z} is empty; lambda undefined"
            )));
        }
    }
    let lambda = [
        treated[0] as f64 / count[0] as f64,
        treated[1] as f64 / count[1] as f64,
    ];
    for (p, z) in cohort.patients.iter_mut().zip(&zs) {
        p.lambda = Some(lambda[*z as usize]);
    }
    Ok(())
}

/// Per-arm outcome probability under the sampling function.
pub fn outcome_prob(coeffs: &Coeffs, beta: f64, lambda: f64, t: u8) -> f64 {
    sigmoid(coeffs.a * f64::from(t) + coeffs.m * beta * (lambda + coeffs.c))
}

/// Draw (y0, y1) for every patient and set the factual outcome.
/// Draws are independent across arms and patients, each from its own stream.
pub fn sample_outcomes(cohort: &mut Cohort, cfg: &SynthConfig) -> Result<()> {
    for (i, p) in cohort.patients.iter_mut().enumerate() {
        let lambda = p.lambda.ok_or_else(|| {
            CelError::validation(format!("patient {}: lambda not attached", p.id))
        })?;
        let mut rng = rng::stream(cfg.seed, Domain::Outcome, i as u64);
        let p1 = outcome_prob(&cfg.coeffs, cfg.beta, lambda, 1);
        let p0 = outcome_prob(&cfg.coeffs, cfg.beta, lambda, 0);
        let y1 = u8::from(rng.random::<f64>() < p1);
        let y0 = u8::from(rng.random::<f64>() < p0);
        p.potential = Some((y0, y1));
        p.outcome = if p.exposure == 1 { y1 } else { y0 };
    }
    Ok(())
}

/// Ground truth from the expectation of the sampling probabilities over the
/// cohort's lambda distribution (no Monte-Carlo noise).
pub fn ground_truth_rr(cohort: &Cohort, cfg: &SynthConfig) -> Result<GroundTruth> {
    if cohort.is_empty() {
        return Err(CelError::Undefined("ground truth of an empty cohort".into()));
    }
    let mut ey1 = 0.0;
    let mut ey0 = 0.0;
    for p in &cohort.patients {
        let lambda = p.lambda.ok_or_else(|| {
            CelError::validation(format!("patient {}: lambda not attached", p.id))
        })?;
        ey1 += outcome_prob(&cfg.coeffs, cfg.beta, lambda, 1);
        ey0 += outcome_prob(&cfg.coeffs, cfg.beta, lambda, 0);
    }
    let n = cohort.len() as f64;
    let (ey1, ey0) = (ey1 / n, ey0 / n);
    Ok(GroundTruth { rr: ey1 / ey0, ey1, ey0 })
}

/// Empirical risk ratio from factual outcomes.
pub fn empirical_rr(cohort: &Cohort) -> Result<f64> {
    let mut n = [0usize; 2];
    let mut events = [0usize; 2];
    for p in &cohort.patients {
        n[p.exposure as usize] += 1;
        events[p.exposure as usize] += usize::from(p.outcome == 1);
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(CelError::Undefined("empirical RR needs both exposure groups".into()));
    }
    if events[0] == 0 {
        return Err(CelError::Undefined("empirical RR undefined with zero control events".into()));
    }
    let risk1 = events[1] as f64 / n[1] as f64;
    let risk0 = events[0] as f64 / n[0] as f64;
    Ok(risk1 / risk0)
}

/// Z-standardized stratified risk ratio with a delta-method Monte-Carlo SE.
/// This is the generator's self-consistency oracle: it adjusts exactly for Z
/// by direct counting, independent of any model.
pub fn standardized_rr_by_z(cohort: &Cohort, confounder: &Confounder) -> Result<(f64, f64)> {
    let mut n = [[0usize; 2]; 2]; // [z][t]
    let mut events = [[0usize; 2]; 2];
    for p in &cohort.patients {
        let z = confounder_value(p, &cohort.vocabulary, confounder) as usize;
        let t = p.exposure as usize;
        n[z][t] += 1;
        events[z][t] += usize::from(p.outcome == 1);
    }
    let total = cohort.len() as f64;
    let mut ey = [0.0f64; 2];
    let mut var = [0.0f64; 2];
    for z in 0..2 {
        let pi = (n[z][0] + n[z][1]) as f64 / total;
        for t in 0..2 {
            if n[z][t] == 0 {
                return Err(CelError::Undefined(format!(
                    "stratified RR needs patients in cell (Z={z}, T={t})"
                )));
            }
            let risk = events[z][t] as f64 / n[z][t] as f64;
            ey[t] += pi * risk;
            var[t] += pi * pi * risk * (1.0 - risk) / n[z][t] as f64;
        }
    }
    if ey[0] <= 0.0 {
        return Err(CelError::Undefined("stratified RR undefined with zero control risk".into()));
    }
    let rr = ey[1] / ey[0];
    let se = rr * (var[1] / (ey[1] * ey[1]) + var[0] / (ey[0] * ey[0])).sqrt();
    Ok((rr, se))
}

/// Full generation pipeline: histories, lambda, outcomes, ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<(Cohort, TruthSidecar)> {
    let mut cohort = gen_histories(cfg)?;
    compute_lambda(&mut cohort, &cfg.confounder)?;
    sample_outcomes(&mut cohort, cfg)?;
    let truth = ground_truth_rr(&cohort, cfg)?;
    let n = cohort.len() as f64;
    let sampled_ey1 = cohort
        .patients
        .iter()
        .map(|p| f64::from(p.potential.unwrap().1))
        .sum::<f64>()
        / n;
    let sampled_ey0 = cohort
        .patients
        .iter()
        .map(|p| f64::from(p.potential.unwrap().0))
        .sum::<f64>()
        / n;
    let sidecar = TruthSidecar {
        truth,
        sampled_ey1,
        sampled_ey0,
        sampled_rr: if sampled_ey0 > 0.0 { sampled_ey1 / sampled_ey0 } else { f64::NAN },
        config_hash: cfg.hash(),
    };
    Ok((cohort, sidecar))
}
