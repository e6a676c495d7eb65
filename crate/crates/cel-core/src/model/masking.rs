//! Masked-reconstruction input perturbation.
//!
//! Temporal slots are independently masked, replaced, or kept-but-labeled;
//! replacements are drawn uniformly from same-category tokens outside the
//! protected set. Static slots are masked for the VAE with their own
//! probability.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::cohort::{EncodedSequence, StaticField, TokenCategory, TokenId, Vocabulary};

use super::config::{ModelConfig, REGION_MASK_ID, SEX_MASK_ID, SMOKING_MASK_ID};

/// Sentinel in label arrays for unperturbed slots.
pub const NO_LABEL: TokenId = TokenId::MAX;

/// Per-category pools of replacement candidates (non-protected tokens),
/// built once per vocabulary.
#[derive(Debug, Clone)]
pub struct ReplacementPool {
    diagnosis: Vec<TokenId>,
    medication: Vec<TokenId>,
    bp_bucket: Vec<TokenId>,
}

impl ReplacementPool {
    pub fn new(vocab: &Vocabulary) -> Self {
        let pool = |cat: TokenCategory| {
            vocab
                .tokens_in_category(cat)
                .into_iter()
                .filter(|id| !vocab.is_protected(*id))
                .collect()
        };
        ReplacementPool {
            diagnosis: pool(TokenCategory::Diagnosis),
            medication: pool(TokenCategory::Medication),
            bp_bucket: pool(TokenCategory::BpBucket),
        }
    }

    fn candidates(&self, cat: TokenCategory) -> &[TokenId] {
        match cat {
            TokenCategory::Diagnosis => &self.diagnosis,
            TokenCategory::Medication => &self.medication,
            TokenCategory::BpBucket => &self.bp_bucket,
            TokenCategory::Special => &[],
        }
    }
}

/// An encoded sequence with reconstruction targets.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    pub input: EncodedSequence,
    /// Original code at perturbed temporal slots, NO_LABEL elsewhere.
    pub temporal_labels: Vec<TokenId>,
    /// Original values of the masked static variables.
    pub masked_statics: Vec<(StaticField, u8)>,
}

impl MaskedSequence {
    /// No perturbation at all: evaluation-mode wrapper around a sequence.
    pub fn unperturbed(enc: &EncodedSequence) -> Self {
        MaskedSequence {
            input: enc.clone(),
            temporal_labels: vec![NO_LABEL; enc.len()],
            masked_statics: Vec::new(),
        }
    }

    pub fn n_labeled(&self) -> usize {
        self.temporal_labels.iter().filter(|l| **l != NO_LABEL).count()
    }
}

/// Perturb one encoded sequence. The CLS slot is never touched; encounter
/// slots are selected with probability mask+replace+keep; static slots are
/// masked with `static_mask_prob` (their embedding id becomes the mask row).
pub fn mask_encounters(
    enc: &EncodedSequence,
    vocab: &Vocabulary,
    pool: &ReplacementPool,
    cfg: &ModelConfig,
    rng: &mut ChaCha12Rng,
) -> MaskedSequence {
    let mut input = enc.clone();
    let mut temporal_labels = vec![NO_LABEL; enc.len()];
    let mask_hi = cfg.mem_mask_fraction;
    let replace_hi = mask_hi + cfg.mem_replace_fraction;
    let budget = replace_hi + cfg.mem_keep_fraction;

    for slot in 1..enc.n_temporal {
        let u: f64 = rng.random();
        if u >= budget {
            continue;
        }
        let original = enc.code_ids[slot];
        temporal_labels[slot] = original;
        if u < mask_hi {
            input.code_ids[slot] = Vocabulary::MASK;
        } else if u < replace_hi {
            let cat = vocab.category(original).unwrap_or(TokenCategory::Special);
            let candidates = pool.candidates(cat);
            if candidates.is_empty() {
                input.code_ids[slot] = Vocabulary::MASK;
            } else {
                input.code_ids[slot] = candidates[rng.random_range(0..candidates.len())];
            }
        }
        // else: kept unperturbed but still labeled
    }

    let mut masked_statics = Vec::new();
    for slot in enc.n_temporal..enc.len() {
        if let Some((field, value)) = enc.static_ids[slot] {
            if rng.random::<f64>() < cfg.static_mask_prob {
                let mask_id = match field {
                    StaticField::Sex => SEX_MASK_ID,
                    StaticField::Region => REGION_MASK_ID,
                    StaticField::Smoking => SMOKING_MASK_ID,
                };
                input.static_ids[slot] = Some((field, mask_id));
                masked_statics.push((field, value));
            }
        }
    }

    MaskedSequence { input, temporal_labels, masked_statics }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{encode_patient, Encounter, PatientRecord, StaticVars};
    use crate::rng::{self, Domain};
    use crate::synth::{build_synth_vocab, VocabSpec};

    fn setup() -> (Vocabulary, EncodedSequence) {
        let vocab = build_synth_vocab(&VocabSpec::default()).unwrap();
        let diag = vocab.tokens_in_category(TokenCategory::Diagnosis);
        let med = vocab.tokens_in_category(TokenCategory::Medication);
        let p = PatientRecord {
            id: "p".into(),
            statics: StaticVars { sex: 1, region: 2, smoking: 0 },
            encounters: (0..30)
                .map(|i| Encounter {
                    code: if i % 3 == 0 { med[i % med.len()] } else { diag[i % diag.len()] },
                    age: 40 + (i / 5) as u16,
                    year: 1995 + (i / 5) as u16,
                    position: i as u32,
                })
                .collect(),
            exposure: 0,
            outcome: 0,
            potential: None,
            lambda: None,
        };
        let enc = encode_patient(&p, &vocab, 64).unwrap();
        (vocab, enc)
    }

    #[test]
    fn zero_budget_is_identity() {
        let (vocab, enc) = setup();
        let pool = ReplacementPool::new(&vocab);
        let mut cfg = ModelConfig::desk();
        cfg.mem_mask_fraction = 0.0;
        cfg.mem_replace_fraction = 0.0;
        cfg.mem_keep_fraction = 0.0;
        cfg.static_mask_prob = 0.0;
        let mut rng = rng::stream(1, Domain::Masking, 0);
        let masked = mask_encounters(&enc, &vocab, &pool, &cfg, &mut rng);
        assert_eq!(masked.input, enc);
        assert!(masked.temporal_labels.iter().all(|l| *l == NO_LABEL));
        assert!(masked.masked_statics.is_empty());
    }

    #[test]
    fn full_mask_budget_masks_every_encounter() {
        let (vocab, enc) = setup();
        let pool = ReplacementPool::new(&vocab);
        let mut cfg = ModelConfig::desk();
        cfg.mem_mask_fraction = 1.0;
        cfg.mem_replace_fraction = 0.0;
        cfg.mem_keep_fraction = 0.0;
        let mut rng = rng::stream(1, Domain::Masking, 0);
        let masked = mask_encounters(&enc, &vocab, &pool, &cfg, &mut rng);
        // CLS untouched, every encounter slot masked and labeled
        assert_eq!(masked.input.code_ids[0], Vocabulary::CLS);
        assert_eq!(masked.temporal_labels[0], NO_LABEL);
        for slot in 1..enc.n_temporal {
            assert_eq!(masked.input.code_ids[slot], Vocabulary::MASK);
            assert_eq!(masked.temporal_labels[slot], enc.code_ids[slot]);
        }
    }

    #[test]
    fn replacements_never_draw_protected_tokens() {
        let (vocab, enc) = setup();
        let pool = ReplacementPool::new(&vocab);
        let mut cfg = ModelConfig::desk();
        // replacement-only perturbation to maximize draws
        cfg.mem_mask_fraction = 0.0;
        cfg.mem_replace_fraction = 1.0;
        cfg.mem_keep_fraction = 0.0;
        let mut draws = 0usize;
        for run in 0..4000u64 {
            let mut rng = rng::stream(9, Domain::Masking, run);
            let masked = mask_encounters(&enc, &vocab, &pool, &cfg, &mut rng);
            for slot in 1..enc.n_temporal {
                let new_code = masked.input.code_ids[slot];
                draws += 1;
                assert!(
                    !vocab.is_protected(new_code),
                    "protected token {new_code} drawn at slot {slot}"
                );
                // same-category replacement
                if new_code != Vocabulary::MASK {
                    assert_eq!(vocab.category(new_code), vocab.category(enc.code_ids[slot]));
                }
            }
        }
        assert!(draws >= 100_000, "only {draws} replacement draws");
    }

    #[test]
    fn static_masking_labels_original_values() {
        let (vocab, enc) = setup();
        let pool = ReplacementPool::new(&vocab);
        let mut cfg = ModelConfig::desk();
        cfg.static_mask_prob = 1.0;
        let mut rng = rng::stream(2, Domain::Masking, 0);
        let masked = mask_encounters(&enc, &vocab, &pool, &cfg, &mut rng);
        assert_eq!(masked.masked_statics.len(), 3);
        assert!(masked
            .masked_statics
            .iter()
            .any(|(f, v)| *f == StaticField::Sex && *v == 1));
        // inputs carry the mask rows
        for slot in enc.n_temporal..enc.len() {
            let (field, value) = masked.input.static_ids[slot].unwrap();
            let expect = match field {
                StaticField::Sex => SEX_MASK_ID,
                StaticField::Region => REGION_MASK_ID,
                StaticField::Smoking => SMOKING_MASK_ID,
            };
            assert_eq!(value, expect);
        }
    }

    #[test]
    fn masking_fraction_is_calibrated() {
        let (vocab, enc) = setup();
        let pool = ReplacementPool::new(&vocab);
        let cfg = ModelConfig::desk();
        let mut labeled = 0usize;
        let mut total = 0usize;
        for run in 0..2000u64 {
            let mut rng = rng::stream(3, Domain::Masking, run);
            let masked = mask_encounters(&enc, &vocab, &pool, &cfg, &mut rng);
            labeled += masked.n_labeled();
            total += enc.n_temporal - 1;
        }
        let frac = labeled as f64 / total as f64;
        let budget = cfg.perturbation_budget();
        let sigma = (budget * (1.0 - budget) / total as f64).sqrt();
        assert!((frac - budget).abs() < 4.0 * sigma, "frac {frac} vs budget {budget}");
    }
}
