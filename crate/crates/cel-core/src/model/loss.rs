//! Loss components over one patient's forward output.
//!
//! Reductions: binary terms are single values; masked-encounter
//! cross-entropy is a mean over labeled slots; the VAE term sums its masked
//! reconstruction terms and the closed-form KL. The trainer batch-means
//! everything across patients.

use serde::{Deserialize, Serialize};

use crate::cohort::StaticField;

use super::masking::MaskedSequence;
use super::net::ForwardOutput;

/// Binary cross-entropy from a logit, numerically stable.
fn bce_logit(logit: f64, target: f64) -> f64 {
    let sp = if logit > 0.0 { logit + (-logit).exp().ln_1p() } else { logit.exp().ln_1p() };
    sp - target * logit
}

fn logsumexp(xs: &ndarray::Array1<f64>) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub outcome: f64,
    pub propensity: f64,
    pub mem_temp: f64,
    pub mem_static: f64,
}

impl LossParts {
    /// Joint objective: supervised + delta * (temporal + static).
    pub fn total(&self, delta: f64, include_propensity: bool) -> f64 {
        self.outcome
            + if include_propensity { self.propensity } else { 0.0 }
            + delta * (self.mem_temp + self.mem_static)
    }

    pub fn add(&mut self, other: &LossParts) {
        self.outcome += other.outcome;
        self.propensity += other.propensity;
        self.mem_temp += other.mem_temp;
        self.mem_static += other.mem_static;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            outcome: self.outcome * s,
            propensity: self.propensity * s,
            mem_temp: self.mem_temp * s,
            mem_static: self.mem_static * s,
        }
    }
}

/// Supervised loss: cross-entropy of the factual arm against the outcome,
/// plus cross-entropy of the propensity against the exposure.
pub fn loss_supervised(out: &ForwardOutput, t: u8, y: u8) -> (f64, f64) {
    let factual = if t == 1 { out.q1 } else { out.q0 };
    let yf = f64::from(y);
    let outcome = -(yf * factual.ln() + (1.0 - yf) * (1.0 - factual).ln());
    let tf = f64::from(t);
    let propensity = -(tf * out.g.ln() + (1.0 - tf) * (1.0 - out.g).ln());
    (outcome, propensity)
}

/// Mean categorical cross-entropy over labeled temporal slots; zero when
/// nothing is labeled.
pub fn loss_mem_temp(out: &ForwardOutput, seq: &MaskedSequence) -> f64 {
    if out.mem_logits.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (slot, logits) in &out.mem_logits {
        let label = seq.temporal_labels[*slot] as usize;
        total += logsumexp(logits) - logits[label];
    }
    total / out.mem_logits.len() as f64
}

/// Negative ELBO for the static VAE: reconstruction cross-entropy over the
/// masked variables plus KL(q(z|x) || N(0, I)) in closed form.
pub fn loss_mem_static(out: &ForwardOutput, seq: &MaskedSequence) -> f64 {
    let Some(vae) = &out.vae else {
        return 0.0;
    };
    let mut recon = 0.0;
    for (field, value) in &seq.masked_statics {
        recon += match field {
            StaticField::Sex => bce_logit(vae.sex_logit, f64::from(*value)),
            StaticField::Smoking => bce_logit(vae.smoking_logit, f64::from(*value)),
            StaticField::Region => {
                logsumexp(&vae.region_logits) - vae.region_logits[*value as usize]
            }
        };
    }
    let kl: f64 = vae
        .mu
        .iter()
        .zip(vae.logvar.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    recon + kl
}

/// All loss parts for one patient.
pub fn loss_parts(out: &ForwardOutput, seq: &MaskedSequence, t: u8, y: u8) -> LossParts {
    let (outcome, propensity) = loss_supervised(out, t, y);
    LossParts {
        outcome,
        propensity,
        mem_temp: loss_mem_temp(out, seq),
        mem_static: loss_mem_static(out, seq),
    }
}

/// Convenience wrapper mirroring the joint objective on plain numbers.
pub fn loss_total(supervised: f64, mem_temp: f64, mem_static: f64, delta: f64) -> f64 {
    supervised + delta * (mem_temp + mem_static)
}
