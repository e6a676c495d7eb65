//! Model hyperparameters and the two named presets.

use serde::{Deserialize, Serialize};

use crate::error::{CelError, Result};

/// Embedding table capacities (raw ages/years are clamped into range).
pub const AGE_CARD: usize = 120;
pub const YEAR_BASE: u16 = 1980;
pub const YEAR_CARD: usize = 60;

/// Mask row indices appended to each static embedding table.
pub const SEX_MASK_ID: u8 = 2;
pub const REGION_MASK_ID: u8 = crate::cohort::MAX_REGIONS as u8;
pub const SMOKING_MASK_ID: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub init_range: f64,
    pub max_seq_len: usize,
    /// Weight of the unsupervised reconstruction terms in the joint loss.
    pub delta: f64,
    /// Per-slot perturbation probabilities; their sum is the budget.
    pub mem_mask_fraction: f64,
    pub mem_replace_fraction: f64,
    pub mem_keep_fraction: f64,
    /// Per-slot masking probability for static variables (VAE targets).
    pub static_mask_prob: f64,
    pub vae_latent_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_joint: usize,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Published hyperparameters: hidden 150, intermediate 108, 4 layers,
    /// dropouts 0.3/0.4, n=200 sequence length, delta 0.1, decay 0.95,
    /// 5 epochs of reconstruction-only pretraining.
    pub fn paper() -> Self {
        ModelConfig {
            hidden: 150,
            intermediate: 108,
            n_layers: 4,
            n_heads: 6,
            hidden_dropout: 0.3,
            attention_dropout: 0.4,
            init_range: 0.02,
            max_seq_len: 200,
            delta: 0.1,
            mem_mask_fraction: 0.12,
            mem_replace_fraction: 0.015,
            mem_keep_fraction: 0.015,
            static_mask_prob: 1.0 / 3.0,
            vae_latent_dim: 32,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs_pretrain: 5,
            epochs_joint: 10,
            decay_rate: 0.95,
            seed: 7,
        }
    }

    /// Desk-scale preset: small enough that full suites run in minutes on a
    /// CPU while keeping the same structure.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 32,
            intermediate: 64,
            n_layers: 2,
            n_heads: 4,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            max_seq_len: 64,
            vae_latent_dim: 8,
            epochs_joint: 6,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(CelError::config(format!("unknown preset '{other}' (expected desk|paper)"))),
        }
    }

    pub fn perturbation_budget(&self) -> f64 {
        self.mem_mask_fraction + self.mem_replace_fraction + self.mem_keep_fraction
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_layers == 0 || self.n_heads == 0 || self.intermediate == 0 {
            return Err(CelError::config("hidden/intermediate/layers/heads must be positive"));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(CelError::config(format!(
                "hidden ({}) must be divisible by the head count ({})",
                self.hidden, self.n_heads
            )));
        }
        for (name, p) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(CelError::config(format!("{name} must lie in [0,1)")));
            }
        }
        let budget = self.perturbation_budget();
        if !(0.0..=1.0).contains(&budget)
            || self.mem_mask_fraction < 0.0
            || self.mem_replace_fraction < 0.0
            || self.mem_keep_fraction < 0.0
        {
            return Err(CelError::config(
                "mask/replace/keep fractions must be non-negative with sum <= 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.static_mask_prob) {
            return Err(CelError::config("static_mask_prob must lie in [0,1]"));
        }
        if self.max_seq_len < 5 {
            return Err(CelError::config("max_seq_len must be at least 5"));
        }
        if self.vae_latent_dim == 0 {
            return Err(CelError::config("vae_latent_dim must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CelError::config("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CelError::config("learning_rate must be positive"));
        }
        if !(0.0 < self.decay_rate && self.decay_rate <= 1.0) {
            return Err(CelError::config("decay_rate must lie in (0,1]"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(CelError::config("delta must be finite and >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        assert!(ModelConfig::paper().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn paper_preset_pins_published_values() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.hidden, 150);
        assert_eq!(cfg.intermediate, 108);
        assert_eq!(cfg.n_layers, 4);
        assert_eq!(cfg.hidden_dropout, 0.3);
        assert_eq!(cfg.attention_dropout, 0.4);
        assert_eq!(cfg.init_range, 0.02);
        assert_eq!(cfg.max_seq_len, 200);
        assert_eq!(cfg.delta, 0.1);
        assert_eq!(cfg.decay_rate, 0.95);
        assert_eq!(cfg.epochs_pretrain, 5);
    }

    #[test]
    fn budget_and_divisibility_guards() {
        let mut cfg = ModelConfig::desk();
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.mem_mask_fraction = 0.9;
        cfg.mem_replace_fraction = 0.2;
        assert!(cfg.validate().is_err());
    }
}
