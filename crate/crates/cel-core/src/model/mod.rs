//! The sequence model: embedding layer, transformer feature extractor,
//! propensity/outcome heads, masked-encounter and static-VAE reconstruction
//! objectives, and the five-fold training protocol.

mod config;
mod loss;
mod masking;
mod net;
mod params;
mod train;

pub use config::{
    ModelConfig, AGE_CARD, REGION_MASK_ID, SEX_MASK_ID, SMOKING_MASK_ID, YEAR_BASE, YEAR_CARD,
};
pub use loss::{loss_mem_static, loss_mem_temp, loss_parts, loss_supervised, loss_total, LossParts};
pub use masking::{mask_encounters, MaskedSequence, ReplacementPool, NO_LABEL};
pub use net::{
    backward, embed, encoder_forward, forward, heads_forward, Cache, ForwardMode, ForwardOutput,
    LossWeights, VaeOutput,
};
pub use params::{read_params, write_params, Gradients, ModelParams};
pub use train::{fit, FitMode, FitResult};

#[cfg(test)]
pub(crate) mod grad_check {
    //! Finite-difference validation of the hand-written backward pass.
    //! The acceptance suite runs the full sweep; this covers a smoke subset.

    use ndarray::Array1;

    use super::*;
    use crate::cohort::{encode_patient, Encounter, PatientRecord, StaticVars};
    use crate::synth::{build_synth_vocab, VocabSpec};

    pub(crate) struct GradFixture {
        pub cfg: ModelConfig,
        pub params: ModelParams,
        pub patients: Vec<(MaskedSequence, u8, u8)>,
        pub eps: Array1<f64>,
    }

    /// 2-patient, hidden=8 configuration with every loss path active.
    pub(crate) fn fixture() -> GradFixture {
        let vocab = build_synth_vocab(&VocabSpec {
            diagnoses: 10,
            medications: 4,
            diagnosis_groups: 2,
            medication_groups: 2,
            regions: 4,
        })
        .unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.hidden = 8;
        cfg.intermediate = 12;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.max_seq_len = 12;
        cfg.vae_latent_dim = 3;
        cfg.hidden_dropout = 0.0;
        cfg.attention_dropout = 0.0;
        cfg.mem_mask_fraction = 0.5;
        cfg.mem_replace_fraction = 0.2;
        cfg.mem_keep_fraction = 0.1;
        cfg.static_mask_prob = 0.9;
        cfg.seed = 21;
        let mut params = ModelParams::init(&cfg, vocab.len());
        // move heads off their symmetric zero-bias point
        for (name, slice) in params.named_slices_mut() {
            if name.contains("_b") && !name.contains("ln") {
                for (i, v) in slice.iter_mut().enumerate() {
                    *v = 0.05 * ((i % 5) as f64 - 2.0);
                }
            }
        }
        let pool = ReplacementPool::new(&vocab);
        let mk_patient = |id: &str, n: usize, t: u8, y: u8, sex: u8| PatientRecord {
            id: id.into(),
            statics: StaticVars { sex, region: 2, smoking: 1 },
            encounters: (0..n)
                .map(|i| Encounter {
                    code: 5 + (i % 9) as u32,
                    age: 50 + i as u16,
                    year: 2000 + i as u16,
                    position: i as u32,
                })
                .collect(),
            exposure: t,
            outcome: y,
            potential: None,
            lambda: None,
        };
        let mut patients = Vec::new();
        for (i, p) in [mk_patient("a", 5, 1, 1, 0), mk_patient("b", 4, 0, 1, 1)]
            .iter()
            .enumerate()
        {
            let enc = encode_patient(p, &vocab, cfg.max_seq_len).unwrap();
            let mut rng = crate::rng::stream(33, crate::rng::Domain::Masking, i as u64);
            let masked = mask_encounters(&enc, &vocab, &pool, &cfg, &mut rng);
            assert!(masked.n_labeled() > 0, "fixture must label at least one slot");
            assert!(!masked.masked_statics.is_empty(), "fixture must mask a static");
            patients.push((masked, p.exposure, p.outcome));
        }
        let eps = Array1::from_vec(vec![0.4, -0.7, 0.9]);
        GradFixture { cfg, params, patients, eps }
    }

    /// Batch loss under component weights (sum over the two patients).
    pub(crate) fn eval_loss(fx: &GradFixture, params: &ModelParams, w: &LossWeights) -> f64 {
        let mut total = 0.0;
        for (masked, t, y) in &fx.patients {
            let (out, _) =
                forward(masked, params, &fx.cfg, true, ForwardMode::FixedNoise(&fx.eps)).unwrap();
            let parts = loss_parts(&out, masked, *t, *y);
            total += w.outcome * parts.outcome
                + w.propensity * parts.propensity
                + w.mem_temp * parts.mem_temp
                + w.mem_static * parts.mem_static;
        }
        total
    }

    pub(crate) fn analytic_grads(fx: &GradFixture, w: &LossWeights) -> ModelParams {
        let mut grads = ModelParams::zeros(&fx.cfg, fx.params.code_emb.nrows());
        for (masked, t, y) in &fx.patients {
            let (out, cache) =
                forward(masked, &fx.params, &fx.cfg, true, ForwardMode::FixedNoise(&fx.eps))
                    .unwrap();
            backward(masked, *t, *y, &fx.params, &fx.cfg, &out, &cache, w, &mut grads, 1.0);
        }
        grads
    }

    /// Central finite differences over a strided subset of each parameter
    /// array; `max_entries_per_param` bounds the work. Returns the count of
    /// checked entries and the worst relative error, panicking past 1e-3.
    pub(crate) fn check_component(w: &LossWeights, max_entries_per_param: usize) -> (usize, f64) {
        let fx = fixture();
        let mut grads = analytic_grads(&fx, w);
        let mut params = fx.params.clone();
        let h = 1e-4;
        let mut checked = 0usize;
        let mut worst: f64 = 0.0;
        let names: Vec<(String, usize)> = {
            let slices = grads.named_slices_mut();
            slices.iter().map(|(n, s)| (n.clone(), s.len())).collect()
        };
        for (pi, (name, len)) in names.iter().enumerate() {
            let stride = (len / max_entries_per_param).max(1);
            for i in (0..*len).step_by(stride) {
                let analytic = grads.named_slices_mut()[pi].1[i];
                {
                    let mut s = params.named_slices_mut();
                    s[pi].1[i] += h;
                }
                let up = eval_loss(&fx, &params, w);
                {
                    let mut s = params.named_slices_mut();
                    s[pi].1[i] -= 2.0 * h;
                }
                let down = eval_loss(&fx, &params, w);
                {
                    let mut s = params.named_slices_mut();
                    s[pi].1[i] += h;
                }
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs());
                let rel = if denom < 1e-7 {
                    (analytic - numeric).abs()
                } else {
                    (analytic - numeric).abs() / denom
                };
                assert!(
                    rel < 1e-3,
                    "{name}[{i}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
                );
                worst = worst.max(rel);
                checked += 1;
            }
        }
        (checked, worst)
    }

    #[test]
    fn supervised_gradients_match_finite_differences() {
        let w = LossWeights { outcome: 1.0, propensity: 1.0, mem_temp: 0.0, mem_static: 0.0 };
        let (checked, worst) = check_component(&w, 4);
        assert!(checked > 100, "only {checked} entries checked");
        assert!(worst < 1e-3);
    }

    #[test]
    fn mem_temp_gradients_match_finite_differences() {
        let w = LossWeights { outcome: 0.0, propensity: 0.0, mem_temp: 1.0, mem_static: 0.0 };
        check_component(&w, 4);
    }

    #[test]
    fn mem_static_gradients_match_finite_differences() {
        let w = LossWeights { outcome: 0.0, propensity: 0.0, mem_temp: 0.0, mem_static: 1.0 };
        check_component(&w, 4);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let w = LossWeights { outcome: 1.0, propensity: 1.0, mem_temp: 0.1, mem_static: 0.1 };
        check_component(&w, 4);
    }
}
