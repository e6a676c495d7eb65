//! Learnable parameters: layout, initialization, uniform traversal, and the
//! versioned binary on-disk format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cohort::MAX_REGIONS;
use crate::error::{CelError, Result};
use crate::rng::{self, Domain};

use super::config::{ModelConfig, AGE_CARD, YEAR_CARD};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
}

/// All learnable weights. `Gradients` and Adam moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub code_emb: Array2<f64>,
    pub age_emb: Array2<f64>,
    pub year_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub sex_emb: Array2<f64>,
    pub region_emb: Array2<f64>,
    pub smoking_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f_g: Array1<f64>,
    pub ln_f_b: Array1<f64>,
    pub pooler_w: Array2<f64>,
    pub pooler_b: Array1<f64>,
    pub g_w1: Array2<f64>,
    pub g_b1: Array1<f64>,
    pub g_w2: Array2<f64>,
    pub g_b2: Array1<f64>,
    pub q0_w1: Array2<f64>,
    pub q0_b1: Array1<f64>,
    pub q0_w2: Array2<f64>,
    pub q0_b2: Array1<f64>,
    pub q0_w3: Array2<f64>,
    pub q0_b3: Array1<f64>,
    pub q1_w1: Array2<f64>,
    pub q1_b1: Array1<f64>,
    pub q1_w2: Array2<f64>,
    pub q1_b2: Array1<f64>,
    pub q1_w3: Array2<f64>,
    pub q1_b3: Array1<f64>,
    pub mem_w: Array2<f64>,
    pub mem_b: Array1<f64>,
    pub vae_mu_w: Array2<f64>,
    pub vae_mu_b: Array1<f64>,
    pub vae_lv_w: Array2<f64>,
    pub vae_lv_b: Array1<f64>,
    pub dec_sex_w: Array2<f64>,
    pub dec_sex_b: Array1<f64>,
    pub dec_region_w: Array2<f64>,
    pub dec_region_b: Array1<f64>,
    pub dec_smoking_w: Array2<f64>,
    pub dec_smoking_b: Array1<f64>,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let h = cfg.hidden;
        let i = cfg.intermediate;
        let z = cfg.vae_latent_dim;
        let layer = || LayerParams {
            ln1_g: Array1::zeros(h),
            ln1_b: Array1::zeros(h),
            wq: Array2::zeros((h, h)),
            bq: Array1::zeros(h),
            wk: Array2::zeros((h, h)),
            bk: Array1::zeros(h),
            wv: Array2::zeros((h, h)),
            bv: Array1::zeros(h),
            wo: Array2::zeros((h, h)),
            bo: Array1::zeros(h),
            ln2_g: Array1::zeros(h),
            ln2_b: Array1::zeros(h),
            ff_w1: Array2::zeros((h, i)),
            ff_b1: Array1::zeros(i),
            ff_w2: Array2::zeros((i, h)),
            ff_b2: Array1::zeros(h),
        };
        ModelParams {
            code_emb: Array2::zeros((vocab_size, h)),
            age_emb: Array2::zeros((AGE_CARD, h)),
            year_emb: Array2::zeros((YEAR_CARD, h)),
            pos_emb: Array2::zeros((cfg.max_seq_len, h)),
            sex_emb: Array2::zeros((3, h)),
            region_emb: Array2::zeros((MAX_REGIONS + 1, h)),
            smoking_emb: Array2::zeros((3, h)),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            ln_f_g: Array1::zeros(h),
            ln_f_b: Array1::zeros(h),
            pooler_w: Array2::zeros((h, h)),
            pooler_b: Array1::zeros(h),
            g_w1: Array2::zeros((h, h)),
            g_b1: Array1::zeros(h),
            g_w2: Array2::zeros((h, 1)),
            g_b2: Array1::zeros(1),
            q0_w1: Array2::zeros((h, h)),
            q0_b1: Array1::zeros(h),
            q0_w2: Array2::zeros((h, h)),
            q0_b2: Array1::zeros(h),
            q0_w3: Array2::zeros((h, 1)),
            q0_b3: Array1::zeros(1),
            q1_w1: Array2::zeros((h, h)),
            q1_b1: Array1::zeros(h),
            q1_w2: Array2::zeros((h, h)),
            q1_b2: Array1::zeros(h),
            q1_w3: Array2::zeros((h, 1)),
            q1_b3: Array1::zeros(1),
            mem_w: Array2::zeros((h, vocab_size)),
            mem_b: Array1::zeros(vocab_size),
            vae_mu_w: Array2::zeros((h, z)),
            vae_mu_b: Array1::zeros(z),
            vae_lv_w: Array2::zeros((h, z)),
            vae_lv_b: Array1::zeros(z),
            dec_sex_w: Array2::zeros((z, 1)),
            dec_sex_b: Array1::zeros(1),
            dec_region_w: Array2::zeros((z, MAX_REGIONS)),
            dec_region_b: Array1::zeros(MAX_REGIONS),
            dec_smoking_w: Array2::zeros((z, 1)),
            dec_smoking_b: Array1::zeros(1),
        }
    }

    /// Random initialization: weights and embeddings N(0, init_range),
    /// biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let mut params = Self::zeros(cfg, vocab_size);
        let mut rng = rng::stream(cfg.seed, Domain::Init, 0);
        for (name, slice) in params.named_slices_mut() {
            let is_bias = name.ends_with("_b")
                || name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
                || name.ends_with(".bo")
                || name.ends_with(".ff_b1")
                || name.ends_with(".ff_b2")
                || name.ends_with(".ln1_b")
                || name.ends_with(".ln2_b")
                || name.ends_with("b1")
                || name.ends_with("b2")
                || name.ends_with("b3");
            let is_gain = name.contains("ln_f_g") || name.ends_with(".ln1_g") || name.ends_with(".ln2_g");
            if is_gain {
                slice.fill(1.0);
            } else if is_bias {
                slice.fill(0.0);
            } else {
                for v in slice.iter_mut() {
                    *v = cfg.init_range * rng::gauss(&mut rng);
                }
            }
        }
        params
    }

    /// Named mutable flat views over every parameter array, in a fixed order.
    /// Exhaustive by construction: the destructuring below fails to compile
    /// if a field is added without being listed.
    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let ModelParams {
            code_emb,
            age_emb,
            year_emb,
            pos_emb,
            sex_emb,
            region_emb,
            smoking_emb,
            layers,
            ln_f_g,
            ln_f_b,
            pooler_w,
            pooler_b,
            g_w1,
            g_b1,
            g_w2,
            g_b2,
            q0_w1,
            q0_b1,
            q0_w2,
            q0_b2,
            q0_w3,
            q0_b3,
            q1_w1,
            q1_b1,
            q1_w2,
            q1_b2,
            q1_w3,
            q1_b3,
            mem_w,
            mem_b,
            vae_mu_w,
            vae_mu_b,
            vae_lv_w,
            vae_lv_b,
            dec_sex_w,
            dec_sex_b,
            dec_region_w,
            dec_region_b,
            dec_smoking_w,
            dec_smoking_b,
        } = self;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("code_emb".into(), code_emb.as_slice_mut().unwrap()),
            ("age_emb".into(), age_emb.as_slice_mut().unwrap()),
            ("year_emb".into(), year_emb.as_slice_mut().unwrap()),
            ("pos_emb".into(), pos_emb.as_slice_mut().unwrap()),
            ("sex_emb".into(), sex_emb.as_slice_mut().unwrap()),
            ("region_emb".into(), region_emb.as_slice_mut().unwrap()),
            ("smoking_emb".into(), smoking_emb.as_slice_mut().unwrap()),
        ];
        for (l, layer) in layers.iter_mut().enumerate() {
            let LayerParams {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
            } = layer;
            out.push((format!("layer{l}.ln1_g"), ln1_g.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln1_b"), ln1_b.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wq"), wq.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bq"), bq.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wk"), wk.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bk"), bk.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wv"), wv.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bv"), bv.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wo"), wo.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bo"), bo.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln2_g"), ln2_g.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln2_b"), ln2_b.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff_w1"), ff_w1.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff_b1"), ff_b1.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff_w2"), ff_w2.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff_b2"), ff_b2.as_slice_mut().unwrap()));
        }
        out.extend([
            ("ln_f_g".to_string(), ln_f_g.as_slice_mut().unwrap()),
            ("ln_f_b".to_string(), ln_f_b.as_slice_mut().unwrap()),
            ("pooler_w".to_string(), pooler_w.as_slice_mut().unwrap()),
            ("pooler_b".to_string(), pooler_b.as_slice_mut().unwrap()),
            ("g_w1".to_string(), g_w1.as_slice_mut().unwrap()),
            ("g_b1".to_string(), g_b1.as_slice_mut().unwrap()),
            ("g_w2".to_string(), g_w2.as_slice_mut().unwrap()),
            ("g_b2".to_string(), g_b2.as_slice_mut().unwrap()),
            ("q0_w1".to_string(), q0_w1.as_slice_mut().unwrap()),
            ("q0_b1".to_string(), q0_b1.as_slice_mut().unwrap()),
            ("q0_w2".to_string(), q0_w2.as_slice_mut().unwrap()),
            ("q0_b2".to_string(), q0_b2.as_slice_mut().unwrap()),
            ("q0_w3".to_string(), q0_w3.as_slice_mut().unwrap()),
            ("q0_b3".to_string(), q0_b3.as_slice_mut().unwrap()),
            ("q1_w1".to_string(), q1_w1.as_slice_mut().unwrap()),
            ("q1_b1".to_string(), q1_b1.as_slice_mut().unwrap()),
            ("q1_w2".to_string(), q1_w2.as_slice_mut().unwrap()),
            ("q1_b2".to_string(), q1_b2.as_slice_mut().unwrap()),
            ("q1_w3".to_string(), q1_w3.as_slice_mut().unwrap()),
            ("q1_b3".to_string(), q1_b3.as_slice_mut().unwrap()),
            ("mem_w".to_string(), mem_w.as_slice_mut().unwrap()),
            ("mem_b".to_string(), mem_b.as_slice_mut().unwrap()),
            ("vae_mu_w".to_string(), vae_mu_w.as_slice_mut().unwrap()),
            ("vae_mu_b".to_string(), vae_mu_b.as_slice_mut().unwrap()),
            ("vae_lv_w".to_string(), vae_lv_w.as_slice_mut().unwrap()),
            ("vae_lv_b".to_string(), vae_lv_b.as_slice_mut().unwrap()),
            ("dec_sex_w".to_string(), dec_sex_w.as_slice_mut().unwrap()),
            ("dec_sex_b".to_string(), dec_sex_b.as_slice_mut().unwrap()),
            ("dec_region_w".to_string(), dec_region_w.as_slice_mut().unwrap()),
            ("dec_region_b".to_string(), dec_region_b.as_slice_mut().unwrap()),
            ("dec_smoking_w".to_string(), dec_smoking_w.as_slice_mut().unwrap()),
            ("dec_smoking_b".to_string(), dec_smoking_b.as_slice_mut().unwrap()),
        ]);
        out
    }

    pub fn n_scalars(&mut self) -> usize {
        self.named_slices_mut().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn all_finite(&mut self) -> bool {
        self.named_slices_mut()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    pub fn fill(&mut self, value: f64) {
        for (_, s) in self.named_slices_mut() {
            s.fill(value);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    version: u32,
    n_folds: usize,
    hidden: usize,
    intermediate: usize,
    n_layers: usize,
    n_heads: usize,
    max_seq_len: usize,
    vae_latent_dim: usize,
    vocab_size: usize,
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    len: usize,
}

const PARAMS_MAGIC: &[u8; 4] = b"CELP";

/// Write per-fold parameter sets: magic, header length, JSON shape manifest,
/// then little-endian f64 data in manifest order for each fold.
pub fn write_params(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    vocab_size: usize,
    folds: &mut [ModelParams],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let entries: Vec<ParamEntry> = match folds.first_mut() {
        Some(first) => first
            .named_slices_mut()
            .iter()
            .map(|(name, s)| ParamEntry { name: name.clone(), len: s.len() })
            .collect(),
        None => return Err(CelError::validation("no parameter sets to write")),
    };
    let header = ParamsHeader {
        version: 1,
        n_folds: folds.len(),
        hidden: cfg.hidden,
        intermediate: cfg.intermediate,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        max_seq_len: cfg.max_seq_len,
        vae_latent_dim: cfg.vae_latent_dim,
        vocab_size,
        entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CelError::validation(format!("params header: {e}")))?;
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for params in folds.iter_mut() {
        for (_, slice) in params.named_slices_mut() {
            for v in slice.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a params file back into per-fold parameter sets.
pub fn read_params(path: impl AsRef<Path>) -> Result<(Vec<ModelParams>, ModelConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(CelError::validation("not a params file (bad magic)"));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: ParamsHeader = serde_json::from_slice(&header_json)
        .map_err(|e| CelError::Parse { line: 1, msg: format!("params header: {e}") })?;
    if header.version != 1 {
        return Err(CelError::validation(format!(
            "unsupported params version {}",
            header.version
        )));
    }
    let mut cfg = ModelConfig::desk();
    cfg.hidden = header.hidden;
    cfg.intermediate = header.intermediate;
    cfg.n_layers = header.n_layers;
    cfg.n_heads = header.n_heads;
    cfg.max_seq_len = header.max_seq_len;
    cfg.vae_latent_dim = header.vae_latent_dim;

    let mut folds = Vec::with_capacity(header.n_folds);
    for _ in 0..header.n_folds {
        let mut params = ModelParams::zeros(&cfg, header.vocab_size);
        {
            let slices = params.named_slices_mut();
            if slices.len() != header.entries.len() {
                return Err(CelError::validation(format!(
                    "params manifest has {} entries, layout expects {}",
                    header.entries.len(),
                    slices.len()
                )));
            }
            for ((name, slice), entry) in slices.into_iter().zip(&header.entries) {
                if name != entry.name || slice.len() != entry.len {
                    return Err(CelError::validation(format!(
                        "params entry mismatch: file has {} ({}), layout expects {} ({})",
                        entry.name,
                        entry.len,
                        name,
                        slice.len()
                    )));
                }
                let mut buf = [0u8; 8];
                for v in slice.iter_mut() {
                    r.read_exact(&mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
            }
        }
        folds.push(params);
    }
    Ok((folds, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::desk();
        let mut a = ModelParams::init(&cfg, 40);
        let b = ModelParams::init(&cfg, 40);
        assert_eq!(a, b);
        assert!(a.all_finite());
        // layer-norm gains start at one, biases at zero
        assert!(a.layers[0].ln1_g.iter().all(|v| *v == 1.0));
        assert!(a.layers[0].bq.iter().all(|v| *v == 0.0));
        assert!(a.pooler_b.iter().all(|v| *v == 0.0));
        assert!(a.code_emb.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn params_file_round_trips() {
        let cfg = ModelConfig::desk();
        let mut folds = vec![ModelParams::init(&cfg, 33), ModelParams::init(&cfg, 33)];
        folds[1].mem_b[0] = 4.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        write_params(&path, &cfg, 33, &mut folds).unwrap();
        let (back, back_cfg) = read_params(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back_cfg.hidden, cfg.hidden);
        assert_eq!(back, folds);
    }
}
