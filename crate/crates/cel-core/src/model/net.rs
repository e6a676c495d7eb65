//! Forward and backward passes.
//!
//! Everything is f64 and per-patient (sequences are short and variable
//! length; fold-level parallelism is the scaling axis). The backward pass is
//! hand-written against the cached forward activations and is validated
//! end-to-end by a finite-difference suite.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::cohort::{EncodedSequence, StaticField, Vocabulary};
use crate::error::{CelError, Result};
use crate::estimators::PROB_FLOOR;
use crate::synth::sigmoid;

use super::config::{ModelConfig, AGE_CARD, YEAR_BASE, YEAR_CARD};
use super::masking::{MaskedSequence, NO_LABEL};
use super::params::{Gradients, ModelParams};

const LN_EPS: f64 = 1e-12;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// How stochastic pieces of the forward pass are resolved.
pub enum ForwardMode<'a> {
    /// No dropout; VAE latent uses its mean.
    Eval,
    /// Dropout active; dropout masks and the VAE noise come from the rng.
    Train(&'a mut ChaCha12Rng),
    /// No dropout; VAE noise fixed by the caller (finite-difference checks).
    FixedNoise(&'a Array1<f64>),
}

pub struct VaeOutput {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
    pub z: Array1<f64>,
    pub eps: Array1<f64>,
    pub sex_logit: f64,
    pub region_logits: Array1<f64>,
    pub smoking_logit: f64,
}

/// Network outputs for one patient. Probabilities are clipped into
/// [PROB_FLOOR, 1-PROB_FLOOR]; raw logits are kept for the loss gradients.
pub struct ForwardOutput {
    pub g: f64,
    pub q0: f64,
    pub q1: f64,
    pub logit_g: f64,
    pub logit_q0: f64,
    pub logit_q1: f64,
    /// (slot, vocab logits) for every labeled temporal slot.
    pub mem_logits: Vec<(usize, Array1<f64>)>,
    pub vae: Option<VaeOutput>,
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    /// ln1 output (attention input).
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention probabilities per head.
    probs: Vec<Array2<f64>>,
    attn_mask: Option<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
    proj_mask: Option<Array2<f64>>,
    ln2: LnCache,
    /// ln2 output (feed-forward input).
    b2: Array2<f64>,
    f1: Array2<f64>,
    gelu_out: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

pub struct EncoderCache {
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    pub latents: Array2<f64>,
}

pub struct HeadsCache {
    pooled_pre: Array1<f64>,
    pooled: Array1<f64>,
    g_h_pre: Array1<f64>,
    g_h: Array1<f64>,
    q0_h1_pre: Array1<f64>,
    q0_h1: Array1<f64>,
    q0_h2_pre: Array1<f64>,
    q0_h2: Array1<f64>,
    q1_h1_pre: Array1<f64>,
    q1_h1: Array1<f64>,
    q1_h2_pre: Array1<f64>,
    q1_h2: Array1<f64>,
}

pub struct Cache {
    pub encoder: EncoderCache,
    heads: HeadsCache,
    vae_last_slot: usize,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let l = x.nrows();
    let h = x.ncols() as f64;
    let mut xhat = Array2::<f64>::zeros(x.raw_dim());
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    let mut rstd = Array1::<f64>::zeros(l);
    for i in 0..l {
        let row = x.row(i);
        let mean = row.sum() / h;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for (j, v) in row.iter().enumerate() {
            let xh = (v - mean) * r;
            xhat[[i, j]] = xh;
            out[[i, j]] = gain[j] * xh + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dout: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (l, h) = dout.dim();
    let hf = h as f64;
    let mut dx = Array2::<f64>::zeros(dout.raw_dim());
    for i in 0..l {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..h {
            let dxhat = dout[[i, j]] * gain[j];
            dgain[j] += dout[[i, j]] * cache.xhat[[i, j]];
            dbias[j] += dout[[i, j]];
            m1 += dxhat;
            m2 += dxhat * cache.xhat[[i, j]];
        }
        m1 /= hf;
        m2 /= hf;
        for j in 0..h {
            let dxhat = dout[[i, j]] * gain[j];
            dx[[i, j]] = cache.rstd[i] * (dxhat - m1 - cache.xhat[[i, j]] * m2);
        }
    }
    dx
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn softmax_vec(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Array1<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum = ex.sum();
    ex / sum
}

/// Per-slot embedding: temporal slots sum code+age+year+position rows;
/// static slots use their own variable-specific table.
pub fn embed(seq: &EncodedSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<Array2<f64>> {
    let l = seq.len();
    let h = cfg.hidden;
    if l > cfg.max_seq_len {
        return Err(CelError::validation(format!(
            "sequence length {l} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let mut x = Array2::<f64>::zeros((l, h));
    for slot in 0..l {
        let mut row = x.row_mut(slot);
        match seq.static_ids[slot] {
            Some((field, value)) => {
                let table = match field {
                    StaticField::Sex => &params.sex_emb,
                    StaticField::Region => &params.region_emb,
                    StaticField::Smoking => &params.smoking_emb,
                };
                let idx = value as usize;
                if idx >= table.nrows() {
                    return Err(CelError::validation(format!(
                        "static id {idx} out of embedding range for {field:?}"
                    )));
                }
                row += &table.row(idx);
            }
            None => {
                let code = seq.code_ids[slot] as usize;
                if code >= params.code_emb.nrows() {
                    return Err(CelError::validation(format!(
                        "code id {code} out of embedding range"
                    )));
                }
                let age = (seq.ages[slot] as usize).min(AGE_CARD - 1);
                let year =
                    (seq.years[slot].saturating_sub(YEAR_BASE) as usize).min(YEAR_CARD - 1);
                let pos = seq.positions[slot] as usize;
                if pos >= params.pos_emb.nrows() {
                    return Err(CelError::validation(format!(
                        "position {pos} out of embedding range"
                    )));
                }
                row += &params.code_emb.row(code);
                row += &params.age_emb.row(age);
                row += &params.year_emb.row(year);
                row += &params.pos_emb.row(pos);
            }
        }
    }
    Ok(x)
}

/// Transformer encoder (pre-activation blocks with a final layer norm).
pub fn encoder_forward(
    x0: Array2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: &mut ForwardMode,
) -> EncoderCache {
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let emb_mask = match mode {
        ForwardMode::Train(rng) if cfg.hidden_dropout > 0.0 => {
            Some(dropout_mask(x0.dim(), cfg.hidden_dropout, rng))
        }
        _ => None,
    };
    let mut x = match &emb_mask {
        Some(m) => &x0 * m,
        None => x0,
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let x_in = x;
        let (a, ln1) = layer_norm(&x_in, &lp.ln1_g, &lp.ln1_b);
        let q = a.dot(&lp.wq) + &lp.bq;
        let k = a.dot(&lp.wk) + &lp.bk;
        let v = a.dot(&lp.wv) + &lp.bv;

        let l = x_in.nrows();
        let mut ctx = Array2::<f64>::zeros((l, cfg.hidden));
        let mut probs_all = Vec::with_capacity(nh);
        let mut attn_mask_all: Option<Vec<Array2<f64>>> = match mode {
            ForwardMode::Train(_) if cfg.attention_dropout > 0.0 => Some(Vec::with_capacity(nh)),
            _ => None,
        };
        for head in 0..nh {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let probs = scores;
            let dropped = if let (ForwardMode::Train(rng), Some(masks)) =
                (&mut *mode, attn_mask_all.as_mut())
            {
                let mask = dropout_mask(probs.dim(), cfg.attention_dropout, rng);
                let d = &probs * &mask;
                masks.push(mask);
                d
            } else {
                probs.clone()
            };
            ctx.slice_mut(cols).assign(&dropped.dot(&vh));
            probs_all.push(probs);
        }
        let proj = ctx.dot(&lp.wo) + &lp.bo;
        let proj_mask = match mode {
            ForwardMode::Train(rng) if cfg.hidden_dropout > 0.0 => {
                Some(dropout_mask(proj.dim(), cfg.hidden_dropout, rng))
            }
            _ => None,
        };
        let projd = match &proj_mask {
            Some(m) => &proj * m,
            None => proj,
        };
        let x_mid = &x_in + &projd;

        let (b2, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let f1 = b2.dot(&lp.ff_w1) + &lp.ff_b1;
        let x_mid_keep = x_mid;
        let gelu_out = f1.mapv(gelu);
        let f2 = gelu_out.dot(&lp.ff_w2) + &lp.ff_b2;
        let ff_mask = match mode {
            ForwardMode::Train(rng) if cfg.hidden_dropout > 0.0 => {
                Some(dropout_mask(f2.dim(), cfg.hidden_dropout, rng))
            }
            _ => None,
        };
        let f2d = match &ff_mask {
            Some(m) => &f2 * m,
            None => f2,
        };
        let x_out = &x_mid_keep + &f2d;

        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs: probs_all,
            attn_mask: attn_mask_all,
            ctx,
            proj_mask,
            ln2,
            b2,
            f1,
            gelu_out,
            ff_mask,
        });
        x = x_out;
    }
    let (latents, ln_f) = layer_norm(&x, &params.ln_f_g, &params.ln_f_b);
    EncoderCache { emb_mask, layers, ln_f, latents }
}

fn mlp1(x: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    x.dot(w) + b
}

/// Causal heads on the CLS latent: pooled tanh projection, a 1-hidden-layer
/// propensity head, and separate 2-hidden-layer outcome heads per arm.
pub fn heads_forward(latents: &Array2<f64>, params: &ModelParams) -> (f64, f64, f64, HeadsCache) {
    let cls = latents.row(0).to_owned();
    let pooled_pre = mlp1(&cls, &params.pooler_w, &params.pooler_b);
    let pooled = pooled_pre.mapv(f64::tanh);

    let g_h_pre = mlp1(&pooled, &params.g_w1, &params.g_b1);
    let g_h = g_h_pre.mapv(elu);
    let logit_g = g_h.dot(&params.g_w2.column(0)) + params.g_b2[0];

    let q0_h1_pre = mlp1(&pooled, &params.q0_w1, &params.q0_b1);
    let q0_h1 = q0_h1_pre.mapv(elu);
    let q0_h2_pre = mlp1(&q0_h1, &params.q0_w2, &params.q0_b2);
    let q0_h2 = q0_h2_pre.mapv(elu);
    let logit_q0 = q0_h2.dot(&params.q0_w3.column(0)) + params.q0_b3[0];

    let q1_h1_pre = mlp1(&pooled, &params.q1_w1, &params.q1_b1);
    let q1_h1 = q1_h1_pre.mapv(elu);
    let q1_h2_pre = mlp1(&q1_h1, &params.q1_w2, &params.q1_b2);
    let q1_h2 = q1_h2_pre.mapv(elu);
    let logit_q1 = q1_h2.dot(&params.q1_w3.column(0)) + params.q1_b3[0];

    (
        logit_g,
        logit_q0,
        logit_q1,
        HeadsCache {
            pooled_pre,
            pooled,
            g_h_pre,
            g_h,
            q0_h1_pre,
            q0_h1,
            q0_h2_pre,
            q0_h2,
            q1_h1_pre,
            q1_h1,
            q1_h2_pre,
            q1_h2,
        },
    )
}

/// Full forward pass for one (possibly masked) sequence.
///
/// `wants_mem` controls whether the reconstruction heads (masked-encounter
/// logits and the static VAE) are evaluated.
pub fn forward(
    seq: &MaskedSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
    wants_mem: bool,
    mut mode: ForwardMode,
) -> Result<(ForwardOutput, Cache)> {
    let x0 = embed(&seq.input, params, cfg)?;
    let encoder = encoder_forward(x0, params, cfg, &mut mode);
    let latents = &encoder.latents;
    let (logit_g, logit_q0, logit_q1, heads) = heads_forward(latents, params);

    let mut mem_logits = Vec::new();
    let mut vae = None;
    if wants_mem {
        for (slot, label) in seq.temporal_labels.iter().enumerate() {
            if *label != NO_LABEL {
                let logits = latents.row(slot).dot(&params.mem_w) + &params.mem_b;
                mem_logits.push((slot, logits));
            }
        }
        let last = latents.row(latents.nrows() - 1).to_owned();
        let mu = mlp1(&last, &params.vae_mu_w, &params.vae_mu_b);
        let logvar = mlp1(&last, &params.vae_lv_w, &params.vae_lv_b);
        let eps: Array1<f64> = match &mut mode {
            ForwardMode::Eval => Array1::zeros(mu.len()),
            ForwardMode::Train(rng) => {
                (0..mu.len()).map(|_| crate::rng::gauss(rng)).collect()
            }
            ForwardMode::FixedNoise(e) => {
                if e.len() != mu.len() {
                    return Err(CelError::validation(format!(
                        "fixed noise has {} dims, latent needs {}",
                        e.len(),
                        mu.len()
                    )));
                }
                (*e).clone()
            }
        };
        let z: Array1<f64> = (0..mu.len())
            .map(|i| mu[i] + (0.5 * logvar[i]).exp() * eps[i])
            .collect();
        let sex_logit = z.dot(&params.dec_sex_w.column(0)) + params.dec_sex_b[0];
        let region_logits = z.dot(&params.dec_region_w) + &params.dec_region_b;
        let smoking_logit = z.dot(&params.dec_smoking_w.column(0)) + params.dec_smoking_b[0];
        vae = Some(VaeOutput { mu, logvar, z, eps, sex_logit, region_logits, smoking_logit });
    }

    let out = ForwardOutput {
        g: clip(sigmoid(logit_g)),
        q0: clip(sigmoid(logit_q0)),
        q1: clip(sigmoid(logit_q1)),
        logit_g,
        logit_q0,
        logit_q1,
        mem_logits,
        vae,
    };
    let vae_last_slot = seq.input.len() - 1;
    Ok((out, Cache { encoder, heads, vae_last_slot }))
}

/// Relative weights of the loss components in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub outcome: f64,
    pub propensity: f64,
    pub mem_temp: f64,
    pub mem_static: f64,
}

impl LossWeights {
    pub fn supervised_only() -> Self {
        LossWeights { outcome: 1.0, propensity: 1.0, mem_temp: 0.0, mem_static: 0.0 }
    }
}

fn outer_add(grad: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>, scale: f64) {
    for (i, av) in a.iter().enumerate() {
        if *av == 0.0 {
            continue;
        }
        let mut row = grad.row_mut(i);
        for (j, bv) in b.iter().enumerate() {
            row[j] += scale * av * bv;
        }
    }
}

/// Backpropagate the weighted loss for one patient into `grads`.
/// `scale` multiplies every contribution (1/batch for batch means).
#[allow(clippy::too_many_arguments)]
pub fn backward(
    seq: &MaskedSequence,
    t: u8,
    y: u8,
    params: &ModelParams,
    cfg: &ModelConfig,
    out: &ForwardOutput,
    cache: &Cache,
    weights: &LossWeights,
    grads: &mut Gradients,
    scale: f64,
) {
    let latents = &cache.encoder.latents;
    let (l, h) = latents.dim();
    let mut dlat = Array2::<f64>::zeros((l, h));

    // ---- supervised heads ----
    let hc = &cache.heads;
    let mut dpooled = Array1::<f64>::zeros(h);

    let dlogit_g = weights.propensity * (sigmoid(out.logit_g) - f64::from(t)) * scale;
    if dlogit_g != 0.0 {
        for i in 0..h {
            grads.g_w2[[i, 0]] += dlogit_g * hc.g_h[i];
        }
        grads.g_b2[0] += dlogit_g;
        let mut dg_h_pre = Array1::<f64>::zeros(h);
        for i in 0..h {
            dg_h_pre[i] = dlogit_g * params.g_w2[[i, 0]] * elu_prime(hc.g_h_pre[i]);
        }
        outer_add(&mut grads.g_w1, &hc.pooled, &dg_h_pre, 1.0);
        grads.g_b1 += &dg_h_pre;
        dpooled += &params.g_w1.dot(&dg_h_pre);
    }

    let factual_logit = if t == 1 { out.logit_q1 } else { out.logit_q0 };
    let dlogit_q = weights.outcome * (sigmoid(factual_logit) - f64::from(y)) * scale;
    if dlogit_q != 0.0 {
        let (w1, b1, w2, b2, w3, b3, h1_pre, h1, h2_pre, h2) = if t == 1 {
            (
                &params.q1_w1,
                &mut grads.q1_b1,
                &params.q1_w2,
                &mut grads.q1_b2,
                &params.q1_w3,
                &mut grads.q1_b3,
                &hc.q1_h1_pre,
                &hc.q1_h1,
                &hc.q1_h2_pre,
                &hc.q1_h2,
            )
        } else {
            (
                &params.q0_w1,
                &mut grads.q0_b1,
                &params.q0_w2,
                &mut grads.q0_b2,
                &params.q0_w3,
                &mut grads.q0_b3,
                &hc.q0_h1_pre,
                &hc.q0_h1,
                &hc.q0_h2_pre,
                &hc.q0_h2,
            )
        };
        let (gw1, gw2, gw3) = if t == 1 {
            (&mut grads.q1_w1, &mut grads.q1_w2, &mut grads.q1_w3)
        } else {
            (&mut grads.q0_w1, &mut grads.q0_w2, &mut grads.q0_w3)
        };
        for i in 0..h {
            gw3[[i, 0]] += dlogit_q * h2[i];
        }
        b3[0] += dlogit_q;
        let mut dh2 = Array1::<f64>::zeros(h);
        for i in 0..h {
            dh2[i] = dlogit_q * w3[[i, 0]] * elu_prime(h2_pre[i]);
        }
        outer_add(gw2, h1, &dh2, 1.0);
        *b2 += &dh2;
        let mut dh1 = w2.dot(&dh2);
        for i in 0..h {
            dh1[i] *= elu_prime(h1_pre[i]);
        }
        outer_add(gw1, &hc.pooled, &dh1, 1.0);
        *b1 += &dh1;
        dpooled += &w1.dot(&dh1);
    }

    if dpooled.iter().any(|v| *v != 0.0) {
        let mut dpre = Array1::<f64>::zeros(h);
        for i in 0..h {
            dpre[i] = dpooled[i] * (1.0 - hc.pooled[i] * hc.pooled[i]);
        }
        let cls = latents.row(0).to_owned();
        outer_add(&mut grads.pooler_w, &cls, &dpre, 1.0);
        grads.pooler_b += &dpre;
        let dcls = params.pooler_w.dot(&dpre);
        dlat.row_mut(0).scaled_add(1.0, &dcls);
    }

    // ---- masked-encounter reconstruction (mean over labeled slots) ----
    if weights.mem_temp != 0.0 && !out.mem_logits.is_empty() {
        let n_labeled = out.mem_logits.len() as f64;
        let w = weights.mem_temp * scale / n_labeled;
        for (slot, logits) in &out.mem_logits {
            let label = seq.temporal_labels[*slot] as usize;
            let mut dlogits = softmax_vec(logits);
            dlogits[label] -= 1.0;
            dlogits *= w;
            let lat_row = latents.row(*slot).to_owned();
            outer_add(&mut grads.mem_w, &lat_row, &dlogits, 1.0);
            grads.mem_b += &dlogits;
            dlat.row_mut(*slot).scaled_add(1.0, &params.mem_w.dot(&dlogits));
        }
    }

    // ---- static VAE (reconstruction of masked variables + KL) ----
    if weights.mem_static != 0.0 {
        if let Some(vae) = &out.vae {
            let w = weights.mem_static * scale;
            let zdim = vae.mu.len();
            let mut dz = Array1::<f64>::zeros(zdim);
            for (field, value) in &seq.masked_statics {
                match field {
                    StaticField::Sex => {
                        let d = w * (sigmoid(vae.sex_logit) - f64::from(*value));
                        for i in 0..zdim {
                            grads.dec_sex_w[[i, 0]] += d * vae.z[i];
                            dz[i] += d * params.dec_sex_w[[i, 0]];
                        }
                        grads.dec_sex_b[0] += d;
                    }
                    StaticField::Smoking => {
                        let d = w * (sigmoid(vae.smoking_logit) - f64::from(*value));
                        for i in 0..zdim {
                            grads.dec_smoking_w[[i, 0]] += d * vae.z[i];
                            dz[i] += d * params.dec_smoking_w[[i, 0]];
                        }
                        grads.dec_smoking_b[0] += d;
                    }
                    StaticField::Region => {
                        let mut dlogits = softmax_vec(&vae.region_logits);
                        dlogits[*value as usize] -= 1.0;
                        dlogits *= w;
                        outer_add(&mut grads.dec_region_w, &vae.z, &dlogits, 1.0);
                        grads.dec_region_b += &dlogits;
                        dz += &params.dec_region_w.dot(&dlogits);
                    }
                }
            }
            // KL(q || N(0,I)) = 0.5 * sum(mu^2 + e^lv - 1 - lv)
            let mut dmu = dz.clone();
            let mut dlv = Array1::<f64>::zeros(zdim);
            for i in 0..zdim {
                dmu[i] += w * vae.mu[i];
                dlv[i] = dz[i] * 0.5 * (0.5 * vae.logvar[i]).exp() * vae.eps[i]
                    + w * 0.5 * (vae.logvar[i].exp() - 1.0);
            }
            let last = latents.row(cache.vae_last_slot).to_owned();
            outer_add(&mut grads.vae_mu_w, &last, &dmu, 1.0);
            grads.vae_mu_b += &dmu;
            outer_add(&mut grads.vae_lv_w, &last, &dlv, 1.0);
            grads.vae_lv_b += &dlv;
            let dlast = params.vae_mu_w.dot(&dmu) + params.vae_lv_w.dot(&dlv);
            dlat.row_mut(cache.vae_last_slot).scaled_add(1.0, &dlast);
        }
    }

    // ---- final layer norm ----
    let mut dx = layer_norm_backward(
        &dlat,
        &cache.encoder.ln_f,
        &params.ln_f_g,
        &mut grads.ln_f_g,
        &mut grads.ln_f_b,
    );

    // ---- transformer layers, reversed ----
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    for (li, lc) in cache.encoder.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let lg = &mut grads.layers[li];

        // feed-forward block
        let df2 = match &lc.ff_mask {
            Some(m) => &dx * m,
            None => dx.clone(),
        };
        let dgelu = df2.dot(&lp.ff_w2.t());
        lg.ff_w2 += &lc.gelu_out.t().dot(&df2);
        lg.ff_b2 += &df2.sum_axis(Axis(0));
        let mut df1 = dgelu;
        for (dv, pre) in df1.iter_mut().zip(lc.f1.iter()) {
            *dv *= gelu_prime(*pre);
        }
        lg.ff_w1 += &lc.b2.t().dot(&df1);
        lg.ff_b1 += &df1.sum_axis(Axis(0));
        let db2 = df1.dot(&lp.ff_w1.t());
        let dx_mid_ln = layer_norm_backward(&db2, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
        let dx_mid = &dx + &dx_mid_ln;

        // attention block
        let dproj = match &lc.proj_mask {
            Some(m) => &dx_mid * m,
            None => dx_mid.clone(),
        };
        let dctx = dproj.dot(&lp.wo.t());
        lg.wo += &lc.ctx.t().dot(&dproj);
        lg.bo += &dproj.sum_axis(Axis(0));

        let lrows = dctx.nrows();
        let mut dq = Array2::<f64>::zeros((lrows, cfg.hidden));
        let mut dk = Array2::<f64>::zeros((lrows, cfg.hidden));
        let mut dv = Array2::<f64>::zeros((lrows, cfg.hidden));
        for head in 0..nh {
            let cols = s![.., head * dh..(head + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let probs = &lc.probs[head];
            let dropped_probs = match &lc.attn_mask {
                Some(masks) => probs * &masks[head],
                None => probs.clone(),
            };
            let mut dpdrop = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&dropped_probs.t().dot(&dctx_h));
            if let Some(masks) = &lc.attn_mask {
                dpdrop *= &masks[head];
            }
            // softmax backward per row
            let mut dscores = Array2::<f64>::zeros(dpdrop.raw_dim());
            for i in 0..lrows {
                let p_row = probs.row(i);
                let dp_row = dpdrop.row(i);
                let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
                for j in 0..lrows {
                    dscores[[i, j]] = p_row[j] * (dp_row[j] - dot);
                }
            }
            dscores *= att_scale;
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }
        lg.wq += &lc.a.t().dot(&dq);
        lg.bq += &dq.sum_axis(Axis(0));
        lg.wk += &a_out.t().dot(&dk);
        lg.bk += &dk.sum_axis(Axis(0));
        lg.wv += &a_out.t().dot(&dv);
        lg.bv += &dv.sum_axis(Axis(0));
        let da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let dx_in_ln = layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        dx = dx_mid + dx_in_ln;
    }

    // ---- embeddings ----
    let dx0 = match &cache.encoder.emb_mask {
        Some(m) => &dx * m,
        None => dx,
    };
    let seqin = &seq.input;
    for slot in 0..seqin.len() {
        let d = dx0.row(slot);
        match seqin.static_ids[slot] {
            Some((field, value)) => {
                let table = match field {
                    StaticField::Sex => &mut grads.sex_emb,
                    StaticField::Region => &mut grads.region_emb,
                    StaticField::Smoking => &mut grads.smoking_emb,
                };
                let mut row = table.row_mut(value as usize);
                row += &d;
            }
            None => {
                let code = seqin.code_ids[slot] as usize;
                let age = (seqin.ages[slot] as usize).min(AGE_CARD - 1);
                let year =
                    (seqin.years[slot].saturating_sub(YEAR_BASE) as usize).min(YEAR_CARD - 1);
                let pos = seqin.positions[slot] as usize;
                let mut r = grads.code_emb.row_mut(code);
                r += &d;
                let mut r = grads.age_emb.row_mut(age);
                r += &d;
                let mut r = grads.year_emb.row_mut(year);
                r += &d;
                let mut r = grads.pos_emb.row_mut(pos);
                r += &d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{encode_patient, Encounter, PatientRecord, StaticVars};
    use crate::synth::{build_synth_vocab, VocabSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.hidden = 8;
        cfg.intermediate = 12;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.max_seq_len = 16;
        cfg.vae_latent_dim = 4;
        cfg.hidden_dropout = 0.0;
        cfg.attention_dropout = 0.0;
        cfg.seed = 13;
        cfg
    }

    fn sample_patient(n: usize) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            statics: StaticVars { sex: 1, region: 3, smoking: 0 },
            encounters: (0..n)
                .map(|i| Encounter {
                    code: 5 + (i % 7) as u32,
                    age: 45 + (i / 3) as u16,
                    year: 1998 + (i / 3) as u16,
                    position: i as u32,
                })
                .collect(),
            exposure: 1,
            outcome: 0,
            potential: None,
            lambda: None,
        }
    }

    fn setup(n_enc: usize) -> (Vocabulary, ModelConfig, ModelParams, EncodedSequence) {
        let vocab = build_synth_vocab(&VocabSpec {
            diagnoses: 12,
            medications: 6,
            diagnosis_groups: 3,
            medication_groups: 2,
            regions: 6,
        })
        .unwrap();
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, vocab.len());
        let enc = encode_patient(&sample_patient(n_enc), &vocab, cfg.max_seq_len).unwrap();
        (vocab, cfg, params, enc)
    }

    #[test]
    fn zero_embedding_tables_give_zero_embedding() {
        let (_, cfg, mut params, enc) = setup(4);
        for (name, slice) in params.named_slices_mut() {
            if name.ends_with("_emb") {
                slice.fill(0.0);
            }
        }
        let x = embed(&enc, &params, &cfg).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_shape_is_l_by_hidden_paper() {
        let vocab = build_synth_vocab(&VocabSpec::default()).unwrap();
        let cfg = ModelConfig::paper();
        let params = ModelParams::zeros(&cfg, vocab.len());
        let enc = encode_patient(&sample_patient(5), &vocab, cfg.max_seq_len).unwrap();
        let x = embed(&enc, &params, &cfg).unwrap();
        assert_eq!(x.dim(), (5 + 1 + 3, 150));
    }

    #[test]
    fn one_hot_embedding_fixture() {
        // two temporal tokens with hand-set rows: output = sum of rows
        let (_, cfg, mut params, enc) = setup(2);
        params.fill(0.0);
        params.code_emb[[enc.code_ids[1] as usize, 0]] = 1.0;
        params.age_emb[[enc.ages[1] as usize, 1]] = 2.0;
        params.year_emb[[(enc.years[1] - YEAR_BASE) as usize, 2]] = 3.0;
        params.pos_emb[[1, 3]] = 4.0;
        let x = embed(&enc, &params, &cfg).unwrap();
        assert_eq!(x[[1, 0]], 1.0);
        assert_eq!(x[[1, 1]], 2.0);
        assert_eq!(x[[1, 2]], 3.0);
        assert_eq!(x[[1, 3]], 4.0);
        assert_eq!(x.row(0).sum(), 0.0);
    }

    #[test]
    fn encoder_deterministic_without_dropout() {
        let (_, cfg, params, enc) = setup(5);
        let x1 = embed(&enc, &params, &cfg).unwrap();
        let a = encoder_forward(x1.clone(), &params, &cfg, &mut ForwardMode::Eval);
        let b = encoder_forward(x1, &params, &cfg, &mut ForwardMode::Eval);
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn joint_permutation_of_encounters_preserves_cls_latent() {
        let (_, cfg, params, enc) = setup(5);
        let mut swapped = enc.clone();
        // swap encounter slots 1 and 2 together with their timestamps and
        // position ids: the per-slot embedding set is unchanged
        swapped.code_ids.swap(1, 2);
        swapped.ages.swap(1, 2);
        swapped.years.swap(1, 2);
        swapped.positions.swap(1, 2);
        let xa = embed(&enc, &params, &cfg).unwrap();
        let xb = embed(&swapped, &params, &cfg).unwrap();
        let la = encoder_forward(xa, &params, &cfg, &mut ForwardMode::Eval);
        let lb = encoder_forward(xb, &params, &cfg, &mut ForwardMode::Eval);
        for j in 0..cfg.hidden {
            assert_abs_diff_eq!(la.latents[[0, j]], lb.latents[[0, j]], epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (_, cfg, params, enc) = setup(6);
        let x = embed(&enc, &params, &cfg).unwrap();
        let cache = encoder_forward(x, &params, &cfg, &mut ForwardMode::Eval);
        for layer in &cache.layers {
            for probs in &layer.probs {
                for row in probs.rows() {
                    assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_half_probabilities() {
        let (_, cfg, mut params, enc) = setup(3);
        params.fill(0.0);
        // keep LN gains at zero too: latents all zero, heads all zero
        let masked = MaskedSequence::unperturbed(&enc);
        let (out, _) = forward(&masked, &params, &cfg, false, ForwardMode::Eval).unwrap();
        assert_abs_diff_eq!(out.g, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.q0, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.q1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn outcome_branches_are_isolated() {
        let (_, cfg, params, enc) = setup(4);
        let masked = MaskedSequence::unperturbed(&enc);
        let (base, _) = forward(&masked, &params, &cfg, false, ForwardMode::Eval).unwrap();
        let mut perturbed = params.clone();
        perturbed.q1_w2[[0, 0]] += 0.37;
        perturbed.q1_b1[2] -= 0.21;
        let (out, _) = forward(&masked, &perturbed, &cfg, false, ForwardMode::Eval).unwrap();
        assert_eq!(out.q0, base.q0);
        assert_ne!(out.q1, base.q1);
        assert_eq!(out.g, base.g);

        let mut perturbed0 = params.clone();
        perturbed0.q0_w3[[1, 0]] += 0.5;
        let (out0, _) = forward(&masked, &perturbed0, &cfg, false, ForwardMode::Eval).unwrap();
        assert_eq!(out0.q1, base.q1);
        assert_ne!(out0.q0, base.q0);
    }

    #[test]
    fn scalar_propensity_head_fixture() {
        // hand-set single-path weights: g = sigmoid(w2 . elu(w1 . pooled))
        let (_, cfg, mut params, enc) = setup(2);
        params.fill(0.0);
        // make the pooled vector non-trivial through the pooler bias
        params.pooler_b[0] = 0.3;
        params.pooler_b[1] = -0.4;
        params.g_w1[[0, 0]] = 0.7;
        params.g_w1[[1, 0]] = -0.2;
        params.g_b1[0] = 0.05;
        params.g_w2[[0, 0]] = 1.3;
        params.g_b2[0] = -0.1;
        let masked = MaskedSequence::unperturbed(&enc);
        let (out, _) = forward(&masked, &params, &cfg, false, ForwardMode::Eval).unwrap();
        let pooled0 = 0.3f64.tanh();
        let pooled1 = (-0.4f64).tanh();
        let hpre = 0.7 * pooled0 - 0.2 * pooled1 + 0.05;
        let hval = if hpre > 0.0 { hpre } else { hpre.exp() - 1.0 };
        let expect = sigmoid(1.3 * hval - 0.1);
        assert_abs_diff_eq!(out.g, expect, epsilon = 1e-12);
    }

    #[test]
    fn dropout_masks_scale_correctly() {
        let mut rng = crate::rng::stream(3, crate::rng::Domain::Train, 0);
        let m = dropout_mask((200, 50), 0.3, &mut rng);
        let keep = 1.0 / 0.7;
        assert!(m.iter().all(|v| *v == 0.0 || (*v - keep).abs() < 1e-12));
        let frac = m.iter().filter(|v| **v == 0.0).count() as f64 / 10_000.0;
        assert!((frac - 0.3).abs() < 0.02, "dropped fraction {frac}");
    }
}
