//! Training: Adam with per-epoch exponential decay, reconstruction-only
//! pretraining, joint training per mode, and five-fold out-of-fold
//! prediction.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{encode_patient, Cohort, EncodedSequence};
use crate::error::{CelError, Result};
use crate::estimators::PredictionTriple;
use crate::folds::kfold_split;
use crate::rng::{self, mix64, Domain};

use super::config::ModelConfig;
use super::loss::{loss_parts, LossParts};
use super::masking::{mask_encounters, MaskedSequence, ReplacementPool};
use super::net::{backward, forward, ForwardMode, LossWeights};
use super::params::ModelParams;

/// Which loss terms a model variant trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Outcome heads only.
    Tarnet,
    /// Outcome heads plus masked reconstruction.
    TarnetMem,
    /// Outcome and propensity heads.
    Dragonnet,
    /// Outcome, propensity, and masked reconstruction.
    TBehrt,
}

impl FitMode {
    pub fn uses_mem(&self) -> bool {
        matches!(self, FitMode::TarnetMem | FitMode::TBehrt)
    }

    pub fn uses_propensity(&self) -> bool {
        matches!(self, FitMode::Dragonnet | FitMode::TBehrt)
    }

    /// Loss weights for joint training under this mode.
    pub fn weights(&self, delta: f64) -> LossWeights {
        LossWeights {
            outcome: 1.0,
            propensity: if self.uses_propensity() { 1.0 } else { 0.0 },
            mem_temp: if self.uses_mem() { delta } else { 0.0 },
            mem_static: if self.uses_mem() { delta } else { 0.0 },
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tarnet" => Ok(FitMode::Tarnet),
            "tarnet-mem" => Ok(FitMode::TarnetMem),
            "dragonnet" => Ok(FitMode::Dragonnet),
            "t-behrt" => Ok(FitMode::TBehrt),
            other => Err(CelError::config(format!(
                "unknown mode '{other}' (expected tarnet|tarnet-mem|dragonnet|t-behrt)"
            ))),
        }
    }
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FitMode::Tarnet => "tarnet",
            FitMode::TarnetMem => "tarnet-mem",
            FitMode::Dragonnet => "dragonnet",
            FitMode::TBehrt => "t-behrt",
        };
        f.write_str(s)
    }
}

/// Adam with bias correction; the learning rate decays by `decay_rate`
/// once per epoch.
struct Adam {
    m: ModelParams,
    v: ModelParams,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(cfg: &ModelConfig, vocab_size: usize) -> Self {
        Adam {
            m: ModelParams::zeros(cfg, vocab_size),
            v: ModelParams::zeros(cfg, vocab_size),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &mut ModelParams, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let slices = params.named_slices_mut();
        let gs = grads.named_slices_mut();
        let ms = self.m.named_slices_mut();
        let vs = self.v.named_slices_mut();
        for (((p, g), m), v) in slices
            .into_iter()
            .zip(gs.into_iter())
            .zip(ms.into_iter())
            .zip(vs.into_iter())
        {
            for i in 0..p.1.len() {
                let grad = g.1[i];
                m.1[i] = self.beta1 * m.1[i] + (1.0 - self.beta1) * grad;
                v.1[i] = self.beta2 * v.1[i] + (1.0 - self.beta2) * grad * grad;
                let mhat = m.1[i] / bc1;
                let vhat = v.1[i] / bc2;
                p.1[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Everything `fit` produces: one parameter set per fold, out-of-fold
/// predictions for every patient, the fold assignment, and loss traces.
pub struct FitResult {
    pub fold_params: Vec<ModelParams>,
    pub preds: Vec<PredictionTriple>,
    pub fold_assignment: Vec<usize>,
    pub pretrain_log: Vec<LossParts>,
    pub joint_logs: Vec<Vec<LossParts>>,
}

struct TrainContext<'a> {
    cohort: &'a Cohort,
    encoded: Vec<EncodedSequence>,
    pool: ReplacementPool,
    cfg: &'a ModelConfig,
}

fn check_finite(parts: &LossParts, epoch: usize, batch: usize) -> Result<()> {
    let vals = [parts.outcome, parts.propensity, parts.mem_temp, parts.mem_static];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(CelError::numeric(format!(
            "non-finite loss at epoch {epoch}, batch {batch}: \
             outcome={} propensity={} mem_temp={} mem_static={}",
            parts.outcome, parts.propensity, parts.mem_temp, parts.mem_static
        )));
    }
    Ok(())
}

/// One pass over `indices` in shuffled minibatches; returns the epoch-mean
/// loss parts.
#[allow(clippy::too_many_arguments)]
fn train_epoch(
    ctx: &TrainContext,
    params: &mut ModelParams,
    adam: &mut Adam,
    indices: &[usize],
    weights: &LossWeights,
    wants_mem: bool,
    lr: f64,
    rng_salt: u64,
    epoch: usize,
    deadline: Option<Instant>,
) -> Result<LossParts> {
    if let Some(d) = deadline {
        if Instant::now() > d {
            return Err(CelError::Timeout(Default::default()));
        }
    }
    let cfg = ctx.cfg;
    let mut order: Vec<usize> = indices.to_vec();
    let mut shuffle_rng = rng::stream(cfg.seed ^ mix64(rng_salt), Domain::Train, epoch as u64);
    order.shuffle(&mut shuffle_rng);

    let mut grads = ModelParams::zeros(cfg, ctx.cohort.vocabulary.len());
    let mut epoch_parts = LossParts::default();
    let mut seen = 0usize;

    for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
        grads.fill(0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut batch_parts = LossParts::default();
        for idx in batch {
            let enc = &ctx.encoded[*idx];
            let mut patient_rng = rng::stream(
                cfg.seed ^ mix64(rng_salt.wrapping_add(1 + epoch as u64)),
                Domain::Masking,
                *idx as u64,
            );
            let masked = if wants_mem {
                mask_encounters(enc, &ctx.cohort.vocabulary, &ctx.pool, cfg, &mut patient_rng)
            } else {
                MaskedSequence::unperturbed(enc)
            };
            let p = &ctx.cohort.patients[*idx];
            let (out, cache) = forward(
                &masked,
                params,
                cfg,
                wants_mem,
                ForwardMode::Train(&mut patient_rng),
            )?;
            let parts = loss_parts(&out, &masked, p.exposure, p.outcome);
            check_finite(&parts, epoch, bi)?;
            batch_parts.add(&parts);
            backward(
                &masked, p.exposure, p.outcome, params, cfg, &out, &cache, weights, &mut grads,
                scale,
            );
        }
        adam.update(params, &mut grads, lr);
        epoch_parts.add(&batch_parts);
        seen += batch.len();
    }
    Ok(epoch_parts.scaled(1.0 / seen.max(1) as f64))
}

/// Reconstruction-only pretraining over the whole cohort (covariates only;
/// exposures and outcomes are never touched). Stands in for large-corpus
/// pretraining.
fn pretrain(ctx: &TrainContext, deadline: Option<Instant>) -> Result<(ModelParams, Vec<LossParts>)> {
    let cfg = ctx.cfg;
    let mut params = ModelParams::init(cfg, ctx.cohort.vocabulary.len());
    let mut adam = Adam::new(cfg, ctx.cohort.vocabulary.len());
    let weights = LossWeights { outcome: 0.0, propensity: 0.0, mem_temp: 1.0, mem_static: 1.0 };
    let all: Vec<usize> = (0..ctx.cohort.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs_pretrain);
    for epoch in 0..cfg.epochs_pretrain {
        let lr = cfg.learning_rate * cfg.decay_rate.powi(epoch as i32);
        let parts = train_epoch(
            ctx, &mut params, &mut adam, &all, &weights, true, lr, u64::MAX, epoch, deadline,
        )?;
        log.push(parts);
    }
    Ok((params, log))
}

/// Fit under the five-fold protocol: every patient's prediction comes from
/// the fold where it was held out. Deterministic given the config seed.
pub fn fit(
    cohort: &Cohort,
    cfg: &ModelConfig,
    mode: FitMode,
    k_folds: usize,
    deadline: Option<Instant>,
) -> Result<FitResult> {
    cfg.validate()?;
    cohort.validate()?;
    let encoded: Vec<EncodedSequence> = cohort
        .patients
        .iter()
        .map(|p| encode_patient(p, &cohort.vocabulary, cfg.max_seq_len))
        .collect::<Result<_>>()?;
    let ctx = TrainContext {
        cohort,
        encoded,
        pool: ReplacementPool::new(&cohort.vocabulary),
        cfg,
    };
    let fold_assignment = kfold_split(cohort, k_folds, cfg.seed)?;

    let (init_params, pretrain_log) = if mode.uses_mem() {
        pretrain(&ctx, deadline)?
    } else {
        (ModelParams::init(cfg, cohort.vocabulary.len()), Vec::new())
    };

    let weights = mode.weights(cfg.delta);
    let fold_results: Vec<Result<(ModelParams, Vec<LossParts>, Vec<PredictionTriple>)>> = (0
        ..k_folds)
        .into_par_iter()
        .map(|fold| {
            let train_idx: Vec<usize> = (0..cohort.len())
                .filter(|i| fold_assignment[*i] != fold)
                .collect();
            let test_idx: Vec<usize> = (0..cohort.len())
                .filter(|i| fold_assignment[*i] == fold)
                .collect();
            let mut params = init_params.clone();
            let mut adam = Adam::new(cfg, cohort.vocabulary.len());
            let mut log = Vec::with_capacity(cfg.epochs_joint);
            for epoch in 0..cfg.epochs_joint {
                let lr = cfg.learning_rate * cfg.decay_rate.powi(epoch as i32);
                let parts = train_epoch(
                    &ctx,
                    &mut params,
                    &mut adam,
                    &train_idx,
                    &weights,
                    mode.uses_mem(),
                    lr,
                    fold as u64,
                    epoch,
                    deadline,
                )?;
                log.push(parts);
            }
            let mut preds = Vec::with_capacity(test_idx.len());
            for idx in &test_idx {
                let masked = MaskedSequence::unperturbed(&ctx.encoded[*idx]);
                let (out, _) = forward(&masked, &params, cfg, false, ForwardMode::Eval)?;
                let p = &cohort.patients[*idx];
                preds.push(PredictionTriple {
                    patient_id: p.id.clone(),
                    fold,
                    q0: out.q0,
                    q1: out.q1,
                    g: out.g,
                    t: p.exposure,
                    y: p.outcome,
                });
            }
            Ok((params, log, preds))
        })
        .collect();

    let mut fold_params = Vec::with_capacity(k_folds);
    let mut joint_logs = Vec::with_capacity(k_folds);
    let mut preds = Vec::with_capacity(cohort.len());
    for result in fold_results {
        let (params, log, fold_preds) = result?;
        fold_params.push(params);
        joint_logs.push(log);
        preds.extend(fold_preds);
    }
    // stable output order regardless of fold scheduling
    preds.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(FitResult { fold_params, preds, fold_assignment, pretrain_log, joint_logs })
}
