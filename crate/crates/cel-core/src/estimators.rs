//! Risk-ratio estimation: plug-in, targeted fluctuation, pooled CV-TMLE,
//! trimming, fold confidence intervals, and SAE scoring.

use serde::{Deserialize, Serialize};

use crate::error::{CelError, Result};
use crate::synth::sigmoid;

/// Probabilities are kept strictly inside (0,1) with this floor.
pub const PROB_FLOOR: f64 = 1e-6;

/// Propensity trimming bounds; boundary values are kept.
pub const TRIM_LOW: f64 = 0.03;
pub const TRIM_HIGH: f64 = 0.97;

/// Out-of-fold predictions for one patient: the interface between model
/// fitting and estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriple {
    pub patient_id: String,
    pub fold: usize,
    pub q0: f64,
    pub q1: f64,
    pub g: f64,
    pub t: u8,
    pub y: u8,
}

impl PredictionTriple {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("q0", self.q0), ("q1", self.q1), ("g", self.g)] {
            if !(v.is_finite() && v > 0.0 && v < 1.0) {
                return Err(CelError::validation(format!(
                    "patient {}: {name}={v} outside (0,1)",
                    self.patient_id
                )));
            }
        }
        if self.t > 1 || self.y > 1 {
            return Err(CelError::validation(format!(
                "patient {}: t/y must be 0/1",
                self.patient_id
            )));
        }
        Ok(())
    }

    /// Predicted probability for the factual arm.
    pub fn q_factual(&self) -> f64 {
        if self.t == 1 {
            self.q1
        } else {
            self.q0
        }
    }
}

/// Fluctuation coefficients for the control/treated clever covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationEps {
    pub eps0: f64,
    pub eps1: f64,
}

/// Which interval construction produced the primary CI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiKind {
    FoldSpread,
    InfluenceCurve,
    None,
}

/// One estimator's answer: point estimate, 95% CI, per-fold values,
/// fluctuation (when targeted), and trimming tally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: String,
    pub rr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ci_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ci_high: Option<f64>,
    pub ci_kind: CiKind,
    pub per_fold: Vec<f64>,
    /// Secondary fold-spread interval when the primary CI is influence-curve.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold_ci: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eps: Option<FluctuationEps>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_fold_eps: Option<Vec<FluctuationEps>>,
    pub n_trimmed: usize,
}

impl EstimateReport {
    /// Standard error implied by the primary CI, when present.
    pub fn se(&self) -> Option<f64> {
        match (self.ci_low, self.ci_high) {
            (Some(lo), Some(hi)) => Some((hi - lo) / (2.0 * 1.96)),
            _ => None,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Keep patients whose propensity lies in [0.03, 0.97] (boundary-inclusive;
/// the exclusion rule is strictly greater/less than the thresholds).
pub fn trim(preds: &[PredictionTriple]) -> Result<(Vec<PredictionTriple>, usize)> {
    let kept: Vec<PredictionTriple> = preds
        .iter()
        .filter(|p| p.g >= TRIM_LOW && p.g <= TRIM_HIGH)
        .cloned()
        .collect();
    if kept.is_empty() && !preds.is_empty() {
        return Err(CelError::Undefined("all patients trimmed by propensity bounds".into()));
    }
    let n_trimmed = preds.len() - kept.len();
    Ok((kept, n_trimmed))
}

fn sorted_folds(preds: &[PredictionTriple]) -> Vec<usize> {
    let mut folds: Vec<usize> = preds.iter().map(|p| p.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    folds
}

fn fold_rr(preds: &[PredictionTriple], fold: usize) -> Result<f64> {
    let (mut s1, mut s0, mut n) = (0.0, 0.0, 0usize);
    for p in preds.iter().filter(|p| p.fold == fold) {
        s1 += p.q1;
        s0 += p.q0;
        n += 1;
    }
    if n == 0 {
        return Err(CelError::Undefined(format!("fold {fold} is empty")));
    }
    let m0 = s0 / n as f64;
    if m0 < 1e-12 {
        return Err(CelError::Undefined(format!(
            "fold {fold}: mean control prediction {m0} below 1e-12"
        )));
    }
    Ok((s1 / n as f64) / m0)
}

/// Plug-in estimator: per-fold mean(q1)/mean(q0), averaged over folds, with
/// a fold-spread CI when at least two folds are present.
pub fn naive_rr(preds: &[PredictionTriple]) -> Result<EstimateReport> {
    if preds.is_empty() {
        return Err(CelError::Undefined("no predictions".into()));
    }
    for p in preds {
        p.validate()?;
    }
    let folds = sorted_folds(preds);
    let per_fold: Vec<f64> = folds
        .iter()
        .map(|f| fold_rr(preds, *f))
        .collect::<Result<_>>()?;
    let (rr, ci) = if per_fold.len() >= 2 {
        let (mean, lo, hi) = fold_ci(&per_fold)?;
        (mean, Some((lo, hi)))
    } else {
        (per_fold[0], None)
    };
    Ok(EstimateReport {
        method: "naive".into(),
        rr,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        ci_kind: if ci.is_some() { CiKind::FoldSpread } else { CiKind::None },
        per_fold,
        fold_ci: None,
        eps: None,
        per_fold_eps: None,
        n_trimmed: 0,
    })
}

/// Log-likelihood of the fluctuation submodel at (eps0, eps1).
///
/// The submodel perturbs the factual-arm prediction along the clever
/// covariates h1 = t/g and h0 = (1-t)/(1-g):
/// `logit q* = logit q_t + eps1*h1 + eps0*h0`.
pub fn fluctuation_loglik(preds: &[PredictionTriple], eps0: f64, eps1: f64) -> f64 {
    let mut ll = 0.0;
    for p in preds {
        let (h0, h1) = clever(p);
        let eta = logit(p.q_factual()) + eps1 * h1 + eps0 * h0;
        let prob = sigmoid(eta).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        ll += if p.y == 1 { prob.ln() } else { (1.0 - prob).ln() };
    }
    ll
}

fn clever(p: &PredictionTriple) -> (f64, f64) {
    if p.t == 1 {
        (0.0, 1.0 / p.g)
    } else {
        (1.0 / (1.0 - p.g), 0.0)
    }
}

fn score_and_curvature(preds: &[PredictionTriple], eps0: f64, eps1: f64) -> ([f64; 2], [f64; 2]) {
    let mut score = [0.0f64; 2];
    let mut curv = [0.0f64; 2];
    for p in preds {
        let (h0, h1) = clever(p);
        let eta = logit(p.q_factual()) + eps1 * h1 + eps0 * h0;
        let prob = sigmoid(eta);
        let resid = f64::from(p.y) - prob;
        let w = prob * (1.0 - prob);
        score[0] += h0 * resid;
        score[1] += h1 * resid;
        curv[0] += h0 * h0 * w;
        curv[1] += h1 * h1 * w;
    }
    (score, curv)
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
        if (hi - lo).abs() < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Solve the two-parameter fluctuation and return every patient with both
/// arms updated: `q1* = expit(logit q1 + eps1/g)`,
/// `q0* = expit(logit q0 + eps0/(1-g))`.
///
/// Newton with likelihood backtracking; the two coordinates decouple (each
/// patient has exactly one active clever covariate), so the Hessian is
/// diagonal. Coordinates with degenerate curvature fall back to a
/// golden-section scan of the profile likelihood.
pub fn tmle_fluctuate(
    preds: &[PredictionTriple],
) -> Result<(Vec<PredictionTriple>, FluctuationEps)> {
    if preds.is_empty() {
        return Err(CelError::Undefined("no predictions to fluctuate".into()));
    }
    for p in preds {
        p.validate()?;
    }
    let mut eps = [0.0f64; 2];
    let mut ll = fluctuation_loglik(preds, eps[0], eps[1]);
    let mut converged = false;
    for _ in 0..100 {
        let (score, curv) = score_and_curvature(preds, eps[0], eps[1]);
        if score[0].abs() < 1e-10 && score[1].abs() < 1e-10 {
            converged = true;
            break;
        }
        // condition check on the diagonal Hessian
        let cmax = curv[0].max(curv[1]);
        let cmin = curv[0].min(curv[1]);
        if cmin <= 0.0 || cmax / cmin > 1e8 {
            for k in 0..2 {
                let other = eps[1 - k];
                eps[k] = golden_section_max(
                    |e| {
                        if k == 0 {
                            fluctuation_loglik(preds, e, other)
                        } else {
                            fluctuation_loglik(preds, other, e)
                        }
                    },
                    -8.0,
                    8.0,
                );
            }
            ll = fluctuation_loglik(preds, eps[0], eps[1]);
            continue;
        }
        let step = [score[0] / curv[0], score[1] / curv[1]];
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = [eps[0] + scale * step[0], eps[1] + scale * step[1]];
            let cand_ll = fluctuation_loglik(preds, cand[0], cand[1]);
            // float-resolution allowance so Newton can finish its quadratic
            // phase on large cohorts
            if cand_ll >= ll - 1e-10 * (1.0 + ll.abs()) {
                eps = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let (score, _) = score_and_curvature(preds, eps[0], eps[1]);
        let norm = score[0].abs().max(score[1].abs());
        if norm >= 1e-8 {
            return Err(CelError::numeric(format!(
                "fluctuation solve did not converge within 100 iterations \
                 (score norm {norm:.3e})"
            )));
        }
    }

    let eps_out = FluctuationEps { eps0: eps[0], eps1: eps[1] };
    let updated = preds
        .iter()
        .map(|p| {
            let mut u = p.clone();
            u.q1 = sigmoid(logit(p.q1) + eps_out.eps1 / p.g)
                .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            u.q0 = sigmoid(logit(p.q0) + eps_out.eps0 / (1.0 - p.g))
                .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            u
        })
        .collect();
    Ok((updated, eps_out))
}

/// Residual score equations at the returned fluctuation (diagnostic).
pub fn fluctuation_score(preds: &[PredictionTriple], eps: FluctuationEps) -> (f64, f64) {
    let (score, _) = score_and_curvature(preds, eps.eps0, eps.eps1);
    (score[0], score[1])
}

/// Pooled CV-TMLE: trim, run one fluctuation over all out-of-fold
/// predictions, and read the risk ratio off the targeted arms. The primary
/// CI comes from the efficient-influence-curve variance of log RR; a
/// fold-spread interval over per-fold targeted plug-ins is also emitted.
pub fn cv_tmle_rr(preds: &[PredictionTriple]) -> Result<EstimateReport> {
    if preds.is_empty() {
        return Err(CelError::Undefined("no predictions".into()));
    }
    let mut ids: Vec<&str> = preds.iter().map(|p| p.patient_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != preds.len() {
        return Err(CelError::validation(
            "cv-tmle requires exactly one out-of-fold prediction per patient",
        ));
    }
    let (kept, n_trimmed) = trim(preds)?;
    let (updated, eps) = tmle_fluctuate(&kept)?;

    let n = updated.len() as f64;
    let psi1 = updated.iter().map(|p| p.q1).sum::<f64>() / n;
    let psi0 = updated.iter().map(|p| p.q0).sum::<f64>() / n;
    if psi0 < 1e-12 {
        return Err(CelError::Undefined("targeted control mean below 1e-12".into()));
    }
    let rr = psi1 / psi0;

    // efficient influence curve of log RR = D1/psi1 - D0/psi0
    let mut var = 0.0;
    for p in &updated {
        let t = f64::from(p.t);
        let y = f64::from(p.y);
        let d1 = t / p.g * (y - p.q1) + p.q1 - psi1;
        let d0 = (1.0 - t) / (1.0 - p.g) * (y - p.q0) + p.q0 - psi0;
        let ic = d1 / psi1 - d0 / psi0;
        var += ic * ic;
    }
    var /= n;
    let se_log = (var / n).sqrt();
    let (ci_low, ci_high) = ((rr.ln() - 1.96 * se_log).exp(), (rr.ln() + 1.96 * se_log).exp());

    let folds = sorted_folds(&updated);
    let per_fold: Vec<f64> = folds
        .iter()
        .map(|f| fold_rr(&updated, *f))
        .collect::<Result<_>>()?;
    let fold_interval = if per_fold.len() >= 2 {
        let (_, lo, hi) = fold_ci(&per_fold)?;
        Some((lo, hi))
    } else {
        None
    };

    Ok(EstimateReport {
        method: "cv-tmle".into(),
        rr,
        ci_low: Some(ci_low),
        ci_high: Some(ci_high),
        ci_kind: CiKind::InfluenceCurve,
        per_fold,
        fold_ci: fold_interval,
        eps: Some(eps),
        per_fold_eps: None,
        n_trimmed,
    })
}

/// Mean and normal-approximation 95% CI over fold values
/// (sample standard deviation, k-1 denominator).
pub fn fold_ci(per_fold: &[f64]) -> Result<(f64, f64, f64)> {
    let k = per_fold.len();
    if k < 2 {
        return Err(CelError::Undefined("fold CI needs at least 2 folds".into()));
    }
    let mean = per_fold.iter().sum::<f64>() / k as f64;
    let var = per_fold.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    let half = 1.96 * var.sqrt() / (k as f64).sqrt();
    Ok((mean, mean - half, mean + half))
}

/// Sum of absolute errors between estimates and ground truths.
pub fn sae(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(CelError::validation(format!(
            "sae length mismatch: {} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    Ok(estimates.iter().zip(truths).map(|(e, t)| (e - t).abs()).sum())
}

/// Additive propagation of error: sqrt of the sum of squared SEs.
pub fn sae_se(fold_ses: &[f64]) -> f64 {
    fold_ses.iter().map(|s| s * s).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn triple(id: usize, fold: usize, q0: f64, q1: f64, g: f64, t: u8, y: u8) -> PredictionTriple {
        PredictionTriple { patient_id: format!("p{id}"), fold, q0, q1, g, t, y }
    }

    #[test]
    fn trim_examples() {
        let gs = [0.01, 0.5, 0.98, 0.97, 0.03];
        let preds: Vec<PredictionTriple> = gs
            .iter()
            .enumerate()
            .map(|(i, g)| triple(i, 0, 0.5, 0.5, *g, 0, 0))
            .collect();
        let (kept, n_trimmed) = trim(&preds).unwrap();
        assert_eq!(n_trimmed, 2);
        let kept_g: Vec<f64> = kept.iter().map(|p| p.g).collect();
        assert_eq!(kept_g, vec![0.5, 0.97, 0.03]);
    }

    #[test]
    fn trim_identity_and_idempotence() {
        let preds: Vec<PredictionTriple> =
            (0..10).map(|i| triple(i, 0, 0.5, 0.5, 0.5, 0, 0)).collect();
        let (kept, n) = trim(&preds).unwrap();
        assert_eq!(n, 0);
        assert_eq!(kept, preds);
        let (again, n2) = trim(&kept).unwrap();
        assert_eq!(n2, 0);
        assert_eq!(again, kept); // idempotent and order-preserving
    }

    #[test]
    fn trim_uniform_kept_fraction() {
        let mut rng = crate::rng::stream(5, crate::rng::Domain::Init, 0);
        let n = 10_000;
        let preds: Vec<PredictionTriple> = (0..n)
            .map(|i| triple(i, 0, 0.5, 0.5, rng.random::<f64>().clamp(1e-9, 1.0 - 1e-9), 0, 0))
            .collect();
        let (kept, _) = trim(&preds).unwrap();
        let frac = kept.len() as f64 / n as f64;
        let sigma = (0.94 * 0.06 / n as f64).sqrt();
        assert!((frac - 0.94).abs() < 3.0 * sigma, "kept fraction {frac}");
    }

    #[test]
    fn trim_all_is_error() {
        let preds = vec![triple(0, 0, 0.5, 0.5, 0.99, 0, 0)];
        assert!(trim(&preds).is_err());
    }

    #[test]
    fn naive_single_fold() {
        let preds = vec![triple(0, 0, 0.1, 0.2, 0.5, 0, 0), triple(1, 0, 0.3, 0.4, 0.5, 1, 1)];
        let rep = naive_rr(&preds).unwrap();
        assert_abs_diff_eq!(rep.rr, 1.5, epsilon = 1e-12);
        assert!(rep.ci_low.is_none());
    }

    #[test]
    fn naive_identity_when_arms_equal() {
        let preds: Vec<PredictionTriple> =
            (0..8).map(|i| triple(i, i % 2, 0.3, 0.3, 0.5, 0, 0)).collect();
        let rep = naive_rr(&preds).unwrap();
        assert_abs_diff_eq!(rep.rr, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn naive_fold_mean() {
        // fold 0 rr = 1.0, fold 1 rr = 2.0
        let preds = vec![
            triple(0, 0, 0.2, 0.2, 0.5, 0, 0),
            triple(1, 1, 0.2, 0.4, 0.5, 0, 0),
        ];
        let rep = naive_rr(&preds).unwrap();
        assert_abs_diff_eq!(rep.rr, 1.5, epsilon = 1e-12);
        assert_eq!(rep.per_fold, vec![1.0, 2.0]);
    }

    #[test]
    fn fluctuation_zero_at_solved_scores() {
        // symmetric 4-patient fixture: residuals cancel within each arm
        let preds = vec![
            triple(0, 0, 0.5, 0.5, 0.5, 1, 1),
            triple(1, 0, 0.5, 0.5, 0.5, 1, 0),
            triple(2, 0, 0.5, 0.5, 0.5, 0, 1),
            triple(3, 0, 0.5, 0.5, 0.5, 0, 0),
        ];
        let (updated, eps) = tmle_fluctuate(&preds).unwrap();
        assert_abs_diff_eq!(eps.eps0, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(eps.eps1, 0.0, epsilon = 1e-9);
        for (u, p) in updated.iter().zip(&preds) {
            assert_abs_diff_eq!(u.q1, p.q1, epsilon = 1e-9);
            assert_abs_diff_eq!(u.q0, p.q0, epsilon = 1e-9);
        }
    }

    /// Independent oracle: dense grid search of the same likelihood.
    /// The likelihood separates over (eps0, eps1) because every patient has
    /// exactly one non-zero clever covariate, so the 2-D argmax equals the
    /// pair of 1-D argmaxes; both forms are exercised in the acceptance
    /// suite, the coarse joint scan here.
    fn grid_oracle(preds: &[PredictionTriple], lo: f64, hi: f64, step: f64) -> (f64, f64) {
        let n = ((hi - lo) / step).round() as usize;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=n {
            let e0 = lo + i as f64 * step;
            for j in 0..=n {
                let e1 = lo + j as f64 * step;
                let ll = fluctuation_loglik(preds, e0, e1);
                if ll > best.0 {
                    best = (ll, e0, e1);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn fluctuation_matches_coarse_grid_oracle() {
        let preds = vec![
            triple(0, 0, 0.30, 0.60, 0.70, 1, 1),
            triple(1, 0, 0.40, 0.55, 0.60, 1, 1),
            triple(2, 0, 0.20, 0.45, 0.35, 1, 0),
            triple(3, 0, 0.25, 0.50, 0.40, 0, 1),
            triple(4, 0, 0.35, 0.65, 0.55, 0, 0),
            triple(5, 0, 0.15, 0.40, 0.30, 0, 0),
        ];
        let (_, eps) = tmle_fluctuate(&preds).unwrap();
        let (g0, g1) = grid_oracle(&preds, -2.0, 2.0, 0.01);
        assert!((eps.eps0 - g0).abs() <= 0.01 + 1e-9, "{} vs {}", eps.eps0, g0);
        assert!((eps.eps1 - g1).abs() <= 0.01 + 1e-9, "{} vs {}", eps.eps1, g1);
        let (s0, s1) = fluctuation_score(&preds, eps);
        assert!(s0.abs() < 1e-8 && s1.abs() < 1e-8, "scores {s0} {s1}");
    }

    #[test]
    fn cv_tmle_equals_naive_at_zero_eps() {
        // scores already solved: q matches outcome frequencies per arm
        let preds = vec![
            triple(0, 0, 0.5, 0.5, 0.5, 1, 1),
            triple(1, 0, 0.5, 0.5, 0.5, 1, 0),
            triple(2, 1, 0.5, 0.5, 0.5, 0, 1),
            triple(3, 1, 0.5, 0.5, 0.5, 0, 0),
        ];
        let targeted = cv_tmle_rr(&preds).unwrap();
        let plain = naive_rr(&preds).unwrap();
        assert_abs_diff_eq!(targeted.eps.unwrap().eps0, 0.0, epsilon = 1e-9);
        // pooled naive rr over all patients
        let pooled = preds.iter().map(|p| p.q1).sum::<f64>() / preds.iter().map(|p| p.q0).sum::<f64>();
        assert_abs_diff_eq!(targeted.rr, pooled, epsilon = 1e-9);
        assert_abs_diff_eq!(targeted.rr, plain.rr, epsilon = 1e-9);
    }

    #[test]
    fn cv_tmle_pooling_is_idempotent_across_identical_folds() {
        let mk = |fold: usize, base: usize| {
            vec![
                triple(base, fold, 0.30, 0.60, 0.70, 1, 1),
                triple(base + 1, fold, 0.40, 0.50, 0.45, 0, 0),
                triple(base + 2, fold, 0.25, 0.45, 0.50, 1, 0),
                triple(base + 3, fold, 0.35, 0.55, 0.55, 0, 1),
            ]
        };
        let single = cv_tmle_rr(&mk(0, 0)).unwrap();
        let mut doubled = mk(0, 0);
        doubled.extend(mk(1, 10));
        let pooled = cv_tmle_rr(&doubled).unwrap();
        assert_abs_diff_eq!(pooled.rr, single.rr, epsilon = 1e-9);
        assert_abs_diff_eq!(pooled.eps.unwrap().eps1, single.eps.unwrap().eps1, epsilon = 1e-9);
    }

    #[test]
    fn cv_tmle_rejects_duplicate_patients() {
        let preds = vec![
            triple(0, 0, 0.3, 0.6, 0.5, 1, 1),
            triple(0, 1, 0.3, 0.6, 0.5, 1, 1),
        ];
        assert!(cv_tmle_rr(&preds).is_err());
    }

    #[test]
    fn fold_ci_examples() {
        let (m, lo, hi) = fold_ci(&[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!((m, lo, hi), (1.0, 1.0, 1.0));

        let (m, lo, hi) = fold_ci(&[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(m, 2.0, epsilon = 1e-12);
        // sd = sqrt(2), half-width 1.96*sqrt(2)/sqrt(2) = 1.96
        assert_abs_diff_eq!(hi - m, 1.96, epsilon = 1e-12);
        assert_abs_diff_eq!(m - lo, 1.96, epsilon = 1e-12);

        let (m2, lo2, hi2) = fold_ci(&[1.5, 3.5]).unwrap();
        assert_abs_diff_eq!(m2 - m, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lo2 - lo, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(hi2 - hi, 0.5, epsilon = 1e-12);

        assert!(fold_ci(&[1.0]).is_err());
    }

    #[test]
    fn sae_paper_rows() {
        let truths = [2.207, 2.727, 3.178];
        let lr = sae(&[2.398, 3.003, 3.569], &truths).unwrap();
        assert!((lr - 0.858).abs() < 0.002, "LR SAE {lr}");
        let tb = sae(&[2.263, 2.753, 3.227], &truths).unwrap();
        assert!((tb - 0.131).abs() < 0.002, "deep SAE {tb}");
        assert_abs_diff_eq!(sae_se(&[0.3, 0.4]), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sae_properties() {
        let e = [1.0, 2.0, 3.0];
        let t = [1.0, 2.0, 3.0];
        assert_eq!(sae(&e, &t).unwrap(), 0.0);
        assert!(sae(&e, &[1.0]).is_err());
        // permutation-equivariant under joint permutation
        let e2 = [3.0, 1.0, 2.0];
        let t2 = [3.5, 0.5, 2.5];
        let perm = [1usize, 2, 0];
        let ep: Vec<f64> = perm.iter().map(|i| e2[*i]).collect();
        let tp: Vec<f64> = perm.iter().map(|i| t2[*i]).collect();
        assert_abs_diff_eq!(sae(&e2, &t2).unwrap(), sae(&ep, &tp).unwrap(), epsilon = 1e-12);
    }
}
