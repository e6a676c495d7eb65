//! Penalized logistic regression: Newton/IRLS for none/L2, proximal
//! coordinate descent for L1. The intercept is never penalized.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CelError, Result};
use crate::synth::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "kebab-case")]
pub enum Penalty {
    None,
    L1(f64),
    L2(f64),
}

impl Penalty {
    fn lambda(&self) -> f64 {
        match self {
            Penalty::None => 0.0,
            Penalty::L1(l) | Penalty::L2(l) => *l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambda();
        if l < 0.0 || !l.is_finite() {
            return Err(CelError::config("penalty strength must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub penalty: Penalty,
}

const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;

fn linear_predictor(x: &Array2<f64>, w: &Array1<f64>, b: f64) -> Array1<f64> {
    x.dot(w) + b
}

/// Negative penalized log-likelihood (sum form).
fn objective(x: &Array2<f64>, y: &[u8], w: &Array1<f64>, b: f64, penalty: Penalty) -> f64 {
    let eta = linear_predictor(x, w, b);
    let mut nll = 0.0;
    for (e, yi) in eta.iter().zip(y) {
        // log(1 + exp(eta)) - y*eta, computed stably
        nll += if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        nll -= f64::from(*yi) * e;
    }
    match penalty {
        Penalty::None => nll,
        Penalty::L1(l) => nll + l * w.iter().map(|v| v.abs()).sum::<f64>(),
        Penalty::L2(l) => nll + 0.5 * l * w.iter().map(|v| v * v).sum::<f64>(),
    }
}

/// Solve the symmetric positive definite system `a x = rhs` by Cholesky.
fn cholesky_solve(a: &Array2<f64>, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(CelError::numeric("Hessian not positive definite"));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut z = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[[i, k]] * z[k];
        }
        z[i] = sum / l[[i, i]];
    }
    let mut out = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = z[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * out[k];
        }
        out[i] = sum / l[[i, i]];
    }
    Ok(out)
}

/// Gradient of the negative log-likelihood wrt (intercept, weights),
/// without penalty terms.
fn nll_gradient(x: &Array2<f64>, y: &[u8], w: &Array1<f64>, b: f64) -> (f64, Array1<f64>) {
    let eta = linear_predictor(x, w, b);
    let resid: Array1<f64> =
        eta.iter().zip(y).map(|(e, yi)| sigmoid(*e) - f64::from(*yi)).collect();
    (resid.sum(), x.t().dot(&resid))
}

fn fit_newton(x: &Array2<f64>, y: &[u8], penalty: Penalty) -> Result<LogRegModel> {
    let d = x.ncols();
    let l2 = if let Penalty::L2(l) = penalty { l } else { 0.0 };
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    for _ in 0..MAX_ITER {
        let (gb, mut gw) = nll_gradient(x, y, &w, b);
        gw = gw + l2 * &w;
        let gmax = gw.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
        if gmax < GRAD_TOL {
            break;
        }
        // weighted Hessian over [1 | X]
        let eta = linear_predictor(x, &w, b);
        let wdiag: Array1<f64> = eta
            .iter()
            .map(|e| {
                let p = sigmoid(*e);
                (p * (1.0 - p)).max(1e-12)
            })
            .collect();
        let mut hess = Array2::<f64>::zeros((d + 1, d + 1));
        hess[[0, 0]] = wdiag.sum();
        for j in 0..d {
            let col_j = x.index_axis(Axis(1), j);
            let wj: f64 = col_j.iter().zip(&wdiag).map(|(v, wt)| v * wt).sum();
            hess[[0, j + 1]] = wj;
            hess[[j + 1, 0]] = wj;
            for k in j..d {
                let col_k = x.index_axis(Axis(1), k);
                let mut s: f64 = col_j
                    .iter()
                    .zip(col_k.iter())
                    .zip(&wdiag)
                    .map(|((a, c), wt)| a * c * wt)
                    .sum();
                if j == k {
                    s += l2;
                }
                hess[[j + 1, k + 1]] = s;
                hess[[k + 1, j + 1]] = s;
            }
        }
        // Levenberg damping keeps the solve well-posed when columns are
        // constant or collinear
        let mean_diag = (0..=d).map(|j| hess[[j, j]]).sum::<f64>() / (d + 1) as f64;
        let ridge = 1e-8 * (1.0 + mean_diag);
        for j in 0..=d {
            hess[[j, j]] += ridge;
        }
        let mut grad_full = Array1::<f64>::zeros(d + 1);
        grad_full[0] = gb;
        for j in 0..d {
            grad_full[j + 1] = gw[j];
        }
        let step = cholesky_solve(&hess, &grad_full)?;

        // backtracking on the objective, with a float-resolution allowance
        // so Newton can finish its quadratic phase
        let f0 = objective(x, y, &w, b, penalty);
        let accept = f0 + 1e-10 * (1.0 + f0.abs());
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let nb = b - scale * step[0];
            let nw: Array1<f64> = (0..d).map(|j| w[j] - scale * step[j + 1]).collect();
            if objective(x, y, &nw, nb, penalty) <= accept {
                b = nb;
                w = nw;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (gb, mut gw) = nll_gradient(x, y, &w, b);
    gw = gw + l2 * &w;
    let gmax = gw.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
    if gmax < GRAD_TOL {
        check_separation(x, y, &w, b, penalty)?;
        return Ok(LogRegModel { weights: w.to_vec(), intercept: b, penalty });
    }
    if matches!(penalty, Penalty::None) {
        return Err(CelError::numeric(format!(
            "logistic regression did not converge (gradient norm {gmax:.3e}); \
             the data may be separable - consider an L1/L2 penalty"
        )));
    }
    Err(CelError::numeric(format!(
        "penalized logistic regression did not converge (gradient norm {gmax:.3e})"
    )))
}

/// With no penalty, a vanishing gradient can also mean the weights ran off
/// to a separating hyperplane (every prediction saturated at its label).
/// The MLE does not exist there, so report it as a modelling error.
fn check_separation(
    x: &Array2<f64>,
    y: &[u8],
    w: &Array1<f64>,
    b: f64,
    penalty: Penalty,
) -> Result<()> {
    if !matches!(penalty, Penalty::None) {
        return Ok(());
    }
    let eta = linear_predictor(x, w, b);
    let saturated = eta
        .iter()
        .zip(y)
        .all(|(e, yi)| (f64::from(*yi) - sigmoid(*e)).abs() < 1e-6);
    if saturated && w.iter().any(|v| v.abs() > 1.0) {
        return Err(CelError::numeric(
            "data is separable: unpenalized logistic regression has no finite \
             optimum - consider an L1/L2 penalty",
        ));
    }
    Ok(())
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// L1 fit by IRLS with an inner coordinate-descent solve of the penalized
/// weighted least-squares subproblem (glmnet-style).
fn fit_l1(x: &Array2<f64>, y: &[u8], lambda: f64) -> Result<LogRegModel> {
    let (n, d) = x.dim();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    for _ in 0..MAX_ITER {
        let eta = linear_predictor(x, &w, b);
        let p: Array1<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
        let wdiag: Array1<f64> = p.iter().map(|pi| (pi * (1.0 - pi)).max(1e-6)).collect();
        // working response
        let z: Array1<f64> = (0..n)
            .map(|i| eta[i] + (f64::from(y[i]) - p[i]) / wdiag[i])
            .collect();
        // coordinate descent on 0.5*sum wdiag*(z - b - Xw)^2 + lambda*|w|_1
        for _ in 0..200 {
            let mut max_delta: f64 = 0.0;
            let mut resid: Array1<f64> = &z - &linear_predictor(x, &w, b);
            let wb_num: f64 = wdiag.iter().zip(&resid).map(|(wt, r)| wt * r).sum();
            let wb_den: f64 = wdiag.sum();
            let new_b = b + wb_num / wb_den;
            for r in resid.iter_mut() {
                *r -= new_b - b;
            }
            max_delta = max_delta.max((new_b - b).abs());
            b = new_b;
            for j in 0..d {
                let col = x.index_axis(Axis(1), j);
                let denom: f64 = col.iter().zip(&wdiag).map(|(v, wt)| wt * v * v).sum();
                if denom <= 0.0 {
                    continue;
                }
                let rho: f64 = col
                    .iter()
                    .zip(&wdiag)
                    .zip(&resid)
                    .map(|((v, wt), r)| wt * v * (r + v * w[j]))
                    .sum();
                let new_wj = soft_threshold(rho, lambda) / denom;
                let delta = new_wj - w[j];
                if delta != 0.0 {
                    for (ri, v) in resid.iter_mut().zip(col.iter()) {
                        *ri -= delta * v;
                    }
                    w[j] = new_wj;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            if max_delta < 1e-10 {
                break;
            }
        }
        // KKT check on the true (non-quadratic) objective
        let (gb, gw) = nll_gradient(x, y, &w, b);
        let mut kkt: f64 = gb.abs();
        for j in 0..d {
            let v = if w[j] == 0.0 {
                (gw[j].abs() - lambda).max(0.0)
            } else {
                (gw[j] + lambda * w[j].signum()).abs()
            };
            kkt = kkt.max(v);
        }
        if kkt < 1e-7 {
            return Ok(LogRegModel {
                weights: w.to_vec(),
                intercept: b,
                penalty: Penalty::L1(lambda),
            });
        }
    }
    Err(CelError::numeric("L1 logistic regression did not converge"))
}

/// Fit a logistic regression of binary `labels` on `x`.
pub fn fit_logreg(x: &Array2<f64>, labels: &[u8], penalty: Penalty) -> Result<LogRegModel> {
    penalty.validate()?;
    if x.nrows() != labels.len() {
        return Err(CelError::validation(format!(
            "design matrix has {} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(CelError::validation("cannot fit on an empty design matrix"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CelError::validation("design matrix contains non-finite values"));
    }
    if labels.iter().any(|y| *y > 1) {
        return Err(CelError::validation("labels must be 0/1"));
    }
    match penalty {
        Penalty::None | Penalty::L2(_) => fit_newton(x, labels, penalty),
        Penalty::L1(l) => fit_l1(x, labels, l),
    }
}

/// Predicted event probabilities, strictly inside (0,1).
pub fn predict_proba(model: &LogRegModel, x: &Array2<f64>) -> Array1<f64> {
    let w = Array1::from_vec(model.weights.clone());
    linear_predictor(x, &w, model.intercept)
        .iter()
        .map(|e| sigmoid(*e).clamp(1e-12, 1.0 - 1e-12))
        .collect()
}
