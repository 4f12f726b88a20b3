//! Epsilon-insensitive support vector regression with an RBF kernel, one
//! independent regressor per output column.
//!
//! Each scalar regressor solves the standard dual in `2n` variables
//! `beta = (alpha, alpha*)`:
//!
//! ```text
//! min  1/2 beta^T Q beta + p^T beta
//! s.t. y^T beta = 0,  0 <= beta <= C,
//! Q_ij = y_i y_j k(x_i, x_j),  y = (1, -1),  p = (eps - z, eps + z)
//! ```
//!
//! by sequential minimal optimisation with second-order working-set
//! selection. The fitted function is
//! `f(x) = sum_i (alpha_i - alpha*_i) k(x_i, x) + b`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// `1 / (n_features * Var[X])`, variance over every entry of `X`.
    Scale,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrConfig {
    pub c: f64,
    pub epsilon: f64,
    pub gamma: Gamma,
    /// Stopping tolerance on the maximal KKT violation.
    pub smo_tol: f64,
    /// Iteration cap in units of `2n` SMO steps.
    pub max_passes: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 0.1,
            gamma: Gamma::Scale,
            smo_tol: 1e-3,
            max_passes: 200,
        }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::InvalidSpec("SVR C must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidSpec("SVR epsilon must be nonnegative".into()));
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0) {
                return Err(Error::InvalidSpec("SVR gamma must be positive".into()));
            }
        }
        if !(self.smo_tol > 0.0) || self.max_passes == 0 {
            return Err(Error::InvalidSpec("SVR smo_tol and max_passes must be positive".into()));
        }
        Ok(())
    }
}

/// One fitted output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarSvr {
    pub support: Vec<Vec<f64>>,
    /// `alpha_i - alpha*_i` for each support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    /// Dual objective (to be maximised) after every pass and at the end.
    pub dual_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ScalarSvr {
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .support
                .iter()
                .zip(&self.coef)
                .map(|(sv, c)| c * rbf(self.gamma, sv, x))
                .sum::<f64>()
    }

    fn bias_only(z: &[f64], gamma: f64) -> Self {
        let mut sorted = z.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Self {
            support: Vec::new(),
            coef: Vec::new(),
            bias: median,
            gamma,
            dual_trace: Vec::new(),
            iterations: 0,
            converged: true,
        }
    }
}

/// Independent scalar regressors sharing a feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub n_features: usize,
    pub outputs: Vec<ScalarSvr>,
    pub config: SvrConfig,
}

impl SvrModel {
    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Parameter count of the linear reading `y = W x + b`: one weight row
    /// and one bias per output.
    pub fn linear_param_count(&self) -> usize {
        self.n_outputs() * (self.n_features + 1)
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "SVR expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(self.outputs.iter().map(|o| o.predict_one(x)).collect())
    }
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

fn check_rows(x: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = x.first().map(|r| r.len()).ok_or(Error::Empty("SVR input"))?;
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!("ragged or empty {what} rows")));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec(format!("non-finite {what}")));
    }
    Ok(d)
}

/// `gamma = scale` value for a feature matrix; `None` when every entry is equal.
pub fn scale_gamma(x: &[Vec<f64>]) -> Option<f64> {
    let vals: Vec<f64> = x.iter().flatten().cloned().collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let d = x[0].len() as f64;
    (var > 0.0).then(|| 1.0 / (d * var))
}

/// Fits one regressor per column of `y`. Rows of `x` that are all identical
/// give bias-only models.
pub fn svr_fit(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &SvrConfig) -> Result<SvrModel> {
    cfg.validate()?;
    let d = check_rows(x, "feature")?;
    let k = check_rows(y, "target")?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} feature rows, {} target rows", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidSpec("SVR needs at least two samples".into()));
    }
    let n = x.len();
    let degenerate = x.iter().all(|r| r == &x[0]);
    let gamma = match cfg.gamma {
        Gamma::Value(g) => g,
        Gamma::Scale => scale_gamma(x).unwrap_or(1.0),
    };
    let columns: Vec<Vec<f64>> = (0..k).map(|c| y.iter().map(|r| r[c]).collect()).collect();
    if degenerate {
        return Ok(SvrModel {
            n_features: d,
            outputs: columns.iter().map(|z| ScalarSvr::bias_only(z, gamma)).collect(),
            config: *cfg,
        });
    }
    let mut kmat = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf(gamma, &x[i], &x[j]);
            kmat[i * n + j] = v;
            kmat[j * n + i] = v;
        }
    }
    let outputs = columns
        .par_iter()
        .map(|z| {
            let sol = smo(&kmat, n, z, cfg);
            let mut support = Vec::new();
            let mut coef = Vec::new();
            for i in 0..n {
                let c = sol.beta[i] - sol.beta[i + n];
                if c != 0.0 {
                    support.push(x[i].clone());
                    coef.push(c);
                }
            }
            ScalarSvr {
                support,
                coef,
                bias: sol.bias,
                gamma,
                dual_trace: sol.dual_trace,
                iterations: sol.iterations,
                converged: sol.converged,
            }
        })
        .collect();
    Ok(SvrModel {
        n_features: d,
        outputs,
        config: *cfg,
    })
}

/// Predictions, one row per input row.
pub fn svr_predict(model: &SvrModel, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    x.iter().map(|r| model.predict_row(r)).collect()
}

/// Largest violation of the dual optimality conditions on the training
/// set, in target units. With residual `r_i = z_i - f(x_i)`:
/// `coef_i = 0` needs `|r_i| <= eps`, `0 < coef_i < C` needs `r_i = eps`,
/// `coef_i = C` needs `r_i >= eps`, and symmetrically for negative `coef_i`.
pub fn kkt_violation(model: &SvrModel, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let (c_box, eps) = (model.config.c, model.config.epsilon);
    let mut worst = 0.0f64;
    for (o, out) in model.outputs.iter().enumerate() {
        if out.support.is_empty() && out.iterations == 0 && out.dual_trace.is_empty() {
            continue;
        }
        for (xi, yi) in x.iter().zip(y) {
            let r = yi[o] - out.predict_one(xi);
            let coef = out
                .support
                .iter()
                .zip(&out.coef)
                .filter(|(sv, _)| *sv == xi)
                .map(|(_, c)| *c)
                .sum::<f64>();
            let v = if coef == 0.0 {
                (r.abs() - eps).max(0.0)
            } else if coef >= c_box {
                (eps - r).max(0.0)
            } else if coef <= -c_box {
                (eps + r).max(0.0)
            } else if coef > 0.0 {
                (r - eps).abs()
            } else {
                (r + eps).abs()
            };
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

struct SmoSolution {
    beta: Vec<f64>,
    bias: f64,
    dual_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn smo(kmat: &[f64], n: usize, z: &[f64], cfg: &SvrConfig) -> SmoSolution {
    let l = 2 * n;
    let c = cfg.c;
    let y: Vec<f64> = (0..l).map(|t| if t < n { 1.0 } else { -1.0 }).collect();
    let p: Vec<f64> = (0..l)
        .map(|t| if t < n { cfg.epsilon - z[t] } else { cfg.epsilon + z[t - n] })
        .collect();
    let q = |i: usize, j: usize| y[i] * y[j] * kmat[(i % n) * n + (j % n)];
    let qd: Vec<f64> = (0..l).map(|t| kmat[(t % n) * n + (t % n)]).collect();
    let mut beta = vec![0.0; l];
    let mut g = p.clone();
    let dual = |beta: &[f64], g: &[f64]| -0.5 * (0..l).map(|t| beta[t] * (g[t] + p[t])).sum::<f64>();

    let max_iter = cfg.max_passes * l;
    let mut dual_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let Some((i, j)) = select_working_set(&beta, &g, &y, &qd, &q, c, cfg.smo_tol) else {
            converged = true;
            break;
        };
        let (old_i, old_j) = (beta[i], beta[j]);
        let qij = q(i, j);
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let mut quad = qd[i] + qd[j] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = qd[i] + qd[j] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        beta[i] = ai;
        beta[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..l {
            g[t] += q(i, t) * di + q(j, t) * dj;
        }
        iterations += 1;
        if iterations % l == 0 {
            dual_trace.push(dual(&beta, &g));
        }
    }
    dual_trace.push(dual(&beta, &g));

    // Bias from free variables, else the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..l {
        let yg = y[t] * g[t];
        if beta[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if beta[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        0.5 * (ub + lb)
    };
    SmoSolution {
        beta,
        bias: -rho,
        dual_trace,
        iterations,
        converged,
    }
}

/// Maximal-violating `i` and second-order `j`; `None` at `tol`-optimality.
fn select_working_set(
    beta: &[f64],
    g: &[f64],
    y: &[f64],
    qd: &[f64],
    q: &impl Fn(usize, usize) -> f64,
    c: f64,
    tol: f64,
) -> Option<(usize, usize)> {
    let l = beta.len();
    let mut gmax = f64::NEG_INFINITY;
    let mut i = None;
    for t in 0..l {
        let cand = if y[t] > 0.0 {
            (beta[t] < c).then_some(-g[t])
        } else {
            (beta[t] > 0.0).then_some(g[t])
        };
        if let Some(v) = cand {
            if v >= gmax {
                gmax = v;
                i = Some(t);
            }
        }
    }
    let i = i?;
    let mut gmax2 = f64::NEG_INFINITY;
    let mut best = None;
    let mut best_obj = f64::INFINITY;
    for t in 0..l {
        let (eligible, grad_diff, viol, sign) = if y[t] > 0.0 {
            (beta[t] > 0.0, gmax + g[t], g[t], -1.0)
        } else {
            (beta[t] < c, gmax - g[t], -g[t], 1.0)
        };
        if !eligible {
            continue;
        }
        gmax2 = gmax2.max(viol);
        if grad_diff > 0.0 {
            let mut quad = qd[i] + qd[t] + 2.0 * sign * y[i] * q(i, t);
            if quad <= 0.0 {
                quad = TAU;
            }
            let obj = -(grad_diff * grad_diff) / quad;
            if obj <= best_obj {
                best_obj = obj;
                best = Some(t);
            }
        }
    }
    if gmax + gmax2 < tol {
        return None;
    }
    best.map(|j| (i, j))
}
