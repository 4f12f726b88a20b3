//! Label-generating optimisers.
//!
//! * SINR balancing: alternates MMSE receive directions for the current
//!   uplink powers with the balanced uplink power vector read off the Perron
//!   eigenvector of the uplink extended coupling matrix. The balanced SINR
//!   never decreases and the fixed point is the max-min optimum.
//! * WMMSE: receiver, MSE weight and precoder updates for sum-rate
//!   maximisation, with the power multiplier found by bisection.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, ChannelRng};
use crate::dataset::{label_samples, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, Cholesky};
use crate::system::{
    check_channel, compute_sinr, linear_to_db, mmse_directions, mrt, recover_beamforming_sinr,
    recover_beamforming_sumrate, sum_rate, total_power, DualityWorkspace, SystemConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SinrBalanceOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinrBalanceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinrBalanceSolution {
    /// Uplink powers, summing to the budget.
    pub q: Vec<f64>,
    pub beamformers: CMat,
    pub downlink_powers: Vec<f64>,
    /// Common downlink SINR of the recovered beamformers (linear).
    pub balanced_sinr: f64,
    /// Perron roots of the uplink and downlink extended matrices at the
    /// returned receive directions.
    pub uplink_root: f64,
    pub downlink_root: f64,
    pub report: SolveReport,
}

/// Max-min SINR beamforming under a total power budget.
pub fn sinr_balance_solve(
    h: &CMat,
    power_budget: f64,
    noise: &[f64],
    opts: SinrBalanceOptions,
) -> Result<SinrBalanceSolution> {
    check_channel(h)?;
    if !(power_budget > 0.0) {
        return Err(Error::InvalidSpec("power budget must be positive".into()));
    }
    let k_users = h.cols();
    let mut q = vec![power_budget / k_users as f64; k_users];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let ws = DualityWorkspace::new(h, mmse_directions(h, &q, noise)?, noise)?;
        let (q_next, root) = ws.uplink_powers(power_budget)?;
        let gamma = 1.0 / root;
        let prev = trace.last().copied();
        trace.push(gamma);
        q = renormalize(q_next, power_budget);
        if let Some(prev) = prev {
            if (gamma - prev).abs() <= opts.tol * gamma {
                converged = true;
                break;
            }
        }
    }

    let ws = DualityWorkspace::new(h, mmse_directions(h, &q, noise)?, noise)?;
    let (_, uplink_root) = ws.uplink_powers(power_budget)?;
    let rec = recover_beamforming_sinr(h, &q, power_budget, noise)?;
    let balanced_sinr = rec.balanced_sinr();
    Ok(SinrBalanceSolution {
        q,
        beamformers: rec.beamformers,
        downlink_powers: rec.powers,
        balanced_sinr,
        uplink_root,
        downlink_root: rec.perron_root,
        report: SolveReport {
            iterations,
            converged,
            final_objective: balanced_sinr,
            objective_trace: trace,
        },
    })
}

fn renormalize(mut q: Vec<f64>, budget: f64) -> Vec<f64> {
    let s: f64 = q.iter().sum();
    if s > 0.0 {
        q.iter_mut().for_each(|x| *x *= budget / s);
    }
    q
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WmmseInit {
    /// Maximum-ratio transmission with the budget split evenly.
    Mrt,
    /// Random Gaussian precoder scaled to the full budget.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct WmmseOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub init: WmmseInit,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            init: WmmseInit::Mrt,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WmmseSolution {
    pub beamformers: CMat,
    /// `q_k = ||w_k||^2`.
    pub q: Vec<f64>,
    pub report: SolveReport,
}

const MAX_BRACKET_DOUBLINGS: usize = 200;

/// Precoder `(B + mu I)^{-1} r_k` for every `k`, with `mu >= 0` chosen so the
/// total power meets the budget (`mu = 0` when already feasible).
fn constrained_precoder(b: &CMat, rhs: &[CVec], power_budget: f64) -> Result<CMat> {
    let nt = b.rows();
    let solve = |mu: f64| -> Option<(CMat, f64)> {
        let mut a = b.clone();
        a.add_diag(mu);
        let chol = Cholesky::factor(&a).ok()?;
        let cols: Vec<CVec> = rhs.iter().map(|r| chol.solve(r)).collect();
        let w = CMat::from_columns(&cols).ok()?;
        let p = total_power(&w);
        Some((w, p))
    };

    if let Some((w, p)) = solve(0.0) {
        if p <= power_budget {
            return Ok(w);
        }
    }
    let avg_diag = (0..nt).map(|i| b[(i, i)].re).sum::<f64>() / nt as f64;
    let mut lo = 1e-10 * avg_diag.max(f64::MIN_POSITIVE);
    match solve(lo) {
        Some((w, p)) if p <= power_budget => return Ok(w),
        Some(_) => {}
        None => return Err(Error::Singular { pivot: 0, value: lo }),
    }
    let mut hi = avg_diag.max(lo * 2.0);
    let mut best = None;
    for i in 0..=MAX_BRACKET_DOUBLINGS {
        if i == MAX_BRACKET_DOUBLINGS {
            return Err(Error::NotConverged {
                what: "WMMSE multiplier bracket",
                iterations: i,
            });
        }
        match solve(hi) {
            Some((w, p)) if p <= power_budget => {
                best = Some(w);
                break;
            }
            _ => {
                lo = hi;
                hi *= 2.0;
            }
        }
    }
    let mut best = best.expect("bracket found");
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match solve(mid) {
            Some((w, p)) if p <= power_budget => {
                hi = mid;
                best = w;
            }
            _ => lo = mid,
        }
    }
    Ok(best)
}

fn wmmse_init(h: &CMat, power_budget: f64, init: WmmseInit) -> CMat {
    match init {
        WmmseInit::Mrt => mrt(h, power_budget),
        WmmseInit::Random { seed } => {
            let mut rng = ChannelRng::seed_from_u64(seed);
            let w = CMat::from_fn(h.rows(), h.cols(), |_, _| complex_gaussian(&mut rng));
            let p = total_power(&w);
            w.scaled((power_budget / p).sqrt())
        }
    }
}

/// Locally optimal sum-rate beamforming (WMMSE).
pub fn wmmse_solve(
    h: &CMat,
    power_budget: f64,
    noise: &[f64],
    opts: WmmseOptions,
) -> Result<WmmseSolution> {
    check_channel(h)?;
    if !(power_budget > 0.0) {
        return Err(Error::InvalidSpec("power budget must be positive".into()));
    }
    let (nt, k_users) = (h.rows(), h.cols());
    let hs = h.columns();
    let mut w = wmmse_init(h, power_budget, opts.init);
    let mut rate = sum_rate(h, &w, noise)?;
    let mut trace = vec![rate];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let ws = w.columns();
        let mut b = CMat::zeros(nt, nt);
        let mut rhs = Vec::with_capacity(k_users);
        for k in 0..k_users {
            let total: f64 = ws.iter().map(|wj| hs[k].dot(wj).norm_sqr()).sum::<f64>() + noise[k];
            let hw = hs[k].dot(&ws[k]);
            let u = hw / total;
            // 1 - conj(u) h^H w = 1 - |h^H w|^2 / total, real and in (0, 1].
            let weight = 1.0 / (1.0 - (u.conj() * hw).re);
            b.add_outer(weight * u.norm_sqr(), &hs[k]);
            rhs.push(CVec::from_iter(hs[k].iter().map(|z| z * u * weight)));
        }
        w = constrained_precoder(&b, &rhs, power_budget)?;
        let next = sum_rate(h, &w, noise)?;
        trace.push(next);
        let gain = next - rate;
        rate = next;
        if gain <= opts.tol {
            converged = true;
            break;
        }
    }
    let q = (0..k_users).map(|k| w.column(k).norm_sqr()).collect();
    Ok(WmmseSolution {
        beamformers: w,
        q,
        report: SolveReport {
            iterations,
            converged,
            final_objective: rate,
            objective_trace: trace,
        },
    })
}

/// WMMSE settings for labels and reference metrics: the default tolerance
/// with a cap high enough for slow convergence at high SNR.
pub const LABEL_WMMSE: WmmseOptions = WmmseOptions {
    tol: 1e-6,
    max_iter: 5000,
    init: WmmseInit::Mrt,
};

/// The two utilities handled throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    SinrBalancing,
    SumRate,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Self::SinrBalancing => "sinr_balancing",
            Self::SumRate => "sum_rate",
        }
    }

    /// Unit of [`Problem::metric`].
    pub fn metric_unit(self) -> &'static str {
        match self {
            Self::SinrBalancing => "dB",
            Self::SumRate => "bit/s/Hz",
        }
    }

    /// Uplink power label from the problem's classical solver. Fails if the
    /// solver did not converge.
    pub fn label(self, h: &CMat, sys: &SystemConfig) -> Result<Vec<f64>> {
        match self {
            Self::SinrBalancing => {
                let sol = sinr_balance_solve(h, sys.power_budget, &sys.noise_power, Default::default())?;
                if !sol.report.converged {
                    return Err(Error::NotConverged {
                        what: "SINR balancing",
                        iterations: sol.report.iterations,
                    });
                }
                Ok(sol.q)
            }
            Self::SumRate => {
                let sol = wmmse_solve(h, sys.power_budget, &sys.noise_power, LABEL_WMMSE)?;
                if !sol.report.converged {
                    return Err(Error::NotConverged {
                        what: "WMMSE",
                        iterations: sol.report.iterations,
                    });
                }
                Ok(sol.q)
            }
        }
    }

    /// Downlink beamformers for uplink powers `q` (summing to at most the budget).
    pub fn recover(self, h: &CMat, q: &[f64], sys: &SystemConfig) -> Result<CMat> {
        match self {
            Self::SinrBalancing => {
                Ok(recover_beamforming_sinr(h, q, sys.power_budget, &sys.noise_power)?.beamformers)
            }
            Self::SumRate => recover_beamforming_sumrate(h, q, &sys.noise_power),
        }
    }

    /// Balanced (minimum) SINR in dB, or sum rate in bit/s/Hz.
    pub fn metric(self, h: &CMat, w: &CMat, sys: &SystemConfig) -> Result<f64> {
        let s = compute_sinr(h, w, &sys.noise_power)?;
        Ok(match self {
            Self::SinrBalancing => linear_to_db(s.min()),
            Self::SumRate => s.sum_rate(),
        })
    }

    /// Metric of the classical solution: the optimum for SINR balancing,
    /// WMMSE for sum rate.
    pub fn reference_metric(self, h: &CMat, sys: &SystemConfig) -> Result<f64> {
        match self {
            Self::SinrBalancing => {
                let opts = SinrBalanceOptions {
                    tol: 1e-13,
                    max_iter: 2000,
                };
                let sol = sinr_balance_solve(h, sys.power_budget, &sys.noise_power, opts)?;
                Ok(linear_to_db(sol.balanced_sinr))
            }
            Self::SumRate => {
                let sol = wmmse_solve(h, sys.power_budget, &sys.noise_power, LABEL_WMMSE)?;
                Ok(sol.report.final_objective)
            }
        }
    }

    /// Metric obtained from uplink powers via the problem's recovery.
    pub fn metric_from_q(self, h: &CMat, q: &[f64], sys: &SystemConfig) -> Result<f64> {
        let w = self.recover(h, q, sys)?;
        self.metric(h, &w, sys)
    }
}

/// Labels every sample with the problem's solver output. Samples whose
/// solve fails are dropped and counted.
pub fn label_dataset(ds: Dataset, problem: Problem, sys: &SystemConfig) -> Result<Dataset> {
    let labeler = |h: &CMat| problem.label(h, sys);
    let dropped_before = ds.dropped;
    let Dataset {
        nt,
        k,
        family,
        seed,
        samples,
        ..
    } = ds;
    let (samples, dropped) = label_samples(samples, &labeler)?;
    Ok(Dataset {
        nt,
        k,
        family,
        seed,
        dropped: dropped_before + dropped,
        samples,
    })
}
