//! Physical-layer quantities of the MISO downlink: SINR, sum rate, power
//! accounting and beamformer recovery from a virtual uplink power vector.
//!
//! Channels and beamformers are `Nt x K` matrices whose column `k` belongs to
//! user `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{principal_eig, CMat, CVec, Cholesky, RMat, C64};

/// Thermal noise density in dBm/Hz.
pub const THERMAL_NOISE_DBM_HZ: f64 = -174.0;
/// System bandwidth in Hz.
pub const BANDWIDTH_HZ: f64 = 20e6;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}

/// Noise power in watts over `bandwidth_hz` for a density given in dBm/Hz.
pub fn noise_power_watts(psd_dbm_hz: f64, bandwidth_hz: f64) -> f64 {
    dbm_to_watts(psd_dbm_hz + linear_to_db(bandwidth_hz))
}

/// Antenna/user counts, power budget and per-user noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub nt: usize,
    pub k_users: usize,
    /// Total transmit power budget `P` in watts.
    pub power_budget: f64,
    /// Per-user noise power `sigma_k^2` in watts.
    pub noise_power: Vec<f64>,
}

impl SystemConfig {
    pub fn new(nt: usize, k_users: usize, power_budget: f64, noise_power: f64) -> Result<Self> {
        let cfg = Self {
            nt,
            k_users,
            power_budget,
            noise_power: vec![noise_power; k_users],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Budget given in dBm, noise from the thermal floor over 20 MHz.
    pub fn physical(nt: usize, k_users: usize, power_dbm: f64) -> Result<Self> {
        Self::new(
            nt,
            k_users,
            dbm_to_watts(power_dbm),
            noise_power_watts(THERMAL_NOISE_DBM_HZ, BANDWIDTH_HZ),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.nt == 0 || self.k_users == 0 {
            return Err(Error::InvalidSpec("nt and k_users must be positive".into()));
        }
        if !(self.power_budget > 0.0) || !self.power_budget.is_finite() {
            return Err(Error::InvalidSpec("power budget must be positive".into()));
        }
        if self.noise_power.len() != self.k_users
            || self.noise_power.iter().any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::InvalidSpec(
                "noise power must be positive for every user".into(),
            ));
        }
        Ok(())
    }

    pub fn with_power(&self, power_budget: f64) -> Self {
        Self {
            power_budget,
            ..self.clone()
        }
    }
}

/// Per-user SINR on a linear scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinrs(pub Vec<f64>);

impl Sinrs {
    pub fn min(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }

    /// `sum_k log2(1 + gamma_k)`.
    pub fn sum_rate(&self) -> f64 {
        self.0.iter().map(|g| (1.0 + g).log2()).sum()
    }
}

fn check_dims(h: &CMat, w: &CMat, noise: &[f64]) -> Result<()> {
    if h.rows() != w.rows() || h.cols() != w.cols() || noise.len() != h.cols() {
        return Err(Error::DimensionMismatch(format!(
            "H is {}x{}, W is {}x{}, {} noise values",
            h.rows(),
            h.cols(),
            w.rows(),
            w.cols(),
            noise.len()
        )));
    }
    Ok(())
}

/// Rejects channels with an all-zero user column.
pub fn check_channel(h: &CMat) -> Result<()> {
    for k in 0..h.cols() {
        if h.column(k).norm_sqr() == 0.0 {
            return Err(Error::DegenerateChannel { user: k });
        }
    }
    Ok(())
}

/// `|h_k^H w_j|^2` for all `(k, j)`.
fn coupling(h: &CMat, w: &CMat) -> RMat {
    let hs = h.columns();
    let ws = w.columns();
    RMat::from_fn(h.cols(), w.cols(), |k, j| hs[k].dot(&ws[j]).norm_sqr())
}

/// `gamma_k = |h_k^H w_k|^2 / (sum_{j != k} |h_k^H w_j|^2 + sigma_k^2)`.
pub fn compute_sinr(h: &CMat, w: &CMat, noise: &[f64]) -> Result<Sinrs> {
    check_dims(h, w, noise)?;
    let g = coupling(h, w);
    let k_users = h.cols();
    Ok(Sinrs(
        (0..k_users)
            .map(|k| {
                let interference: f64 = (0..k_users).filter(|&j| j != k).map(|j| g[(k, j)]).sum();
                g[(k, k)] / (interference + noise[k])
            })
            .collect(),
    ))
}

/// Sum rate in bit/s/Hz.
pub fn sum_rate(h: &CMat, w: &CMat, noise: &[f64]) -> Result<f64> {
    Ok(compute_sinr(h, w, noise)?.sum_rate())
}

/// `sum_k ||w_k||^2`.
pub fn total_power(w: &CMat) -> f64 {
    w.as_slice().iter().map(|z| z.norm_sqr()).sum()
}

/// Per-column powers `||w_k||^2`.
pub fn column_powers(w: &CMat) -> Vec<f64> {
    (0..w.cols()).map(|k| w.column(k).norm_sqr()).collect()
}

/// Maximum-ratio transmission with the budget split evenly.
pub fn mrt(h: &CMat, power_budget: f64) -> CMat {
    let k_users = h.cols();
    let cols: Vec<CVec> = h
        .columns()
        .iter()
        .map(|c| c.normalized().scaled((power_budget / k_users as f64).sqrt()))
        .collect();
    CMat::from_columns(&cols).expect("columns share the channel's row count")
}

fn check_power_vector(q: &[f64], k_users: usize) -> Result<()> {
    if q.len() != k_users {
        return Err(Error::DimensionMismatch(format!(
            "power vector of length {} for {} users",
            q.len(),
            k_users
        )));
    }
    if q.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidSpec("power vector must be finite and nonnegative".into()));
    }
    Ok(())
}

/// `sigma^2 I + sum_j q_j h_j h_j^H`.
fn uplink_covariance(hs: &[CVec], q: &[f64], sigma2: f64) -> CMat {
    let nt = hs[0].len();
    let mut a = CMat::identity(nt).scaled(sigma2);
    for (hj, &qj) in hs.iter().zip(q) {
        if qj > 0.0 {
            a.add_outer(qj, hj);
        }
    }
    a
}

/// Unit-norm MMSE receive directions
/// `normalize((sigma_k^2 I + sum_j q_j h_j h_j^H)^{-1} h_k)`.
pub fn mmse_directions(h: &CMat, q: &[f64], noise: &[f64]) -> Result<Vec<CVec>> {
    check_power_vector(q, h.cols())?;
    if noise.len() != h.cols() {
        return Err(Error::DimensionMismatch("noise vector length".into()));
    }
    let hs = h.columns();
    let common = noise.iter().all(|&s| s == noise[0]);
    let shared = if common {
        Some(Cholesky::factor(&uplink_covariance(&hs, q, noise[0]))?)
    } else {
        None
    };
    hs.iter()
        .enumerate()
        .map(|(k, hk)| {
            let v = match &shared {
                Some(chol) => chol.solve(hk),
                None => Cholesky::factor(&uplink_covariance(&hs, q, noise[k]))?.solve(hk),
            };
            Ok(v.normalized())
        })
        .collect()
}

/// Quantities derived from fixed normalized beamformers: the gains
/// `|w~_k^H h_k|^2` (inverse of `D`), the downlink cross-coupling matrix
/// `[U]_{kk'} = |w~_{k'}^H h_k|^2` (zero diagonal) and the noise vector.
/// The uplink coupling matrix is `Psi = U^T`.
#[derive(Clone, Debug)]
pub struct DualityWorkspace {
    pub directions: Vec<CVec>,
    pub gains: Vec<f64>,
    pub cross: RMat,
    pub noise: Vec<f64>,
}

impl DualityWorkspace {
    pub fn new(h: &CMat, directions: Vec<CVec>, noise: &[f64]) -> Result<Self> {
        let k_users = h.cols();
        if directions.len() != k_users || noise.len() != k_users {
            return Err(Error::DimensionMismatch("duality workspace sizes".into()));
        }
        let hs = h.columns();
        let mut cross = RMat::zeros(k_users, k_users);
        let mut gains = vec![0.0; k_users];
        for k in 0..k_users {
            for kp in 0..k_users {
                let v = directions[kp].dot(&hs[k]).norm_sqr();
                if k == kp {
                    gains[k] = v;
                } else {
                    cross[(k, kp)] = v;
                }
            }
        }
        if let Some(k) = gains.iter().position(|&g| !(g > 0.0)) {
            return Err(Error::DegenerateChannel { user: k });
        }
        Ok(Self {
            directions,
            gains,
            cross,
            noise: noise.to_vec(),
        })
    }

    fn extended(&self, power_budget: f64, transpose: bool) -> RMat {
        let k_users = self.gains.len();
        let coupling = |k: usize, j: usize| {
            if transpose {
                self.cross[(j, k)]
            } else {
                self.cross[(k, j)]
            }
        };
        let mut m = RMat::zeros(k_users + 1, k_users + 1);
        for k in 0..k_users {
            let d = 1.0 / self.gains[k];
            for j in 0..k_users {
                let v = d * coupling(k, j);
                m[(k, j)] = v;
                m[(k_users, j)] += v / power_budget;
            }
            let v = d * self.noise[k];
            m[(k, k_users)] = v;
            m[(k_users, k_users)] += v / power_budget;
        }
        m
    }

    /// Downlink extended coupling matrix `Upsilon(W~, P)`.
    pub fn downlink_matrix(&self, power_budget: f64) -> RMat {
        self.extended(power_budget, false)
    }

    /// Uplink extended coupling matrix `Lambda(W~, P)`.
    pub fn uplink_matrix(&self, power_budget: f64) -> RMat {
        self.extended(power_budget, true)
    }

    /// Balanced powers and Perron root of the given extended matrix: the
    /// first `K` components of its Perron vector scaled so the last is 1.
    fn balanced(&self, m: &RMat) -> Result<(Vec<f64>, f64)> {
        let k_users = self.gains.len();
        let pair = principal_eig(m)?;
        Ok((pair.vector[..k_users].to_vec(), pair.value))
    }

    pub fn downlink_powers(&self, power_budget: f64) -> Result<(Vec<f64>, f64)> {
        self.balanced(&self.downlink_matrix(power_budget))
    }

    pub fn uplink_powers(&self, power_budget: f64) -> Result<(Vec<f64>, f64)> {
        self.balanced(&self.uplink_matrix(power_budget))
    }

    /// Virtual uplink SINRs for uplink powers `q` with these receivers.
    pub fn uplink_sinr(&self, q: &[f64]) -> Vec<f64> {
        let k_users = self.gains.len();
        (0..k_users)
            .map(|k| {
                let interference: f64 = (0..k_users)
                    .filter(|&j| j != k)
                    .map(|j| q[j] * self.cross[(j, k)])
                    .sum();
                q[k] * self.gains[k] / (interference + self.noise[k])
            })
            .collect()
    }

    /// Beamformers `W = W~ diag(sqrt(p))`.
    pub fn beamformers(&self, p: &[f64]) -> CMat {
        let cols: Vec<CVec> = self
            .directions
            .iter()
            .zip(p)
            .map(|(d, &pk)| d.scaled(pk.max(0.0).sqrt()))
            .collect();
        CMat::from_columns(&cols).expect("directions share one length")
    }
}

/// Result of SINR-balancing beamformer recovery.
#[derive(Clone, Debug)]
pub struct SinrRecovery {
    pub beamformers: CMat,
    /// Downlink powers `p`, summing to the budget.
    pub powers: Vec<f64>,
    /// Perron root of `Upsilon`; the balanced SINR is its reciprocal.
    pub perron_root: f64,
}

impl SinrRecovery {
    pub fn balanced_sinr(&self) -> f64 {
        1.0 / self.perron_root
    }
}

/// Recovers downlink beamformers from an uplink power vector: MMSE
/// directions for `q`, then balanced downlink powers from the Perron vector
/// of `Upsilon`.
pub fn recover_beamforming_sinr(
    h: &CMat,
    q: &[f64],
    power_budget: f64,
    noise: &[f64],
) -> Result<SinrRecovery> {
    check_channel(h)?;
    check_power_vector(q, h.cols())?;
    let sum_q: f64 = q.iter().sum();
    if sum_q > power_budget * (1.0 + 1e-9) {
        return Err(Error::InvalidSpec(format!(
            "uplink powers sum to {sum_q:.6e}, above the budget {power_budget:.6e}"
        )));
    }
    let dirs = mmse_directions(h, q, noise)?;
    let ws = DualityWorkspace::new(h, dirs, noise)?;
    let (p, perron_root) = ws.downlink_powers(power_budget)?;
    Ok(SinrRecovery {
        beamformers: ws.beamformers(&p),
        powers: p,
        perron_root,
    })
}

/// Sum-rate beamformer structure with equal uplink and downlink powers:
/// `w_k = sqrt(q_k) normalize((I + sum_j q_j/sigma_j^2 h_j h_j^H)^{-1} h_k)`.
pub fn recover_beamforming_sumrate(h: &CMat, q: &[f64], noise: &[f64]) -> Result<CMat> {
    check_channel(h)?;
    check_power_vector(q, h.cols())?;
    if noise.len() != h.cols() {
        return Err(Error::DimensionMismatch("noise vector length".into()));
    }
    let hs = h.columns();
    let mut a = CMat::identity(h.rows());
    for ((hj, &qj), &s) in hs.iter().zip(q).zip(noise) {
        if qj > 0.0 {
            a.add_outer(qj / s, hj);
        }
    }
    let chol = Cholesky::factor(&a)?;
    let cols: Vec<CVec> = hs
        .iter()
        .zip(q)
        .map(|(hk, &qk)| {
            if qk > 0.0 {
                chol.solve(hk).normalized().scaled(qk.sqrt())
            } else {
                CVec::zeros(hk.len())
            }
        })
        .collect();
    CMat::from_columns(&cols)
}

/// Channel matrix from per-user columns given as `(re, im)` pairs; test and
/// example convenience.
pub fn channel_from_pairs(columns: &[Vec<(f64, f64)>]) -> CMat {
    let cols: Vec<CVec> = columns
        .iter()
        .map(|c| c.iter().map(|&(re, im)| C64::new(re, im)).collect())
        .collect();
    CMat::from_columns(&cols).expect("equal column lengths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rayleigh_channel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn single_user_sinr() {
        let p: f64 = 7.0;
        let h = channel_from_pairs(&[vec![(1.0, 0.0)]]);
        let w = channel_from_pairs(&[vec![(p.sqrt(), 0.0)]]);
        let s = compute_sinr(&h, &w, &[1.0]).unwrap();
        assert!((s.0[0] - p).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_users_have_no_interference() {
        let p: f64 = 10.0;
        let h = channel_from_pairs(&[vec![(1.0, 0.0), (0.0, 0.0)], vec![(0.0, 0.0), (1.0, 0.0)]]);
        let a = (p / 2.0).sqrt();
        let w = channel_from_pairs(&[vec![(a, 0.0), (0.0, 0.0)], vec![(0.0, 0.0), (a, 0.0)]]);
        let s = compute_sinr(&h, &w, &[1.0, 1.0]).unwrap();
        for g in s.0 {
            assert!((g - p / 2.0).abs() < 1e-12);
        }
    }

    /// Direct evaluation of the SINR formula with explicit real arithmetic,
    /// sharing nothing with `compute_sinr` beyond the inputs.
    fn sinr_oracle(h: &CMat, w: &CMat, noise: &[f64]) -> Vec<f64> {
        let (nt, k_users) = (h.rows(), h.cols());
        let inner = |k: usize, j: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..nt {
                let (a, b) = (h[(n, k)].re, -h[(n, k)].im);
                let (x, y) = (w[(n, j)].re, w[(n, j)].im);
                re += a * x - b * y;
                im += a * y + b * x;
            }
            re * re + im * im
        };
        (0..k_users)
            .map(|k| {
                let mut den = noise[k];
                for j in 0..k_users {
                    if j != k {
                        den += inner(k, j);
                    }
                }
                inner(k, k) / den
            })
            .collect()
    }

    #[test]
    fn random_sinr_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rayleigh_channel(2, 2, &mut rng);
        let w = rayleigh_channel(2, 2, &mut rng);
        let got = compute_sinr(&h, &w, &[0.3, 0.7]).unwrap();
        let want = sinr_oracle(&h, &w, &[0.3, 0.7]);
        for (a, b) in got.0.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn sinr_dimension_mismatch() {
        let h = CMat::zeros(2, 2);
        let w = CMat::zeros(3, 2);
        assert!(matches!(compute_sinr(&h, &w, &[1.0, 1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn sum_rate_of_unit_sinrs() {
        assert!((Sinrs(vec![1.0, 1.0]).sum_rate() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_user_mrt_rate_closed_form() {
        let h = channel_from_pairs(&[vec![(1.0, 0.5), (-0.3, 0.2), (0.1, -1.0)]]);
        let p = 4.0;
        let w = mrt(&h, p);
        let r = sum_rate(&h, &w, &[0.5]).unwrap();
        let want = (1.0 + p * h.column(0).norm_sqr() / 0.5).log2();
        assert!((r - want).abs() < 1e-12);
    }

    #[test]
    fn random_sum_rate_composes_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = rayleigh_channel(3, 3, &mut rng);
        let w = rayleigh_channel(3, 3, &mut rng);
        let noise = [1.0, 2.0, 0.5];
        let want: f64 = sinr_oracle(&h, &w, &noise).iter().map(|g| (1.0 + g).log2()).sum();
        assert!((sum_rate(&h, &w, &noise).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn total_power_cases() {
        assert_eq!(total_power(&CMat::zeros(3, 2)), 0.0);
        let mut w = CMat::zeros(2, 4);
        for k in 0..4 {
            w[(k % 2, k)] = c(0.6, 0.8);
        }
        assert!((total_power(&w) - 4.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rayleigh_channel(4, 3, &mut rng);
        let mut direct = 0.0;
        for r in 0..4 {
            for k in 0..3 {
                direct += w[(r, k)].re.powi(2) + w[(r, k)].im.powi(2);
            }
        }
        assert!((total_power(&w) - direct).abs() < 1e-12);
    }

    #[test]
    fn single_user_recovery_is_mrt() {
        let h = channel_from_pairs(&[vec![(1.0, 0.5), (-0.3, 0.2)]]);
        let p = 3.0;
        let rec = recover_beamforming_sinr(&h, &[p], p, &[1.0]).unwrap();
        assert!((rec.powers[0] - p).abs() < 1e-9 * p);
        let want = h.column(0).normalized().scaled(p.sqrt());
        let got = rec.beamformers.column(0);
        // Same direction up to a common phase.
        let align = want.dot(&got).norm();
        assert!((align - p).abs() < 1e-9 * p);
    }

    #[test]
    fn symmetric_orthogonal_recovery() {
        let h = channel_from_pairs(&[
            vec![(2.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
            vec![(0.0, 0.0), (0.0, 2.0), (0.0, 0.0)],
            vec![(0.0, 0.0), (0.0, 0.0), (-2.0, 0.0)],
        ]);
        let p = 6.0;
        let rec = recover_beamforming_sinr(&h, &[2.0, 2.0, 2.0], p, &[1.0; 3]).unwrap();
        for &pk in &rec.powers {
            assert!((pk - 2.0).abs() < 1e-9);
        }
        let s = compute_sinr(&h, &rec.beamformers, &[1.0; 3]).unwrap();
        assert!(s.max() / s.min() - 1.0 < 1e-9);
    }

    #[test]
    fn recovery_rejects_overbudget_q() {
        let h = channel_from_pairs(&[vec![(1.0, 0.0)], vec![(0.0, 1.0)]]);
        assert!(recover_beamforming_sinr(&h, &[1.0, 1.0], 1.0, &[1.0]).is_err());
    }

    #[test]
    fn recovery_rejects_zero_channel() {
        let h = channel_from_pairs(&[vec![(1.0, 0.0), (0.0, 0.0)], vec![(0.0, 0.0), (0.0, 0.0)]]);
        assert!(matches!(
            recover_beamforming_sinr(&h, &[0.5, 0.5], 1.0, &[1.0, 1.0]),
            Err(Error::DegenerateChannel { user: 1 })
        ));
    }

    #[test]
    fn duality_matrices_share_perron_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = rayleigh_channel(4, 4, &mut rng);
        let noise = vec![1.0; 4];
        let dirs = mmse_directions(&h, &[1.0, 2.0, 0.5, 0.5], &noise).unwrap();
        let ws = DualityWorkspace::new(&h, dirs, &noise).unwrap();
        let (_, up) = ws.uplink_powers(4.0).unwrap();
        let (p, down) = ws.downlink_powers(4.0).unwrap();
        assert!((up - down).abs() <= 1e-8 * up);
        assert!((p.iter().sum::<f64>() - 4.0).abs() < 1e-9);
        for d in &ws.directions {
            assert!((d.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sumrate_recovery_single_user_is_mrt() {
        let h = channel_from_pairs(&[vec![(1.0, 0.5), (-0.3, 0.2)]]);
        let w = recover_beamforming_sumrate(&h, &[2.5], &[0.1]).unwrap();
        let r = sum_rate(&h, &w, &[0.1]).unwrap();
        let want = (1.0 + 2.5 * h.column(0).norm_sqr() / 0.1).log2();
        assert!((r - want).abs() < 1e-12);
    }

    #[test]
    fn sumrate_recovery_zero_power_user() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rayleigh_channel(3, 3, &mut rng);
        let w = recover_beamforming_sumrate(&h, &[1.0, 0.0, 2.0], &[1.0; 3]).unwrap();
        assert_eq!(w.column(1).norm(), 0.0);
        assert!((total_power(&w) - 3.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::{prop_assert, proptest};

        proptest! {
            #[test]
            fn sumrate_recovery_spends_exactly_q(seed in 0u64..5000, q in proptest::collection::vec(0.0f64..5.0, 4)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = rayleigh_channel(4, 4, &mut rng);
                let w = recover_beamforming_sumrate(&h, &q, &[0.7; 4]).unwrap();
                let want: f64 = q.iter().sum();
                prop_assert!((total_power(&w) - want).abs() <= 1e-12 * want.max(1.0));
            }

            #[test]
            fn recovered_sinr_is_balanced(seed in 0u64..5000, q in proptest::collection::vec(0.01f64..1.0, 3)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = rayleigh_channel(3, 3, &mut rng);
                let budget = 4.0;
                let s: f64 = q.iter().sum();
                let q: Vec<f64> = q.iter().map(|x| x * budget / s).collect();
                let rec = recover_beamforming_sinr(&h, &q, budget, &[1.0; 3]).unwrap();
                let sinr = compute_sinr(&h, &rec.beamformers, &[1.0; 3]).unwrap();
                prop_assert!(sinr.max() / sinr.min() - 1.0 <= 1e-6);
                prop_assert!((sinr.min() * rec.perron_root - 1.0).abs() <= 1e-6);
                prop_assert!((total_power(&rec.beamformers) - budget).abs() <= 1e-6 * budget);
            }
        }
    }
}
