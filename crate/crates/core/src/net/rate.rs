//! Sum rate of the regularised-ZF beamforming structure and its gradient
//! with respect to the uplink power vector.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, Cholesky, C64};
use crate::system::{check_channel, recover_beamforming_sumrate, sum_rate};

/// Sum rate reached by `w_k = sqrt(q_k) normalize(A^{-1} h_k)` with
/// `A = I + sum_j (q_j / sigma_j^2) h_j h_j^H`, and its gradient in `q`.
///
/// Writing `v_j = A^{-1} h_j`, the received power of stream `j` at user `k`
/// is `q_j |h_k^H v_j|^2 / ||v_j||^2`, which is smooth in `q_j` down to
/// zero, so no special case is needed for inactive users.
pub fn sumrate_and_grad_q(h: &CMat, q: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k_users = h.cols();
    if q.len() != k_users || noise.len() != k_users {
        return Err(Error::DimensionMismatch(format!(
            "{} users, {} powers, {} noise values",
            k_users,
            q.len(),
            noise.len()
        )));
    }
    if q.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidSpec("power vector must be finite and nonnegative".into()));
    }
    check_channel(h)?;

    let w = recover_beamforming_sumrate(h, q, noise)?;
    let rate = sum_rate(h, &w, noise)?;

    let hs = h.columns();
    let mut a = CMat::identity(h.rows());
    for j in 0..k_users {
        if q[j] > 0.0 {
            a.add_outer(q[j] / noise[j], &hs[j]);
        }
    }
    let chol = Cholesky::factor(&a)?;
    let vs: Vec<CVec> = hs.iter().map(|hj| chol.solve(hj)).collect();
    let n: Vec<f64> = vs.iter().map(|v| v.norm_sqr()).collect();
    // b[m][j] = h_m^H v_j, g[j][m] = v_j^H v_m.
    let b: Vec<Vec<C64>> = (0..k_users)
        .map(|m| (0..k_users).map(|j| hs[m].dot(&vs[j])).collect())
        .collect();
    let g: Vec<Vec<C64>> = (0..k_users)
        .map(|j| (0..k_users).map(|m| vs[j].dot(&vs[m])).collect())
        .collect();
    let c: Vec<Vec<f64>> = (0..k_users)
        .map(|k| (0..k_users).map(|j| b[k][j].norm_sqr() / n[j]).collect())
        .collect();

    let total: Vec<f64> = (0..k_users)
        .map(|k| (0..k_users).map(|j| q[j] * c[k][j]).sum::<f64>() + noise[k])
        .collect();
    let interference: Vec<f64> = (0..k_users).map(|k| total[k] - q[k] * c[k][k]).collect();
    // d rate / d (q_j c_kj)
    let coef = |k: usize, j: usize| {
        let cross = if j == k { 0.0 } else { 1.0 / interference[k] };
        (1.0 / total[k] - cross) / LN_2
    };

    let mut grad = vec![0.0; k_users];
    for (m, gm) in grad.iter_mut().enumerate() {
        let mut acc: f64 = (0..k_users).map(|k| coef(k, m) * c[k][m]).sum();
        let s2 = noise[m];
        for j in (0..k_users).filter(|&j| q[j] > 0.0) {
            let dn = -2.0 / s2 * (b[m][j] * g[j][m]).re;
            for k in 0..k_users {
                let db = -(b[m][j] * b[k][m]) / s2;
                let dabs = 2.0 * (b[k][j].conj() * db).re;
                let dc = dabs / n[j] - b[k][j].norm_sqr() * dn / (n[j] * n[j]);
                acc += coef(k, j) * q[j] * dc;
            }
        }
        *gm = acc;
    }
    Ok((rate, grad))
}
