//! Small dense complex linear algebra.
//!
//! Every matrix in this crate is at most a few dozen rows, so everything here
//! is plain row-major storage and textbook algorithms: a Cholesky solver for
//! the Hermitian positive-definite systems that appear in MMSE beamforming,
//! and power iteration for the Perron root of small nonnegative matrices.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Complex column vector.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct CVec(Vec<C64>);

impl CVec {
    pub fn new(data: Vec<C64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![C64::new(0.0, 0.0); len])
    }

    pub fn into_inner(self) -> Vec<C64> {
        self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Euclidean norm `||z||_2`.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Inner product `self^H other`.
    pub fn dot(&self, other: &[C64]) -> C64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|z| z * s).collect())
    }

    /// Unit-norm copy. A zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.scaled(1.0 / n)
        } else {
            self.clone()
        }
    }
}

impl Deref for CVec {
    type Target = [C64];
    fn deref(&self) -> &[C64] {
        &self.0
    }
}

impl DerefMut for CVec {
    fn deref_mut(&mut self) -> &mut [C64] {
        &mut self.0
    }
}

impl From<Vec<C64>> for CVec {
    fn from(v: Vec<C64>) -> Self {
        Self(v)
    }
}

impl FromIterator<C64> for CVec {
    fn from_iter<I: IntoIterator<Item = C64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[CVec]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch(
                "columns of unequal length".into(),
            ));
        }
        Ok(Self::from_fn(rows, columns.len(), |r, c| columns[c][r]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, c: usize) -> CVec {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn columns(&self) -> Vec<CVec> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[C64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, z) in v.iter().enumerate() {
            self[(r, c)] = *z;
        }
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn mul_vec(&self, v: &[C64]) -> CVec {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    /// `self += alpha * v v^H`.
    pub fn add_outer(&mut self, alpha: f64, v: &[C64]) {
        debug_assert!(self.rows == v.len() && self.cols == v.len());
        for r in 0..self.rows {
            let vr = v[r] * alpha;
            for c in 0..self.cols {
                self.data[r * self.cols + c] += vr * v[c].conj();
            }
        }
    }

    /// `self += s * I`.
    pub fn add_diag(&mut self, s: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest `|a_ij - conj(a_ji)|`; infinite for non-square input.
    pub fn hermitian_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Dense real matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        Self::from_fn(rows.len(), n, |r, c| rows[r][c])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl Index<(usize, usize)> for RMat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for RMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

const HERMITIAN_RTOL: f64 = 1e-10;
const PIVOT_RTOL: f64 = 1e-12;

/// Cholesky factor `A = L L^H` of a Hermitian positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<C64>,
}

impl Cholesky {
    pub fn factor(a: &CMat) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky needs a nonempty square matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        let n = a.rows();
        let defect = a.hermitian_defect();
        if defect > HERMITIAN_RTOL * a.max_abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotHermitian { asymmetry: defect });
        }
        let max_diag = (0..n).map(|i| a[(i, i)].re).fold(0.0, f64::max);
        let floor = PIVOT_RTOL * max_diag;

        let mut l = vec![C64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > floor) {
                return Err(Error::Singular { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = C64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[C64]) -> CVec {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        // L y = b
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i].re;
        }
        // L^H x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i].conj() * y[k];
            }
            y[i] = s / self.l[i * n + i].re;
        }
        CVec::new(y)
    }
}

/// Solves `A x = b` for Hermitian positive-definite `A`.
pub fn hermitian_solve(a: &CMat, b: &[C64]) -> Result<CVec> {
    if b.len() != a.rows() {
        return Err(Error::DimensionMismatch(format!(
            "rhs of length {} for a {}x{} system",
            b.len(),
            a.rows(),
            a.cols()
        )));
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

/// Dominant eigenpair of a nonnegative matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PerronPair {
    pub value: f64,
    /// Scaled so the last component is 1 whenever that component is positive;
    /// otherwise scaled to unit max-norm.
    pub vector: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PowerIterOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PowerIterOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tol: 1e-12,
        }
    }
}

pub fn principal_eig(m: &RMat) -> Result<PerronPair> {
    principal_eig_with(m, PowerIterOptions::default())
}

/// Power iteration from the all-ones vector.
///
/// Stops once both the eigenvalue estimate and the max-normalised iterate
/// change by less than `tol` (relative).
pub fn principal_eig_with(m: &RMat, opts: PowerIterOptions) -> Result<PerronPair> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "principal_eig needs a nonempty square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.data.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidSpec(
            "principal_eig needs finite nonnegative entries".into(),
        ));
    }

    let mut x = vec![1.0; n];
    let mut lambda = f64::NAN;
    for it in 1..=opts.max_iters {
        let y = m.mul_vec(&x);
        let ymax = y.iter().cloned().fold(0.0, f64::max);
        if ymax == 0.0 {
            // Nilpotent on the current iterate; the spectral radius seen from
            // a positive start is zero.
            return Ok(PerronPair {
                value: 0.0,
                vector: x,
                iterations: it,
            });
        }
        let xmax = x.iter().cloned().fold(0.0, f64::max);
        let new_lambda = ymax / xmax;
        let next: Vec<f64> = y.iter().map(|v| v / ymax).collect();
        let dx = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b / xmax).abs())
            .fold(0.0, f64::max);
        let dl = (new_lambda - lambda).abs();
        x = next;
        lambda = new_lambda;
        if dl <= opts.tol * lambda && dx <= opts.tol {
            return Ok(finish(m, x, it));
        }
    }
    Err(Error::NotConverged {
        what: "power iteration",
        iterations: opts.max_iters,
    })
}

fn finish(m: &RMat, mut x: Vec<f64>, iterations: usize) -> PerronPair {
    let last = *x.last().unwrap();
    if last > 0.0 {
        for v in &mut x {
            *v /= last;
        }
    }
    // Rayleigh-type estimate from the final iterate, weighted towards the
    // largest components.
    let y = m.mul_vec(&x);
    let num: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
    let den: f64 = x.iter().map(|b| b * b).sum();
    PerronPair {
        value: num / den,
        vector: x,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> CMat {
        let b = CMat::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let mut a = CMat::zeros(n, n);
        for k in 0..n {
            a.add_outer(1.0, &b.column(k));
        }
        a.add_diag(0.1);
        a
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let b = CVec::new(vec![c(1.0, 2.0), c(-3.0, 0.5), c(0.0, -1.0)]);
        let x = hermitian_solve(&CMat::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn scaled_identity_solve() {
        let a = CMat::identity(3).scaled(2.0);
        let b = CVec::new(vec![c(1.0, 0.0); 3]);
        let x = hermitian_solve(&a, &b).unwrap();
        for z in x.iter() {
            assert!((z - c(0.5, 0.0)).norm() < 1e-15);
        }
    }

    /// Residual re-evaluated by compensated (two-sum) accumulation, independent
    /// of the solver's arithmetic.
    fn residual_compensated(a: &CMat, x: &[C64], b: &[C64]) -> f64 {
        let mut out = 0.0;
        for r in 0..a.rows() {
            let (mut re, mut im) = ((0.0f64, 0.0f64), (0.0f64, 0.0f64));
            let add = |acc: &mut (f64, f64), v: f64| {
                let s = acc.0 + v;
                let bp = s - acc.0;
                acc.1 += (acc.0 - (s - bp)) + (v - bp);
                acc.0 = s;
            };
            for k in 0..a.cols() {
                let (ar, ai, xr, xi) = (a[(r, k)].re, a[(r, k)].im, x[k].re, x[k].im);
                add(&mut re, ar * xr);
                add(&mut re, -ai * xi);
                add(&mut im, ar * xi);
                add(&mut im, ai * xr);
            }
            add(&mut re, -b[r].re);
            add(&mut im, -b[r].im);
            let rr = re.0 + re.1;
            let ii = im.0 + im.1;
            out += rr * rr + ii * ii;
        }
        out.sqrt()
    }

    #[test]
    fn random_pd_solve_has_small_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_pd(4, &mut rng);
            let b: CVec = (0..4).map(|_| c(rng.random(), rng.random())).collect();
            let x = hermitian_solve(&a, &b).unwrap();
            assert!(residual_compensated(&a, &x, &b) <= 1e-8 * b.norm());
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut a = CMat::identity(2);
        a[(0, 1)] = c(0.5, 0.0);
        assert!(matches!(
            hermitian_solve(&a, &[c(1.0, 0.0), c(1.0, 0.0)]),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn singular_rejected() {
        let mut a = CMat::zeros(2, 2);
        a.add_outer(1.0, &[c(1.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(
            hermitian_solve(&a, &[c(1.0, 0.0), c(1.0, 0.0)]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn diagonal_perron_value() {
        let m = RMat::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let p = principal_eig(&m).unwrap();
        assert!((p.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exchange_matrix() {
        let m = RMat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let p = principal_eig(&m).unwrap();
        assert!((p.value - 1.0).abs() < 1e-12);
        assert_eq!(p.vector, vec![1.0, 1.0]);
    }

    /// Perron vector by repeated squaring: columns of `M^(2^k)` align with it.
    fn repeated_squaring_oracle(m: &RMat) -> (f64, Vec<f64>) {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..60 {
            let mut sq = RMat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    sq[(i, j)] = (0..n).map(|k| a[(i, k)] * a[(k, j)]).sum();
                }
            }
            let s = sq.data.iter().cloned().fold(0.0, f64::max);
            sq.data.iter_mut().for_each(|v| *v /= s);
            a = sq;
        }
        let col: Vec<f64> = (0..n).map(|i| a[(i, 0)]).collect();
        let v: Vec<f64> = col.iter().map(|x| x / col[n - 1]).collect();
        let mv = m.mul_vec(&v);
        (mv[n - 1] / v[n - 1], v)
    }

    #[test]
    fn random_positive_matches_squaring_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = RMat::from_fn(5, 5, |_, _| rng.random_range(0.01..1.0));
            let p = principal_eig(&m).unwrap();
            let (lam, v) = repeated_squaring_oracle(&m);
            assert!((p.value - lam).abs() <= 1e-10 * lam);
            for (a, b) in p.vector.iter().zip(&v) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            assert!(p.vector.iter().all(|&x| x > 0.0));
            assert_eq!(*p.vector.last().unwrap(), 1.0);
            let mv = m.mul_vec(&p.vector);
            let res = mv
                .iter()
                .zip(&p.vector)
                .map(|(a, b)| (a - p.value * b).abs())
                .fold(0.0, f64::max);
            assert!(res <= 1e-9 * p.value);
        }
    }

    #[test]
    fn negative_entries_rejected() {
        let m = RMat::from_rows(&[vec![1.0, -1.0], vec![0.0, 1.0]]);
        assert!(principal_eig(&m).is_err());
    }

    #[test]
    fn non_convergence_reported() {
        // Imprimitive matrix started off its Perron vector oscillates.
        let m = RMat::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]);
        let r = principal_eig_with(&m, PowerIterOptions { max_iters: 50, tol: 1e-12 });
        assert!(matches!(r, Err(Error::NotConverged { .. })));
    }

    mod props {
        use super::*;
        use proptest::{prop_assert, proptest};

        proptest! {
            #[test]
            fn perron_value_within_row_sum_bounds(
                entries in proptest::collection::vec(0.001f64..10.0, 16),
            ) {
                let m = RMat::from_fn(4, 4, |r, c| entries[r * 4 + c]);
                let p = principal_eig(&m).unwrap();
                let sums: Vec<f64> = (0..4).map(|r| m.row(r).iter().sum()).collect();
                let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = sums.iter().cloned().fold(0.0, f64::max);
                prop_assert!(p.value >= lo * (1.0 - 1e-12));
                prop_assert!(p.value <= hi * (1.0 + 1e-12));
            }

            #[test]
            fn hermitian_solve_residual(seed in 0u64..10_000, n in 1usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_pd(n, &mut rng);
                let b: CVec = (0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                let x = hermitian_solve(&a, &b).unwrap();
                let ax = a.mul_vec(&x);
                let r: f64 = ax.iter().zip(b.iter()).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
                prop_assert!(r <= 1e-8 * b.norm());
            }
        }
    }
}
