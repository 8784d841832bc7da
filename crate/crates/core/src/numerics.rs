//! Small dense-matrix kernel shared by the solver, the certifier and the
//! moment analysis.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. The matrices involved
//! are tiny (state dimensions of a handful), so clarity wins over blocking or
//! structure exploitation.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical tolerances used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceSet {
    /// Relative fixed-point tolerance for the Riccati iteration.
    pub fp_rel: f64,
    /// Definiteness slack, relative to the largest eigenvalue magnitude.
    pub pd_tol: f64,
    /// Frobenius norm above which an iteration is declared divergent.
    pub div_norm: f64,
    pub max_iter: usize,
    /// Smallest admissible singular-value ratio for invertibility.
    pub inv_tol: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        Self {
            fp_rel: 1e-10,
            pd_tol: 1e-9,
            div_norm: 1e12,
            max_iter: 10_000,
            inv_tol: 1e-12,
        }
    }
}

impl ToleranceSet {
    /// Lists the fields that are not strictly positive.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("fp_rel", self.fp_rel),
            ("pd_tol", self.pd_tol),
            ("div_norm", self.div_norm),
            ("inv_tol", self.inv_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("tolerance {name} must be positive and finite"));
            }
        }
        if self.max_iter < 1 {
            out.push("tolerance max_iter must be at least 1".to_string());
        }
        out
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Ratio of smallest to largest singular value; 0 for the zero matrix.
pub fn singular_value_ratio(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0.0;
    }
    sv.min() / max
}

pub fn is_invertible(a: &DMatrix<f64>, inv_tol: f64) -> bool {
    a.is_square() && a.nrows() > 0 && singular_value_ratio(a) > inv_tol
}

fn inverse(a: &DMatrix<f64>, inv_tol: f64) -> Result<DMatrix<f64>> {
    if !is_invertible(a, inv_tol) {
        return Err(Error::SingularMatrix(format!(
            "singular value ratio {:e} <= {:e}",
            singular_value_ratio(a),
            inv_tol
        )));
    }
    a.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix("LU factorization failed".into()))
}

/// `A^k` for any integer `k`; negative powers go through a single LU inverse.
pub fn mat_pow_signed(a: &DMatrix<f64>, k: i64, inv_tol: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "matrix power of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let base = if k < 0 { inverse(a, inv_tol)? } else { a.clone() };
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k.unsigned_abs() {
        out = &out * &base;
    }
    Ok(out)
}

/// Precomputed powers `A^k` for `k` in `[min, max]`.
///
/// The negative half is built from one factorization of `A`.
#[derive(Debug, Clone)]
pub struct PowerTable {
    min: i64,
    powers: Vec<DMatrix<f64>>,
}

impl PowerTable {
    pub fn new(a: &DMatrix<f64>, min: i64, max: i64, inv_tol: f64) -> Result<Self> {
        let min = min.min(0);
        let max = max.max(0);
        if !a.is_square() {
            return Err(Error::DimensionMismatch("power table of a non-square matrix".into()));
        }
        let n = a.nrows();
        let mut neg = Vec::new();
        if min < 0 {
            let inv = inverse(a, inv_tol)?;
            let mut p = DMatrix::identity(n, n);
            for _ in 0..(-min) {
                p = &p * &inv;
                neg.push(p.clone());
            }
        }
        let mut powers: Vec<DMatrix<f64>> = neg.into_iter().rev().collect();
        let mut p = DMatrix::identity(n, n);
        powers.push(p.clone());
        for _ in 0..max {
            p = &p * a;
            powers.push(p.clone());
        }
        Ok(Self { min, powers })
    }

    /// `A^k`; panics if `k` lies outside the precomputed range.
    pub fn get(&self, k: i64) -> &DMatrix<f64> {
        let idx = k - self.min;
        assert!(
            idx >= 0 && (idx as usize) < self.powers.len(),
            "power {k} outside precomputed range"
        );
        &self.powers[idx as usize]
    }

    pub fn range(&self) -> (i64, i64) {
        (self.min, self.min + self.powers.len() as i64 - 1)
    }
}

/// Definiteness test on the symmetric part of `m`.
///
/// Returns whether the smallest eigenvalue exceeds
/// `pd_tol * max(1, largest |eigenvalue|)`, together with that eigenvalue.
pub fn is_positive_definite(m: &DMatrix<f64>, pd_tol: f64) -> (bool, f64) {
    if m.nrows() == 0 || !m.is_square() {
        return (false, f64::NAN);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    (min > pd_tol * scale, min)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Matrix of `X ↦ F X Fᵀ + Σ σ² M X Mᵀ` acting on column-stacked `vec(X)`.
pub fn second_moment_operator_matrix(
    f: &DMatrix<f64>,
    terms: &[(f64, DMatrix<f64>)],
) -> Result<DMatrix<f64>> {
    let k = f.nrows();
    if !f.is_square() {
        return Err(Error::DimensionMismatch("second-moment operator needs square F".into()));
    }
    let mut t = f.kronecker(f);
    for (i, (s2, m)) in terms.iter().enumerate() {
        if m.nrows() != k || m.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "noise term {i} is {}x{}, expected {k}x{k}",
                m.nrows(),
                m.ncols()
            )));
        }
        if *s2 != 0.0 {
            t += m.kronecker(m) * *s2;
        }
    }
    Ok(t)
}

/// Largest eigenvalue modulus, via a real Schur decomposition.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    match Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, z| acc.max(z.norm())),
        None => gelfand_estimate(m),
    }
}

// Fallback when QR iterations stall: ‖M^(2^k)‖^(1/2^k) with rescaling.
fn gelfand_estimate(m: &DMatrix<f64>) -> f64 {
    let mut p = m.clone();
    let mut log_scale = 0.0_f64;
    let mut power = 1.0_f64;
    for _ in 0..40 {
        let norm = p.norm();
        if norm == 0.0 {
            return 0.0;
        }
        log_scale += norm.ln() / power;
        p /= norm;
        p = &p * &p;
        power *= 2.0;
    }
    (log_scale + p.norm().max(f64::MIN_POSITIVE).ln() / power).exp()
}

/// Solves `P = Q + Fᵀ P F + Σ σ² Mᵀ P M` for symmetric `P`.
///
/// The map on the right is the adjoint of the second-moment operator, so a
/// (unique) solution exists exactly when that operator has spectral radius
/// below one; otherwise `Error::Unstable` carries the radius.
pub fn solve_adjoint_moment_equation(
    f: &DMatrix<f64>,
    terms: &[(f64, DMatrix<f64>)],
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = f.nrows();
    if q.nrows() != k || q.ncols() != k {
        return Err(Error::DimensionMismatch("right-hand side size differs from F".into()));
    }
    let t = second_moment_operator_matrix(f, terms)?;
    let rho = spectral_radius(&t);
    if !rho.is_finite() {
        return Err(Error::NumericalFailure("non-finite closed-loop operator".into()));
    }
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let lhs = DMatrix::identity(k * k, k * k) - t.transpose();
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("singular Lyapunov system".into()))?;
    let p = DMatrix::from_column_slice(k, k, sol.as_slice());
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite Lyapunov solution".into()));
    }
    Ok(symmetrize(&p))
}
