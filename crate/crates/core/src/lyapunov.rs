//! Lyapunov-type certificates and the exact second-moment test.
//!
//! The delay-free loop `β_{t+1} = (A + LK) β_t + Σ_τ ω^τ A^D C_τ K β_t` is
//! mean-square stable iff some `P ≻ 0` satisfies
//!
//! ```text
//! P ≻ (A+LK)ᵀ P (A+LK) + Σ_τ σ_τ² Kᵀ C_τᵀ (Aᵀ)^D P A^D C_τ K,
//! ```
//!
//! which with `S = −P⁻¹` and `Y = K S` is the block LMI built by
//! [`assemble_lmi`]. Independently, [`exact_ms_check`] decides stability of
//! the original delayed loop from its augmented second-moment operator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ddare::{DdareMap, DdareSolution};
use crate::error::{Error, Result};
use crate::model::MultiDelaySystem;
use crate::numerics::{
    is_positive_definite, second_moment_operator_matrix, solve_adjoint_moment_equation, spectral_radius,
    symmetric_eigenvalues, symmetrize, PowerTable, ToleranceSet,
};
use crate::reduction::FeedbackLaw;

/// Default cap on the squared augmented dimension for [`exact_ms_check`].
pub const DEFAULT_MOMENT_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationCertificate {
    /// Gain of the delay-free loop (m×n).
    #[serde(rename = "K", with = "crate::serde_rows")]
    pub k: DMatrix<f64>,
    #[serde(rename = "P", with = "crate::serde_rows")]
    pub p: DMatrix<f64>,
    /// `−P⁻¹`.
    #[serde(rename = "S", with = "crate::serde_rows")]
    pub s: DMatrix<f64>,
    /// `K S`.
    #[serde(rename = "Y", with = "crate::serde_rows")]
    pub y: DMatrix<f64>,
    pub lmi_max_eig: f64,
    pub ddli_margin: f64,
}

impl StabilizationCertificate {
    /// Fills in whichever of `(K, P)` and `(S, Y)` is missing and recomputes the margins.
    pub fn complete(
        sys: &MultiDelaySystem,
        k: Option<DMatrix<f64>>,
        p: Option<DMatrix<f64>>,
        s: Option<DMatrix<f64>>,
        y: Option<DMatrix<f64>>,
        tol: &ToleranceSet,
    ) -> Result<Self> {
        let inv = |m: &DMatrix<f64>, what: &str| {
            m.clone().try_inverse().ok_or_else(|| Error::SingularMatrix(what.to_string()))
        };
        let (k, p, s, y) = match (k, p, s, y) {
            (Some(k), Some(p), s, y) => {
                let s = match s {
                    Some(s) => s,
                    None => -inv(&p, "P")?,
                };
                let y = y.unwrap_or_else(|| &k * &s);
                (k, p, s, y)
            }
            (k, p, Some(s), Some(y)) => {
                let s_inv = inv(&s, "S")?;
                let p = p.unwrap_or_else(|| -&s_inv);
                let k = k.unwrap_or_else(|| &y * &s_inv);
                (k, p, s, y)
            }
            _ => return Err(Error::Schema("certificate needs K and P, or S and Y".into())),
        };
        let mut cert = Self { k, p, s, y, lmi_max_eig: f64::NAN, ddli_margin: f64::NAN };
        let report = verify_certificate(sys, &cert, tol);
        cert.lmi_max_eig = report.lmi_max_eig;
        cert.ddli_margin = report.ddli_margin;
        Ok(cert)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub valid: bool,
    pub reasons: Vec<String>,
    pub ddli_margin: f64,
    pub lmi_max_eig: f64,
    /// Spectral radius of the delay-free second-moment map under `K`.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub rho: f64,
    pub augmented_dim: usize,
    pub stable: bool,
}

/// `A`, `L` and the noise terms `(σ_τ², A^D C_τ)` of the delay-free loop.
#[derive(Debug, Clone)]
struct BetaLoop {
    a: DMatrix<f64>,
    l: DMatrix<f64>,
    /// Noise terms before multiplication by `K`.
    noise: Vec<(f64, DMatrix<f64>)>,
    /// `σ_τ` and `A^D C_τ` for every τ, used for LMI rows.
    rows: Vec<(f64, DMatrix<f64>)>,
}

impl BetaLoop {
    fn new(sys: &MultiDelaySystem, tol: &ToleranceSet) -> Result<Self> {
        sys.check_shapes()?;
        let (n, m, d) = (sys.n(), sys.m(), sys.delay() as i64);
        let pw = PowerTable::new(&sys.a, 0, d, tol.inv_tol)?;
        let l = sys
            .b
            .iter()
            .enumerate()
            .fold(DMatrix::zeros(n, m), |acc, (j, b)| acc + pw.get(d - j as i64) * b);
        let ad = pw.get(d);
        let noise = sys.noise_channels().map(|(_, s2, c)| (s2, ad * c)).collect();
        let rows = sys.c.iter().zip(&sys.sigma2).map(|(c, s2)| (s2.max(0.0).sqrt(), ad * c)).collect();
        Ok(Self { a: sys.a.clone(), l, noise, rows })
    }

    fn check_k(&self, k: &DMatrix<f64>) -> Result<()> {
        if k.shape() != (self.l.ncols(), self.a.nrows()) {
            return Err(Error::DimensionMismatch(format!(
                "K must be {}x{}, got {:?}",
                self.l.ncols(),
                self.a.nrows(),
                k.shape()
            )));
        }
        Ok(())
    }

    fn closed_loop(&self, k: &DMatrix<f64>) -> (DMatrix<f64>, Vec<(f64, DMatrix<f64>)>) {
        let f = &self.a + &self.l * k;
        let terms = self.noise.iter().map(|(s2, g)| (*s2, g * k)).collect();
        (f, terms)
    }

    /// `FᵀPF + Σ σ² (GK)ᵀ P (GK)`.
    fn adjoint(&self, k: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
        let (f, terms) = self.closed_loop(k);
        let mut out = f.transpose() * p * &f;
        for (s2, g) in &terms {
            out += g.transpose() * p * g * *s2;
        }
        symmetrize(&out)
    }

    fn rho(&self, k: &DMatrix<f64>) -> Result<f64> {
        let (f, terms) = self.closed_loop(k);
        Ok(spectral_radius(&second_moment_operator_matrix(&f, &terms)?))
    }
}

/// `P − Q − (A+LK)ᵀP(A+LK) − Σ σ_τ² KᵀC_τᵀ(Aᵀ)^D P A^D C_τ K`.
pub fn ddle_residual(sys: &MultiDelaySystem, k: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bl = BetaLoop::new(sys, &ToleranceSet::default())?;
    bl.check_k(k)?;
    let n = sys.n();
    if p.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!("P and Q must be {n}x{n}")));
    }
    Ok(symmetrize(&(p - q - bl.adjoint(k, p))))
}

/// Solves the delay-dependent Lyapunov equation for a fixed gain.
pub fn solve_ddle(sys: &MultiDelaySystem, k: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bl = BetaLoop::new(sys, &ToleranceSet::default())?;
    bl.check_k(k)?;
    let (f, terms) = bl.closed_loop(k);
    solve_adjoint_moment_equation(&f, &terms, q)
}

/// Smallest eigenvalue of `P − (A+LK)ᵀP(A+LK) − Σ …`.
pub fn ddli_margin(sys: &MultiDelaySystem, k: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let bl = BetaLoop::new(sys, &ToleranceSet::default())?;
    bl.check_k(k)?;
    let gap = symmetrize(&(p - bl.adjoint(k, p)));
    Ok(min_eig(&gap))
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

fn max_eig(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn max_abs_eig(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).into_iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Symmetric `(D+3)n` block matrix with rows `S; AS+LY; σ_0 A^D C_0 Y; …; σ_D A^D C_D Y`
/// in the first block column and `S` on the diagonal.
pub fn assemble_lmi(sys: &MultiDelaySystem, s: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bl = BetaLoop::new(sys, &ToleranceSet::default())?;
    assemble_with(&bl, s, y)
}

fn assemble_with(bl: &BetaLoop, s: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (bl.a.nrows(), bl.l.ncols());
    if s.shape() != (n, n) || y.shape() != (m, n) {
        return Err(Error::DimensionMismatch(format!("S must be {n}x{n} and Y {m}x{n}")));
    }
    let s = symmetrize(s);
    let blocks = bl.rows.len() + 2;
    let mut out = DMatrix::zeros(blocks * n, blocks * n);
    for b in 0..blocks {
        out.view_mut((b * n, b * n), (n, n)).copy_from(&s);
    }
    let mut first = vec![&bl.a * &s + &bl.l * y];
    first.extend(bl.rows.iter().map(|(sigma, g)| g * y * *sigma));
    for (i, blk) in first.iter().enumerate() {
        let r = (i + 1) * n;
        out.view_mut((r, 0), (n, n)).copy_from(blk);
        out.view_mut((0, r), (n, n)).copy_from(&blk.transpose());
    }
    Ok(out)
}

/// Recomputes both certificate conditions from scratch.
pub fn verify_certificate(sys: &MultiDelaySystem, cert: &StabilizationCertificate, tol: &ToleranceSet) -> VerificationReport {
    let mut reasons = Vec::new();
    let bl = match BetaLoop::new(sys, tol) {
        Ok(bl) => bl,
        Err(e) => {
            return VerificationReport {
                valid: false,
                reasons: vec![e.to_string()],
                ddli_margin: f64::NAN,
                lmi_max_eig: f64::NAN,
                rho: f64::NAN,
            }
        }
    };
    let n = sys.n();
    let mut ddli = f64::NAN;
    let mut rho = f64::NAN;
    let k_ok = bl.check_k(&cert.k).map_err(|e| reasons.push(e.to_string())).is_ok();
    let p_ok = if cert.p.shape() != (n, n) {
        reasons.push(format!("P must be {n}x{n}"));
        false
    } else {
        true
    };
    let finite = [&cert.k, &cert.p, &cert.s, &cert.y].iter().all(|m| m.iter().all(|v| v.is_finite()));
    if !finite {
        reasons.push("certificate has non-finite entries".into());
    }
    if k_ok && p_ok && finite {
        let p = symmetrize(&cert.p);
        if !is_positive_definite(&p, tol.pd_tol).0 {
            reasons.push("P not positive definite".into());
        }
        let gap = symmetrize(&(&p - bl.adjoint(&cert.k, &p)));
        ddli = min_eig(&gap);
        if !(ddli > tol.pd_tol * max_abs_eig(&p).max(1.0)) {
            reasons.push(format!("Lyapunov inequality not strict (margin {ddli:e})"));
        }
        rho = bl.rho(&cert.k).unwrap_or(f64::NAN);
    }
    let mut lmi = f64::NAN;
    if finite {
        match assemble_with(&bl, &cert.s, &cert.y) {
            Ok(mat) => {
                lmi = max_eig(&mat);
                if !(lmi < -tol.pd_tol * max_abs_eig(&mat).max(1.0)) {
                    reasons.push(format!("LMI not negative definite (max eigenvalue {lmi:e})"));
                }
            }
            Err(e) => reasons.push(e.to_string()),
        }
    }
    VerificationReport { valid: reasons.is_empty(), reasons, ddli_margin: ddli, lmi_max_eig: lmi, rho }
}

/// Certificate built from a Riccati solution: `K = −Ψ⁻¹LᵀZA`, `P = Z`.
pub fn certificate_from_ddare(
    sys: &MultiDelaySystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    sol: &DdareSolution,
    tol: &ToleranceSet,
) -> Result<StabilizationCertificate> {
    let map = DdareMap::new(sys, q, r, tol)?;
    let k = map.beta_gain(&sol.z)?;
    let s = -sol.z.clone().try_inverse().ok_or_else(|| Error::SingularMatrix("Z".into()))?;
    StabilizationCertificate::complete(sys, Some(k), Some(sol.z.clone()), Some(symmetrize(&s)), None, tol)
}

/// Closed-loop matrices of the augmented state `(x_t, u_{t−1}, …, u_{t−D})`:
/// the mean dynamics and one `(σ_τ², C̃_τ)` per noisy channel.
pub fn augmented_closed_loop(
    sys: &MultiDelaySystem,
    law: &FeedbackLaw,
) -> Result<(DMatrix<f64>, Vec<(f64, DMatrix<f64>)>)> {
    sys.check_shapes()?;
    law.check(sys)?;
    let (n, m, d) = (sys.n(), sys.m(), sys.delay());
    let dim = n + d * m;
    let col = |tau: usize| if tau == 0 { 0 } else { n + (tau - 1) * m };
    let width = |tau: usize| if tau == 0 { n } else { m };

    let mut a_t = DMatrix::zeros(dim, dim);
    a_t.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    for tau in 0..=d {
        let mut blk = &sys.b[0] * &law.gains[tau];
        if tau > 0 {
            blk += &sys.b[tau];
        }
        let mut v = a_t.view_mut((0, col(tau)), (n, width(tau)));
        v += blk;
    }
    if d > 0 {
        for tau in 0..=d {
            a_t.view_mut((n, col(tau)), (m, width(tau))).copy_from(&law.gains[tau]);
        }
        for i in 2..=d {
            a_t.view_mut((col(i), col(i - 1)), (m, m)).fill_with_identity();
        }
    }

    let mut terms = Vec::new();
    for (tau, s2, c) in sys.noise_channels() {
        let mut ct = DMatrix::zeros(dim, dim);
        if tau == 0 {
            for j in 0..=d {
                ct.view_mut((0, col(j)), (n, width(j))).copy_from(&(c * &law.gains[j]));
            }
        } else {
            ct.view_mut((0, col(tau)), (n, m)).copy_from(c);
        }
        terms.push((s2, ct));
    }
    Ok((a_t, terms))
}

/// Exact mean-square stability test for the delayed loop under `law`.
pub fn exact_ms_check(sys: &MultiDelaySystem, law: &FeedbackLaw) -> Result<MomentReport> {
    exact_ms_check_with(sys, law, &ToleranceSet::default(), DEFAULT_MOMENT_CAP)
}

pub fn exact_ms_check_with(sys: &MultiDelaySystem, law: &FeedbackLaw, tol: &ToleranceSet, cap: usize) -> Result<MomentReport> {
    let (a_t, terms) = augmented_closed_loop(sys, law)?;
    let k = a_t.nrows();
    if k * k > cap {
        return Err(Error::TooLarge { dim: k * k, cap });
    }
    let rho = spectral_radius(&second_moment_operator_matrix(&a_t, &terms)?);
    if !rho.is_finite() {
        return Err(Error::NumericalFailure("non-finite spectral radius".into()));
    }
    Ok(MomentReport { rho, augmented_dim: k, stable: rho < 1.0 - tol.pd_tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddare::solve_ddare;
    use approx::assert_relative_eq;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, b: &[f64], c: &[f64], s2: &[f64]) -> MultiDelaySystem {
        MultiDelaySystem::new(s(a), b.iter().map(|x| s(*x)).collect(), c.iter().map(|x| s(*x)).collect(), s2.to_vec())
    }

    #[test]
    fn scalar_ddle() {
        let sys = scalar(1.2, &[1.0], &[1.0], &[0.25]);
        let p = solve_ddle(&sys, &s(-1.0), &s(1.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 100.0 / 71.0, epsilon = 1e-12);
        let res = ddle_residual(&sys, &s(-1.0), &p, &s(1.0)).unwrap();
        assert!(res[(0, 0)].abs() < 1e-12);
        let r2 = ddle_residual(&sys, &s(-1.0), &s(2.0), &s(1.0)).unwrap();
        assert_relative_eq!(r2[(0, 0)], 0.71 * 2.0 - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unstable_gain_rejected() {
        let sys = scalar(2.0, &[1.0], &[1.0], &[1.0]);
        match solve_ddle(&sys, &s(-1.8), &s(1.0)) {
            Err(Error::Unstable { rho }) => assert_relative_eq!(rho, 3.28, epsilon = 1e-10),
            other => panic!("expected Unstable, got {other:?}"),
        }
    }

    #[test]
    fn nilpotent_closed_loop() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::zeros(2, 1);
        let sys = MultiDelaySystem::new(a.clone() + DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]), vec![DMatrix::from_row_slice(2, 1, &[0.0, 1.0])], vec![b], vec![0.0]);
        // A + LK = [[0,1],[0,0]].
        let k = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        let p = solve_ddle(&sys, &k, &DMatrix::identity(2, 2)).unwrap();
        let expected = DMatrix::identity(2, 2) + a.transpose() * &a;
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn lmi_scalar_layout() {
        let sys = scalar(2.0, &[1.0], &[1.0], &[1.0]);
        let m = assemble_lmi(&sys, &s(-1.0), &s(0.4)).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[-1.0, -1.6, 0.4, -1.6, -1.0, 0.0, 0.4, 0.0, -1.0]);
        assert!((m - want).norm() < 1e-14);
    }

    #[test]
    fn lmi_decoupled() {
        let sys = MultiDelaySystem::new(DMatrix::zeros(2, 2), vec![DMatrix::zeros(2, 1)], vec![DMatrix::zeros(2, 1)], vec![0.0]);
        let m = assemble_lmi(&sys, &(-DMatrix::identity(2, 2)), &DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(m.shape(), (6, 6));
        assert_relative_eq!(max_eig(&m), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn certificate_from_scalar_are() {
        let sys = scalar(2.0, &[1.0], &[0.0], &[0.0]);
        let tol = ToleranceSet::default();
        let sol = solve_ddare(&sys, &s(1.0), &s(1.0), &tol).unwrap();
        let cert = certificate_from_ddare(&sys, &s(1.0), &s(1.0), &sol, &tol).unwrap();
        let k = cert.k[(0, 0)];
        assert_relative_eq!(k, -(1.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-9);
        assert_relative_eq!(cert.ddli_margin, 1.0 + k * k, epsilon = 1e-8);
        assert!(cert.lmi_max_eig < 0.0);
        assert!(verify_certificate(&sys, &cert, &tol).valid);
    }

    #[test]
    fn non_pd_p_is_reported() {
        let sys = scalar(0.5, &[1.0], &[0.0], &[0.0]);
        let cert = StabilizationCertificate {
            k: s(0.0),
            p: s(-1.0),
            s: s(1.0),
            y: s(0.0),
            lmi_max_eig: 0.0,
            ddli_margin: 0.0,
        };
        let rep = verify_certificate(&sys, &cert, &ToleranceSet::default());
        assert!(!rep.valid);
        assert!(rep.reasons.iter().any(|r| r == "P not positive definite"));
    }

    #[test]
    fn moment_check_scalar_cases() {
        let sys = scalar(2.0, &[1.0], &[1.0], &[1.0]);
        let rep = exact_ms_check(&sys, &FeedbackLaw { gains: vec![s(-1.0)] }).unwrap();
        assert_relative_eq!(rep.rho, 2.0, epsilon = 1e-12);
        assert!(!rep.stable);

        let stable = scalar(0.6, &[1.0, 1.0], &[1.0, 1.0], &[3.0, 3.0]);
        let rep = exact_ms_check(&stable, &FeedbackLaw::zero(&stable)).unwrap();
        assert_eq!(rep.augmented_dim, 2);
        assert_relative_eq!(rep.rho, 0.36, epsilon = 1e-12);
    }

    #[test]
    fn moment_cap() {
        let sys = scalar(0.5, &[1.0; 5], &[0.0; 5], &[0.0; 5]);
        let err = exact_ms_check_with(&sys, &FeedbackLaw::zero(&sys), &ToleranceSet::default(), 16).unwrap_err();
        assert!(matches!(err, Error::TooLarge { dim: 25, cap: 16 }));
    }
}
