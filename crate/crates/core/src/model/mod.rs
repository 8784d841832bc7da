//! System data model.
//!
//! The central type is [`MultiDelaySystem`]:
//!
//! ```text
//! x_{t+1} = A x_t + Σ_{τ=0}^{D} (B_τ + ω_t^τ C_τ) u_{t-τ}
//! ```
//!
//! with independent zero-mean scalar noises `ω_t^τ` of variance `σ_τ²`.
//! [`RestrictedSystem`] is the single-delay special case used for delay
//! margins, and [`WncsDescription`] describes a plant driven over a lossy
//! multi-path network, which maps onto the same model.

mod document;

pub use document::{load_spec, serialize_spec, NoiseModel, ProblemSpec, SCHEMA_VERSION};

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{is_invertible, singular_value_ratio, ToleranceSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDelaySystem {
    #[serde(rename = "A", with = "crate::serde_rows")]
    pub a: DMatrix<f64>,
    /// `B_0..B_D`.
    #[serde(rename = "B", with = "crate::serde_rows::list")]
    pub b: Vec<DMatrix<f64>>,
    /// `C_0..C_D`.
    #[serde(rename = "C", with = "crate::serde_rows::list")]
    pub c: Vec<DMatrix<f64>>,
    pub sigma2: Vec<f64>,
}

impl MultiDelaySystem {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>, c: Vec<DMatrix<f64>>, sigma2: Vec<f64>) -> Self {
        Self { a, b, c, sigma2 }
    }

    /// Builds a system and rejects it unless every invariant holds.
    pub fn checked(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        sigma2: Vec<f64>,
        tol: &ToleranceSet,
    ) -> Result<Self> {
        let sys = Self::new(a, b, c, sigma2);
        sys.ensure_valid(tol)?;
        Ok(sys)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    /// Maximum delay `D`.
    pub fn delay(&self) -> usize {
        self.b.len().saturating_sub(1)
    }

    pub fn ensure_valid(&self, tol: &ToleranceSet) -> Result<()> {
        let report = validate_system(self, tol);
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSystem(report))
        }
    }

    /// Cheap shape check used by operations that assume a validated system.
    pub(crate) fn check_shapes(&self) -> Result<()> {
        let report = shape_issues(self);
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(report.to_string()))
        }
    }

    /// Noise channels `(σ_τ², C_τ)` with non-zero variance.
    pub fn noise_channels(&self) -> impl Iterator<Item = (usize, f64, &DMatrix<f64>)> {
        self.sigma2
            .iter()
            .zip(&self.c)
            .enumerate()
            .filter(|(_, (s2, _))| **s2 != 0.0)
            .map(|(tau, (s2, c))| (tau, *s2, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub code: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub message: String,
}

/// Violated invariants; empty iff the system is valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.issues.iter().any(|i| i.message.contains(needle) || i.code == needle)
    }

    fn push(&mut self, code: &str, index: Option<usize>, message: impl Into<String>) {
        self.issues.push(ValidationIssue { code: code.into(), index, message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<_> = self.issues.iter().map(|i| i.message.as_str()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

fn shape_issues(sys: &MultiDelaySystem) -> ValidationReport {
    let mut r = ValidationReport::default();
    let n = sys.a.nrows();
    if n == 0 || !sys.a.is_square() {
        r.push("a_shape", None, format!("A must be square and non-empty, got {}x{}", sys.a.nrows(), sys.a.ncols()));
    }
    if sys.b.is_empty() {
        r.push("b_length", None, "B must hold at least B_0");
        return r;
    }
    let m = sys.m();
    if m == 0 {
        r.push("m_zero", None, "input dimension must be positive");
    }
    if sys.c.len() != sys.b.len() {
        r.push("c_length", None, format!("C length must be D+1 = {}, got {}", sys.b.len(), sys.c.len()));
    }
    if sys.sigma2.len() != sys.b.len() {
        r.push("sigma2_length", None, format!("sigma2 length must be D+1 = {}, got {}", sys.b.len(), sys.sigma2.len()));
    }
    for (name, list) in [("B", &sys.b), ("C", &sys.c)] {
        for (tau, mat) in list.iter().enumerate() {
            if mat.nrows() != n || mat.ncols() != m {
                r.push(
                    &format!("{}_shape", name.to_lowercase()),
                    Some(tau),
                    format!("{name}[{tau}] is {}x{}, expected {n}x{m}", mat.nrows(), mat.ncols()),
                );
            }
        }
    }
    r
}

/// Checks every invariant of the system and reports the violated ones.
pub fn validate_system(sys: &MultiDelaySystem, tol: &ToleranceSet) -> ValidationReport {
    let mut r = shape_issues(sys);
    for (tau, s2) in sys.sigma2.iter().enumerate() {
        if !s2.is_finite() {
            r.push("non_finite_variance", Some(tau), format!("sigma2[{tau}] is not finite"));
        } else if *s2 < 0.0 {
            r.push("negative_variance", Some(tau), format!("negative variance sigma2[{tau}] = {s2}"));
        }
    }
    let finite = sys.a.iter().chain(sys.b.iter().flatten()).chain(sys.c.iter().flatten()).all(|v| v.is_finite());
    if !finite {
        r.push("non_finite_entry", None, "system matrices contain non-finite entries");
    } else if sys.a.is_square() && sys.a.nrows() > 0 && !is_invertible(&sys.a, tol.inv_tol) {
        r.push(
            "a_singular",
            None,
            format!("A not invertible (singular value ratio {:e})", singular_value_ratio(&sys.a)),
        );
    }
    r
}

/// `x_{t+1} = A x_t + ω⁰ C_0 u_t + (B̄ + ω^D C̄) u_{t-D}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedSystem {
    #[serde(rename = "A", with = "crate::serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "C0", with = "crate::serde_rows")]
    pub c0: DMatrix<f64>,
    #[serde(rename = "Bbar", with = "crate::serde_rows")]
    pub bbar: DMatrix<f64>,
    #[serde(rename = "Cbar", with = "crate::serde_rows")]
    pub cbar: DMatrix<f64>,
    #[serde(rename = "D")]
    pub delay: usize,
    pub sigma0_2: f64,
    #[serde(rename = "sigmaD_2")]
    pub sigma_d_2: f64,
}

impl RestrictedSystem {
    pub fn with_delay(&self, delay: usize) -> Self {
        Self { delay, ..self.clone() }
    }

    pub fn is_diagonal(&self) -> bool {
        let diag = |m: &DMatrix<f64>| {
            m.is_square() && m.nrows() == self.a.nrows() && m.iter().enumerate().all(|(k, v)| k % (m.nrows() + 1) == 0 || *v == 0.0)
        };
        diag(&self.a) && diag(&self.c0) && diag(&self.bbar) && diag(&self.cbar)
    }

    /// Embeds the restricted structure into the general multi-delay model.
    ///
    /// For `D = 0` both noises act on the same input, so they are merged into
    /// one channel with the same second moment. That is only possible when
    /// `C̄` is a multiple of `C_0` (always true for scalars).
    pub fn to_multi_delay(&self) -> Result<MultiDelaySystem> {
        let (n, m) = (self.a.nrows(), self.bbar.ncols());
        let zero = DMatrix::zeros(n, m);
        if self.delay > 0 {
            let d = self.delay;
            let mut b = vec![zero.clone(); d + 1];
            let mut c = vec![zero; d + 1];
            let mut sigma2 = vec![0.0; d + 1];
            b[d] = self.bbar.clone();
            c[0] = self.c0.clone();
            c[d] = self.cbar.clone();
            sigma2[0] = self.sigma0_2;
            sigma2[d] = self.sigma_d_2;
            return Ok(MultiDelaySystem::new(self.a.clone(), b, c, sigma2));
        }
        let (c, s2) = merge_channels(&self.c0, self.sigma0_2, &self.cbar, self.sigma_d_2)?;
        Ok(MultiDelaySystem::new(self.a.clone(), vec![self.bbar.clone()], vec![c], vec![s2]))
    }
}

fn merge_channels(c0: &DMatrix<f64>, s0: f64, cd: &DMatrix<f64>, sd: f64) -> Result<(DMatrix<f64>, f64)> {
    let w0 = if s0 == 0.0 || c0.iter().all(|v| *v == 0.0) { 0.0 } else { s0 };
    let wd = if sd == 0.0 || cd.iter().all(|v| *v == 0.0) { 0.0 } else { sd };
    if wd == 0.0 {
        return Ok((c0.clone(), s0));
    }
    if w0 == 0.0 {
        return Ok((cd.clone(), sd));
    }
    if c0.len() == 1 {
        let v = s0 * c0[0] * c0[0] + sd * cd[0] * cd[0];
        return Ok((DMatrix::from_element(1, 1, 1.0), v));
    }
    // C̄ = λ C_0  =>  single channel C_0 with variance σ0² + λ² σD².
    let (idx, pivot) = c0
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, v)| (i, *v))
        .unwrap_or((0, 0.0));
    let lambda = cd[idx] / pivot;
    if (cd - c0 * lambda).norm() <= 1e-12 * cd.norm().max(1.0) {
        return Ok((c0.clone(), s0 + lambda * lambda * sd));
    }
    Err(Error::AssumptionViolated(
        "delay-free restricted system with non-collinear noise channels has no single-noise form".into(),
    ))
}

/// One route of the multi-path network: constant delay and loss probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WncsPath {
    pub delay: usize,
    pub loss_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WncsDescription {
    #[serde(rename = "A", with = "crate::serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::serde_rows")]
    pub b_plant: DMatrix<f64>,
    pub paths: Vec<WncsPath>,
}

impl WncsDescription {
    fn check(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::AssumptionViolated("network needs at least one path".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.paths {
            if !(0.0..=1.0).contains(&p.loss_prob) {
                return Err(Error::AssumptionViolated(format!("loss probability {} outside [0, 1]", p.loss_prob)));
            }
            if !seen.insert(p.delay) {
                return Err(Error::DuplicateDelay(p.delay));
            }
        }
        if self.b_plant.nrows() != self.a.nrows() {
            return Err(Error::DimensionMismatch("plant B must have as many rows as A".into()));
        }
        Ok(())
    }

    /// Loss probability per delay index `0..=D` (`None` where no path exists).
    pub fn loss_probabilities(&self) -> Result<Vec<Option<f64>>> {
        self.check()?;
        let d = self.paths.iter().map(|p| p.delay).max().unwrap_or(0);
        let mut out = vec![None; d + 1];
        for p in &self.paths {
            out[p.delay] = Some(p.loss_prob);
        }
        Ok(out)
    }
}

/// Maps delivery indicators `γ` to zero-mean noises `ω = γ - (1 - p)`.
pub fn wncs_to_model(w: &WncsDescription) -> Result<MultiDelaySystem> {
    w.check()?;
    let d = w.paths.iter().map(|p| p.delay).max().unwrap_or(0);
    let zero = DMatrix::zeros(w.b_plant.nrows(), w.b_plant.ncols());
    let mut b = vec![zero.clone(); d + 1];
    let mut c = vec![zero; d + 1];
    let mut sigma2 = vec![0.0; d + 1];
    for p in &w.paths {
        b[p.delay] = &w.b_plant * (1.0 - p.loss_prob);
        c[p.delay] = w.b_plant.clone();
        sigma2[p.delay] = p.loss_prob * (1.0 - p.loss_prob);
    }
    Ok(MultiDelaySystem::new(w.a.clone(), b, c, sigma2))
}
