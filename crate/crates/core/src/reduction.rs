//! Delay-free reformulation of the multi-delay loop.
//!
//! The auxiliary state
//!
//! ```text
//! η_t = x_t + Σ_{τ=1}^{D} Σ_{j=τ}^{D} A^{τ-j-1} (B_j + ω^j_{t+j-τ} C_j) u_{t-τ}
//! ```
//!
//! obeys `η_{t+1} = A η_t + Σ_j A^{-j} (B_j + ω^j_{t+j} C_j) u_t`, and its
//! conditional mean given the information at `t-1` is computable from `x_t`
//! and the last `D` inputs. Feedback on that predictor is realized as an
//! ordinary delayed state/input feedback law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultiDelaySystem;
use crate::numerics::{PowerTable, ToleranceSet};

/// `u_t = K_0 x_t + Σ_{τ=1}^{D} K_τ u_{t-τ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLaw {
    /// `K_0` (m×n) followed by `K_1..K_D` (m×m).
    #[serde(rename = "K", with = "crate::serde_rows::list")]
    pub gains: Vec<DMatrix<f64>>,
}

impl FeedbackLaw {
    pub fn zero(sys: &MultiDelaySystem) -> Self {
        let (n, m, d) = (sys.n(), sys.m(), sys.delay());
        let mut gains = vec![DMatrix::zeros(m, n)];
        gains.extend((0..d).map(|_| DMatrix::zeros(m, m)));
        Self { gains }
    }

    pub fn delay(&self) -> usize {
        self.gains.len().saturating_sub(1)
    }

    pub fn check(&self, sys: &MultiDelaySystem) -> Result<()> {
        let (n, m, d) = (sys.n(), sys.m(), sys.delay());
        if self.gains.len() != d + 1 {
            return Err(Error::DimensionMismatch(format!("law has {} gains, system needs D+1 = {}", self.gains.len(), d + 1)));
        }
        for (tau, k) in self.gains.iter().enumerate() {
            let want = if tau == 0 { (m, n) } else { (m, m) };
            if k.shape() != want {
                return Err(Error::DimensionMismatch(format!("K_{tau} is {:?}, expected {want:?}", k.shape())));
            }
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure(format!("K_{tau} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Evaluates the law; `u_hist` is `u_{t-1}, …, u_{t-D}`.
    pub fn apply(&self, x: &DVector<f64>, u_hist: &[DVector<f64>]) -> Result<DVector<f64>> {
        if u_hist.len() != self.delay() {
            return Err(Error::HistoryLengthMismatch { expected: self.delay(), got: u_hist.len() });
        }
        let mut u = &self.gains[0] * x;
        for (k, past) in self.gains[1..].iter().zip(u_hist) {
            u += k * past;
        }
        Ok(u)
    }
}

/// Feedback on the predicted auxiliary state: `u_t = L_0 η̂_{t|t-1} + Σ L_τ u_{t-τ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxGain {
    #[serde(rename = "L0", with = "crate::serde_rows")]
    pub l0: DMatrix<f64>,
    /// `L_1..L_D`.
    #[serde(rename = "Ltau", with = "crate::serde_rows::list")]
    pub ltau: Vec<DMatrix<f64>>,
}

impl AuxGain {
    /// Pure predictor feedback (`L_τ = 0`).
    pub fn predictor_only(l0: DMatrix<f64>, delay: usize) -> Self {
        let m = l0.nrows();
        Self { l0, ltau: vec![DMatrix::zeros(m, m); delay] }
    }
}

/// Realized noises addressed by delay index `j` and absolute time `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    start: i64,
    /// `values[j][s - start]`.
    values: Vec<Vec<f64>>,
}

impl NoiseRecord {
    pub fn new(start: i64, values: Vec<Vec<f64>>) -> Self {
        Self { start, values }
    }

    /// Record for indices `0..=delay` and times `start..start+len`.
    pub fn from_fn(delay: usize, start: i64, len: usize, mut f: impl FnMut(usize, i64) -> f64) -> Self {
        let values = (0..=delay)
            .map(|j| (0..len).map(|k| f(j, start + k as i64)).collect())
            .collect();
        Self { start, values }
    }

    pub fn get(&self, index: usize, time: i64) -> Result<f64> {
        let k = time - self.start;
        self.values
            .get(index)
            .and_then(|row| if k >= 0 { row.get(k as usize) } else { None })
            .copied()
            .ok_or(Error::MissingNoise { index, time })
    }

    /// `ω^j_{t+j}` for `j = 0..=D`: the noises multiplying `u_t`.
    pub fn aligned(&self, t: i64, delay: usize) -> Result<Vec<f64>> {
        (0..=delay).map(|j| self.get(j, t + j as i64)).collect()
    }
}

/// Per-system precomputation for the reduction: powers `A^k`, `k ∈ [-D, D+1]`.
#[derive(Debug, Clone)]
pub struct Reduction<'a> {
    sys: &'a MultiDelaySystem,
    powers: PowerTable,
}

impl<'a> Reduction<'a> {
    pub fn new(sys: &'a MultiDelaySystem, tol: &ToleranceSet) -> Result<Self> {
        sys.check_shapes()?;
        let d = sys.delay() as i64;
        let powers = PowerTable::new(&sys.a, -d, d + 1, tol.inv_tol)?;
        Ok(Self { sys, powers })
    }

    pub fn system(&self) -> &MultiDelaySystem {
        self.sys
    }

    pub fn pow(&self, k: i64) -> &DMatrix<f64> {
        self.powers.get(k)
    }

    /// `L = Σ_{j=0}^{D} A^{D-j} B_j`.
    pub fn input_matrix_l(&self) -> DMatrix<f64> {
        let d = self.sys.delay() as i64;
        self.sys
            .b
            .iter()
            .enumerate()
            .fold(DMatrix::zeros(self.sys.n(), self.sys.m()), |acc, (j, b)| acc + self.pow(d - j as i64) * b)
    }

    /// `H = Σ_{j=0}^{D} A^{-j} B_j`.
    pub fn input_matrix_h(&self) -> DMatrix<f64> {
        self.sys
            .b
            .iter()
            .enumerate()
            .fold(DMatrix::zeros(self.sys.n(), self.sys.m()), |acc, (j, b)| acc + self.pow(-(j as i64)) * b)
    }

    /// `G_τ = Σ_{j=τ}^{D} A^{τ-j-1} B_j` for `τ = 1..=D`: predictor weights on past inputs.
    pub fn predictor_weights(&self) -> Vec<DMatrix<f64>> {
        let d = self.sys.delay();
        (1..=d)
            .map(|tau| {
                (tau..=d).fold(DMatrix::zeros(self.sys.n(), self.sys.m()), |acc, j| {
                    acc + self.pow(tau as i64 - j as i64 - 1) * &self.sys.b[j]
                })
            })
            .collect()
    }

    fn check_history(&self, x: &DVector<f64>, u_hist: &[DVector<f64>]) -> Result<()> {
        if u_hist.len() != self.sys.delay() {
            return Err(Error::HistoryLengthMismatch { expected: self.sys.delay(), got: u_hist.len() });
        }
        if x.len() != self.sys.n() || u_hist.iter().any(|u| u.len() != self.sys.m()) {
            return Err(Error::DimensionMismatch("state or input history has the wrong length".into()));
        }
        Ok(())
    }

    /// `η̂_{t|t-1} = x_t + Σ_τ G_τ u_{t-τ}`; `u_hist` is `u_{t-1}, …, u_{t-D}`.
    pub fn predictor(&self, x: &DVector<f64>, u_hist: &[DVector<f64>]) -> Result<DVector<f64>> {
        self.check_history(x, u_hist)?;
        Ok(self
            .predictor_weights()
            .iter()
            .zip(u_hist)
            .fold(x.clone(), |acc, (g, u)| acc + g * u))
    }

    /// The auxiliary state at time `t`, using the realized noises it depends on.
    pub fn eta_definition(
        &self,
        x: &DVector<f64>,
        u_hist: &[DVector<f64>],
        noise: &NoiseRecord,
        t: i64,
    ) -> Result<DVector<f64>> {
        self.check_history(x, u_hist)?;
        let d = self.sys.delay();
        let mut eta = x.clone();
        for tau in 1..=d {
            let u = &u_hist[tau - 1];
            for j in tau..=d {
                let w = noise.get(j, t + j as i64 - tau as i64)?;
                let channel = &self.sys.b[j] + &self.sys.c[j] * w;
                eta += self.pow(tau as i64 - j as i64 - 1) * (channel * u);
            }
        }
        Ok(eta)
    }

    /// One step of the delay-free recursion; `noise[j] = ω^j_{t+j}`.
    pub fn eta_recursion_step(&self, eta: &DVector<f64>, u: &DVector<f64>, noise: &[f64]) -> Result<DVector<f64>> {
        let d = self.sys.delay();
        if eta.len() != self.sys.n() || u.len() != self.sys.m() || noise.len() != d + 1 {
            return Err(Error::DimensionMismatch("eta, input or noise vector has the wrong length".into()));
        }
        let mut next = &self.sys.a * eta;
        for j in 0..=d {
            let channel = &self.sys.b[j] + &self.sys.c[j] * noise[j];
            next += self.pow(-(j as i64)) * (channel * u);
        }
        Ok(next)
    }

    /// `K_0 = L_0`, `K_τ = Σ_{j=τ}^{D} L_0 A^{τ-j-1} B_j + L_τ`.
    pub fn realize_controller(&self, g: &AuxGain) -> Result<FeedbackLaw> {
        let (n, m, d) = (self.sys.n(), self.sys.m(), self.sys.delay());
        if g.l0.shape() != (m, n) || g.ltau.len() != d || g.ltau.iter().any(|l| l.shape() != (m, m)) {
            return Err(Error::DimensionMismatch(format!(
                "auxiliary gain must be L0 {m}x{n} plus {d} blocks {m}x{m}"
            )));
        }
        let mut gains = vec![g.l0.clone()];
        for (w, l) in self.predictor_weights().iter().zip(&g.ltau) {
            gains.push(&g.l0 * w + l);
        }
        Ok(FeedbackLaw { gains })
    }
}

pub fn input_matrix_l(sys: &MultiDelaySystem) -> Result<DMatrix<f64>> {
    let d = sys.delay() as i64;
    sys.check_shapes()?;
    let powers = PowerTable::new(&sys.a, 0, d, f64::MIN_POSITIVE)?;
    Ok(sys
        .b
        .iter()
        .enumerate()
        .fold(DMatrix::zeros(sys.n(), sys.m()), |acc, (j, b)| acc + powers.get(d - j as i64) * b))
}

pub fn input_matrix_h(sys: &MultiDelaySystem) -> Result<DMatrix<f64>> {
    Ok(Reduction::new(sys, &ToleranceSet::default())?.input_matrix_h())
}

pub fn predictor(sys: &MultiDelaySystem, x: &DVector<f64>, u_hist: &[DVector<f64>]) -> Result<DVector<f64>> {
    Reduction::new(sys, &ToleranceSet::default())?.predictor(x, u_hist)
}

pub fn eta_definition(
    sys: &MultiDelaySystem,
    x: &DVector<f64>,
    u_hist: &[DVector<f64>],
    noise: &NoiseRecord,
    t: i64,
) -> Result<DVector<f64>> {
    Reduction::new(sys, &ToleranceSet::default())?.eta_definition(x, u_hist, noise, t)
}

pub fn eta_recursion_step(sys: &MultiDelaySystem, eta: &DVector<f64>, u: &DVector<f64>, noise: &[f64]) -> Result<DVector<f64>> {
    Reduction::new(sys, &ToleranceSet::default())?.eta_recursion_step(eta, u, noise)
}

pub fn realize_controller(sys: &MultiDelaySystem, g: &AuxGain) -> Result<FeedbackLaw> {
    Reduction::new(sys, &ToleranceSet::default())?.realize_controller(g)
}
