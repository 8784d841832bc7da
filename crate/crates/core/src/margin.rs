//! Delay margins for the restricted single-delay structure.
//!
//! For an uncoupled (diagonal) system each scalar channel
//! `[a, c; b̄, c̄]_D` is stabilizable at delay `D` iff
//!
//! ```text
//! a^{2D} (σ_0² c² + σ_D² c̄²) (a² − 1) < b̄²,
//! ```
//!
//! so the margin has a closed form. General restricted systems are scanned
//! delay by delay with the Riccati solver as the oracle.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ddare::{solve_map, DdareMap, SolveOptions};
use crate::error::{Error, Result};
use crate::model::RestrictedSystem;
use crate::numerics::ToleranceSet;

/// Default largest delay tried by [`general_delay_margin_search`].
pub const DEFAULT_D_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarSubsystem {
    pub a: f64,
    pub c: f64,
    pub bbar: f64,
    pub cbar: f64,
    pub sigma0_2: f64,
    #[serde(rename = "sigmaD_2")]
    pub sigma_d_2: f64,
}

impl ScalarSubsystem {
    /// `σ_0² c² + σ_D² c̄²`.
    pub fn noise_weight(&self) -> f64 {
        self.sigma0_2 * self.c * self.c + self.sigma_d_2 * self.cbar * self.cbar
    }

    /// `h = b̄² / (σ_0² c² + σ_D² c̄²)`.
    pub fn h(&self) -> f64 {
        self.bbar * self.bbar / self.noise_weight()
    }

    pub fn as_restricted(&self, delay: usize) -> RestrictedSystem {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        RestrictedSystem {
            a: s(self.a),
            c0: s(self.c),
            bbar: s(self.bbar),
            cbar: s(self.cbar),
            delay,
            sigma0_2: self.sigma0_2,
            sigma_d_2: self.sigma_d_2,
        }
    }
}

/// Coefficients of `c2 z² + c1 z + c0 = 0`, whose positive root is the scalar Riccati solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticCoeffs {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    /// Constant part of `Ψ`: `r + Σ_{h=1}^{D} σ_D² c̄² a^{2(D−h)} q`.
    pub psi_offset: f64,
    /// Slope of `Ψ` in `z`: `b̄² + (σ_0² c² + σ_D² c̄²) a^{2D}`.
    pub gain_weight: f64,
}

impl QuadraticCoeffs {
    /// The unique positive root when `c2 < 0`.
    pub fn positive_root(&self) -> Option<f64> {
        if !(self.c2 < 0.0) {
            return None;
        }
        let disc = self.c1 * self.c1 - 4.0 * self.c2 * self.c0;
        let t = -0.5 * (self.c1 + self.c1.signum() * disc.sqrt());
        let (r1, r2) = (t / self.c2, self.c0 / t);
        [r1, r2].into_iter().filter(|r| *r > 0.0 && r.is_finite()).reduce(f64::max)
    }
}

pub fn scalar_quadratic_coeffs(s: &ScalarSubsystem, q: f64, r: f64, delay: usize) -> QuadraticCoeffs {
    let a2 = s.a * s.a;
    let a2d = a2.powi(delay as i32);
    let gain_weight = s.bbar * s.bbar + s.noise_weight() * a2d;
    let psi_offset = r + (1..=delay)
        .map(|h| s.sigma_d_2 * s.cbar * s.cbar * a2.powi((delay - h) as i32) * q)
        .sum::<f64>();
    QuadraticCoeffs {
        c2: (a2 - 1.0) * gain_weight - a2 * s.bbar * s.bbar,
        c1: (a2 - 1.0) * psi_offset + q * gain_weight,
        c0: q * psi_offset,
        psi_offset,
        gain_weight,
    }
}

pub fn scalar_stabilizable(s: &ScalarSubsystem, delay: usize) -> bool {
    let a2 = s.a * s.a;
    a2.powi(delay as i32) * s.noise_weight() * (a2 - 1.0) < s.bbar * s.bbar
}

/// Largest stabilizable integer delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxDelay {
    /// Not stabilizable even without delay.
    None,
    Finite(usize),
    Unbounded,
}

impl Serialize for MaxDelay {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaxDelay::None => s.serialize_str("none"),
            MaxDelay::Unbounded => s.serialize_str("inf"),
            MaxDelay::Finite(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for MaxDelay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(MaxDelay::Finite(v as usize)),
            Repr::Text(t) if t == "none" => Ok(MaxDelay::None),
            Repr::Text(t) if t == "inf" => Ok(MaxDelay::Unbounded),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected delay {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMethod {
    ClosedForm,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayMarginResult {
    /// Closed-form margin; absent for the search.
    #[serde(with = "crate::serde_rows::extended_option")]
    pub d_max_real: Option<f64>,
    pub max_stable_int_delay: MaxDelay,
    pub binding_index: Option<usize>,
    pub per_delay_table: Option<Vec<(usize, bool)>>,
    pub method: MarginMethod,
}

/// Closed-form margin for uncoupled scalar channels.
pub fn diagonal_delay_margin(subs: &[ScalarSubsystem]) -> Result<DelayMarginResult> {
    let mut d_max = f64::INFINITY;
    let mut binding = None;
    for (i, s) in subs.iter().enumerate() {
        let vals = [s.a, s.c, s.bbar, s.cbar, s.sigma0_2, s.sigma_d_2];
        if vals.iter().any(|v| !v.is_finite()) || s.sigma0_2 < 0.0 || s.sigma_d_2 < 0.0 {
            return Err(Error::AssumptionViolated(format!("subsystem {i} has invalid parameters")));
        }
        let a2 = s.a * s.a;
        if a2 < 1.0 {
            continue;
        }
        if s.bbar == 0.0 {
            return Err(Error::AssumptionViolated(format!("unstable subsystem {i} has zero delayed input gain")));
        }
        let w = s.noise_weight();
        if a2 == 1.0 || w == 0.0 {
            continue;
        }
        let di = ((s.bbar * s.bbar).ln() - w.ln() - (a2 - 1.0).ln()) / a2.ln();
        if di < d_max {
            d_max = di;
            binding = Some(i);
        }
    }
    let all_ok = |d: usize| subs.iter().all(|s| scalar_stabilizable(s, d));

    let max_int = if d_max.is_infinite() {
        MaxDelay::Unbounded
    } else {
        // The strict inequality decides; the formula only seeds the search.
        let mut k = if d_max > 0.0 { (d_max.ceil() as i64 - 1).max(0) as usize } else { 0 };
        while k > 0 && !all_ok(k) {
            k -= 1;
        }
        while all_ok(k + 1) {
            k += 1;
        }
        if all_ok(k) {
            MaxDelay::Finite(k)
        } else {
            MaxDelay::None
        }
    };
    let table_len = match max_int {
        MaxDelay::Finite(k) => k + 2,
        _ => 16,
    };
    let table = (0..=table_len).map(|d| (d, all_ok(d))).collect();
    Ok(DelayMarginResult {
        d_max_real: Some(d_max.max(0.0)),
        max_stable_int_delay: max_int,
        binding_index: binding,
        per_delay_table: Some(table),
        method: MarginMethod::ClosedForm,
    })
}

/// Splits a diagonal restricted system into its scalar channels.
pub fn diagonal_subsystems(r: &RestrictedSystem) -> Result<Vec<ScalarSubsystem>> {
    if !r.is_diagonal() {
        return Err(Error::AssumptionViolated("restricted system is not diagonal".into()));
    }
    Ok((0..r.a.nrows())
        .map(|i| ScalarSubsystem {
            a: r.a[(i, i)],
            c: r.c0[(i, i)],
            bbar: r.bbar[(i, i)],
            cbar: r.cbar[(i, i)],
            sigma0_2: r.sigma0_2,
            sigma_d_2: r.sigma_d_2,
        })
        .collect())
}

/// Largest delay `≤ d_cap` for which the Riccati equation is solvable.
pub fn general_delay_margin_search(
    r: &RestrictedSystem,
    q: &DMatrix<f64>,
    rr: &DMatrix<f64>,
    d_cap: usize,
    tol: &ToleranceSet,
) -> Result<DelayMarginResult> {
    let table: Vec<(usize, bool)> = (0..=d_cap)
        .into_par_iter()
        .map(|d| {
            let map = DdareMap::for_restricted(&r.with_delay(d), q, rr, tol)?;
            match solve_map(&map, tol, &SolveOptions::default()) {
                Ok(_) => Ok((d, true)),
                Err(Error::NotStabilizable { .. }) => Ok((d, false)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let first_fail = table.iter().position(|(_, ok)| !ok);
    let max_int = match first_fail {
        None => MaxDelay::Finite(d_cap),
        Some(0) => MaxDelay::None,
        Some(f) => MaxDelay::Finite(f - 1),
    };
    let anomaly = first_fail.is_some_and(|f| table[f..].iter().any(|(_, ok)| *ok));
    let result = DelayMarginResult {
        d_max_real: None,
        max_stable_int_delay: max_int,
        binding_index: None,
        per_delay_table: Some(table),
        method: MarginMethod::Search,
    };
    if anomaly {
        return Err(Error::MonotonicityAnomaly(Box::new(result)));
    }
    if first_fail.is_none() {
        return Err(Error::CapReached(Box::new(result)));
    }
    Ok(result)
}
