//! Delay-dependent algebraic Riccati equation.
//!
//! ```text
//! Z = AᵀZA + Q − AᵀZL Ψ⁻¹ LᵀZA
//! Ψ = LᵀZL + Σ_τ σ_τ² C_τᵀ(Aᵀ)^D Z A^D C_τ + U
//! U = R + Σ_{τ=1}^{D} Σ_{h=1}^{τ} σ_τ² C_τᵀ(Aᵀ)^{D−h} Q A^{D−h} C_τ
//! ```
//!
//! The system is mean-square stabilizable exactly when this equation has a
//! positive definite solution. The solver iterates the map from `Z = 0`
//! (a monotone nondecreasing sequence) and periodically tries to finish
//! with policy iteration once the current iterate induces a stabilizing
//! gain, which keeps near-boundary instances from stalling at the cap.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StopReason};
use crate::model::{MultiDelaySystem, RestrictedSystem};
use crate::numerics::{is_positive_definite, solve_adjoint_moment_equation, symmetrize, PowerTable, ToleranceSet};
use crate::reduction::FeedbackLaw;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdareSolution {
    #[serde(rename = "Z", with = "crate::serde_rows")]
    pub z: DMatrix<f64>,
    #[serde(rename = "Psi", with = "crate::serde_rows")]
    pub psi: DMatrix<f64>,
    #[serde(rename = "U_RQ", with = "crate::serde_rows")]
    pub u_rq: DMatrix<f64>,
    #[serde(rename = "L", with = "crate::serde_rows")]
    pub l: DMatrix<f64>,
    /// Riccati map applications, including the policy-iteration steps.
    pub iterations: usize,
    /// Policy-evaluation solves used to finish the iteration.
    pub newton_steps: usize,
    /// `‖op(Z) − Z‖_F` at the returned `Z`.
    pub final_residual: f64,
    /// Frobenius norms of the value iterates, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
    /// Whether the value iterates were ordered as expected; only checked with a trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monotone: Option<bool>,
}

/// Where the value iteration starts.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum StartPoint {
    #[default]
    Zero,
    /// A matrix with `Z0 ≽ op(Z0)`; iterates then decrease.
    Dominating(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub start: StartPoint,
    pub trace: bool,
    /// Value iterations between attempts to finish with policy iteration; `None` disables them.
    pub probe_interval: Option<usize>,
    pub max_policy_steps: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { start: StartPoint::Zero, trace: false, probe_interval: Some(100), max_policy_steps: 100 }
    }
}

/// The Riccati map with everything that does not depend on `Z` precomputed.
#[derive(Debug, Clone)]
pub struct DdareMap {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    l: DMatrix<f64>,
    /// `(σ_τ², A^D C_τ)` for channels with nonzero variance.
    noise: Vec<(f64, DMatrix<f64>)>,
    u_rq: DMatrix<f64>,
}

impl DdareMap {
    pub fn new(sys: &MultiDelaySystem, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: &ToleranceSet) -> Result<Self> {
        sys.check_shapes()?;
        let (n, m, d) = (sys.n(), sys.m(), sys.delay());
        if q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!("Q must be {n}x{n} and R {m}x{m}")));
        }
        if !is_positive_definite(q, tol.pd_tol).0 {
            return Err(Error::AssumptionViolated("Q is not positive definite".into()));
        }
        if !is_positive_definite(r, tol.pd_tol).0 {
            return Err(Error::AssumptionViolated("R is not positive definite".into()));
        }
        let pw = PowerTable::new(&sys.a, 0, d as i64, tol.inv_tol)?;
        let ad = pw.get(d as i64);
        let l = sys
            .b
            .iter()
            .enumerate()
            .fold(DMatrix::zeros(n, m), |acc, (j, b)| acc + pw.get((d - j) as i64) * b);
        let noise = sys.noise_channels().map(|(_, s2, c)| (s2, ad * c)).collect();
        let mut u_rq = r.clone();
        for (tau, s2, c) in sys.noise_channels() {
            for h in 1..=tau {
                let ac = pw.get((d - h) as i64) * c;
                u_rq += ac.transpose() * q * &ac * s2;
            }
        }
        Ok(Self { a: sys.a.clone(), q: q.clone(), l, noise, u_rq: symmetrize(&u_rq) })
    }

    /// Map of a restricted system. Without delay both noises act on `u_t`
    /// and stay separate channels, which the single-noise-per-delay model
    /// cannot express when `C̄` is not a multiple of `C_0`.
    pub fn for_restricted(
        r: &RestrictedSystem,
        q: &DMatrix<f64>,
        rr: &DMatrix<f64>,
        tol: &ToleranceSet,
    ) -> Result<Self> {
        if r.delay > 0 {
            let sys = r.to_multi_delay()?;
            sys.ensure_valid(tol)?;
            return Self::new(&sys, q, rr, tol);
        }
        let mut sys = MultiDelaySystem::new(r.a.clone(), vec![r.bbar.clone()], vec![r.c0.clone()], vec![r.sigma0_2]);
        sys.ensure_valid(tol)?;
        if r.sigma_d_2 < 0.0 {
            return Err(Error::AssumptionViolated("negative variance sigmaD_2".into()));
        }
        sys.sigma2[0] = 0.0;
        let mut map = Self::new(&sys, q, rr, tol)?;
        map.noise = [(r.sigma0_2, &r.c0), (r.sigma_d_2, &r.cbar)]
            .into_iter()
            .filter(|(s2, _)| *s2 != 0.0)
            .map(|(s2, c)| (s2, c.clone()))
            .collect();
        Ok(map)
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn u_rq(&self) -> &DMatrix<f64> {
        &self.u_rq
    }

    /// Noise terms `(σ_τ², A^D C_τ)` of the delay-free loop.
    pub fn noise_terms(&self) -> &[(f64, DMatrix<f64>)] {
        &self.noise
    }

    pub fn psi(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut psi = self.l.transpose() * z * &self.l + &self.u_rq;
        for (s2, ac) in &self.noise {
            psi += ac.transpose() * z * ac * *s2;
        }
        symmetrize(&psi)
    }

    /// Returns `(op(Z), Ψ(Z))`.
    pub fn apply(&self, z: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let psi = self.psi(z);
        let g = self.l.transpose() * z * &self.a;
        let sol = solve_spd(&psi, &g)?;
        let next = self.a.transpose() * z * &self.a + &self.q - g.transpose() * sol;
        Ok((symmetrize(&next), psi))
    }

    /// `−Ψ⁻¹ LᵀZA`, the minimizing gain of the delay-free loop.
    pub fn beta_gain(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let psi = self.psi(z);
        Ok(-solve_spd(&psi, &(self.l.transpose() * z * &self.a))?)
    }

    /// Cost matrix of a fixed gain `K` in the delay-free loop; `Unstable` if `K` does not stabilize it.
    pub fn evaluate_gain(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let f = &self.a + &self.l * k;
        let terms: Vec<_> = self.noise.iter().map(|(s2, ac)| (*s2, ac * k)).collect();
        let rhs = &self.q + k.transpose() * &self.u_rq * k;
        solve_adjoint_moment_equation(&f, &terms, &rhs)
    }

    pub fn residual(&self, z: &DMatrix<f64>) -> Result<f64> {
        Ok((self.apply(z)?.0 - z).norm())
    }
}

fn solve_spd(psi: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = psi.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    psi.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::SingularMatrix("Psi".into()))
}

/// One application of the Riccati map: `(Z_next, Ψ)`.
pub fn ddare_operator(
    sys: &MultiDelaySystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    DdareMap::new(sys, q, r, &ToleranceSet::default())?.apply(z)
}

pub fn solve_ddare(sys: &MultiDelaySystem, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: &ToleranceSet) -> Result<DdareSolution> {
    solve_ddare_with(sys, q, r, tol, &SolveOptions::default())
}

pub fn solve_ddare_with(
    sys: &MultiDelaySystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: &ToleranceSet,
    opts: &SolveOptions,
) -> Result<DdareSolution> {
    sys.ensure_valid(tol)?;
    solve_map(&DdareMap::new(sys, q, r, tol)?, tol, opts)
}

/// Runs the solver on a prepared map.
pub fn solve_map(map: &DdareMap, tol: &ToleranceSet, opts: &SolveOptions) -> Result<DdareSolution> {
    let n = map.a.nrows();
    let (mut z, increasing) = match &opts.start {
        StartPoint::Zero => (DMatrix::zeros(n, n), true),
        StartPoint::Dominating(z0) => {
            if z0.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!("start matrix must be {n}x{n}")));
            }
            let z0 = symmetrize(z0);
            let gap = &z0 - map.apply(&z0)?.0;
            if !psd_within(&gap, &z0, tol.pd_tol) {
                return Err(Error::AssumptionViolated("start matrix does not dominate its image".into()));
            }
            (z0, false)
        }
    };

    let mut trace = opts.trace.then(Vec::new);
    let mut monotone = true;
    let mut iterations = 0;
    let mut newton_steps = 0;
    let mut finished_by_policy = false;
    loop {
        if iterations >= tol.max_iter {
            return Err(not_stabilizable(StopReason::IterationCap, iterations, z));
        }
        let (next, _) = map.apply(&z)?;
        iterations += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite Riccati iterate at step {iterations}")));
        }
        let norm = next.norm();
        if norm > tol.div_norm {
            return Err(not_stabilizable(StopReason::Diverged, iterations, next));
        }
        if let Some(t) = trace.as_mut() {
            t.push(norm);
            let step = if increasing { &next - &z } else { &z - &next };
            monotone &= psd_within(&step, &next, tol.pd_tol);
        }
        let diff = (&next - &z).norm();
        z = next;
        if diff <= tol.fp_rel * norm.max(1.0) {
            break;
        }
        if let Some(every) = opts.probe_interval.filter(|k| *k > 0) {
            if iterations % every == 0 {
                if let Some((zp, steps)) = policy_finish(map, &z, tol, opts.max_policy_steps) {
                    newton_steps += steps;
                    z = zp;
                    finished_by_policy = true;
                    break;
                }
            }
        }
    }

    // Polish a value-iteration fixed point; keep whichever has the smaller residual.
    if !finished_by_policy {
        if let Some((zp, steps)) = policy_finish(map, &z, tol, opts.max_policy_steps) {
            if map.residual(&zp)? < map.residual(&z)? {
                newton_steps += steps;
                z = zp;
            }
        }
    }

    let (pd, min_eig) = is_positive_definite(&z, tol.pd_tol);
    if !pd {
        return Err(Error::NumericalFailure(format!("Riccati fixed point is not positive definite (min eigenvalue {min_eig:e})")));
    }
    let psi = map.psi(&z);
    let final_residual = map.residual(&z)?;
    Ok(DdareSolution {
        l: map.l().clone(),
        u_rq: map.u_rq().clone(),
        psi,
        z,
        iterations: iterations + newton_steps,
        newton_steps,
        final_residual,
        trace,
        monotone: opts.trace.then_some(monotone),
    })
}

fn not_stabilizable(reason: StopReason, iterations: usize, z: DMatrix<f64>) -> Error {
    Error::NotStabilizable { reason, iterations, last_norm: z.norm(), last_iterate: Box::new(z) }
}

/// `X ≽ 0` up to `pd_tol` relative to the scale of `reference`.
fn psd_within(x: &DMatrix<f64>, reference: &DMatrix<f64>, pd_tol: f64) -> bool {
    let scale = reference.norm().max(1.0);
    let shifted = symmetrize(x) + DMatrix::identity(x.nrows(), x.ncols()) * (pd_tol * scale);
    crate::numerics::symmetric_eigenvalues(&shifted).iter().all(|l| *l >= 0.0)
}

/// Policy iteration from the gain induced by `z`. Returns the converged
/// cost matrix only if every gain along the way stabilizes the loop and the
/// result is a fixed point of the Riccati map to `fp_rel`.
fn policy_finish(map: &DdareMap, z: &DMatrix<f64>, tol: &ToleranceSet, max_steps: usize) -> Option<(DMatrix<f64>, usize)> {
    let mut k = map.beta_gain(z).ok()?;
    let mut prev: Option<DMatrix<f64>> = None;
    for step in 1..=max_steps {
        let zk = map.evaluate_gain(&k).ok()?;
        if zk.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let done = prev
            .as_ref()
            .is_some_and(|p| (p - &zk).norm() <= tol.fp_rel * zk.norm().max(1.0) * 1e-2);
        k = map.beta_gain(&zk).ok()?;
        if done {
            let res = map.residual(&zk).ok()?;
            return (res <= tol.fp_rel * zk.norm().max(1.0)).then_some((zk, step));
        }
        prev = Some(zk);
    }
    let zk = prev?;
    let res = map.residual(&zk).ok()?;
    (res <= tol.fp_rel * zk.norm().max(1.0)).then_some((zk, max_steps))
}

/// Delayed-law gains induced by any symmetric `Z`:
/// `K_0 = −Ψ⁻¹LᵀZA^{D+1}`, `K_τ = −Ψ⁻¹LᵀZA^D Σ_{j=τ}^{D} A^{τ−j} B_j`.
pub fn gain_from_iterate(
    sys: &MultiDelaySystem,
    z: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    l: &DMatrix<f64>,
    tol: &ToleranceSet,
) -> Result<FeedbackLaw> {
    sys.check_shapes()?;
    let d = sys.delay() as i64;
    let pw = PowerTable::new(&sys.a, -d, d + 1, tol.inv_tol)?;
    let base = -solve_spd(psi, &(l.transpose() * z * pw.get(d)))?;
    let mut gains = vec![&base * &sys.a];
    for tau in 1..=sys.delay() {
        let s = (tau..=sys.delay()).fold(DMatrix::zeros(sys.n(), sys.m()), |acc, j| {
            acc + pw.get(tau as i64 - j as i64) * &sys.b[j]
        });
        gains.push(&base * s);
    }
    Ok(FeedbackLaw { gains })
}

/// The stabilizing law built from a converged solution.
pub fn synthesize_gain(sys: &MultiDelaySystem, sol: &DdareSolution) -> Result<FeedbackLaw> {
    gain_from_iterate(sys, &sol.z, &sol.psi, &sol.l, &ToleranceSet::default())
}

/// The law induced by an arbitrary iterate, e.g. the last one of a failed solve.
pub fn law_from_iterate(sys: &MultiDelaySystem, q: &DMatrix<f64>, r: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<FeedbackLaw> {
    let tol = ToleranceSet::default();
    let map = DdareMap::new(sys, q, r, &tol)?;
    gain_from_iterate(sys, z, &map.psi(z), map.l(), &tol)
}

/// The same equation written for `P = (Aᵀ)^D Z A^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFormSolution {
    #[serde(rename = "P", with = "crate::serde_rows")]
    pub p: DMatrix<f64>,
    #[serde(rename = "Lambda", with = "crate::serde_rows")]
    pub lambda: DMatrix<f64>,
    #[serde(rename = "H", with = "crate::serde_rows")]
    pub h: DMatrix<f64>,
    #[serde(rename = "W_RQ", with = "crate::serde_rows")]
    pub w_rq: DMatrix<f64>,
    #[serde(rename = "Qhat", with = "crate::serde_rows")]
    pub qhat: DMatrix<f64>,
    /// `‖−P + AᵀPA + Q̂ − AᵀPHΛ⁻¹HᵀPA‖_F`.
    pub residual: f64,
    /// `‖Λ − Ψ‖_F / ‖Ψ‖_F`.
    pub lambda_psi_gap: f64,
}

pub fn p_form_check(
    sys: &MultiDelaySystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    sol: &DdareSolution,
    tol: &ToleranceSet,
) -> Result<PFormSolution> {
    sys.check_shapes()?;
    let (n, m, d) = (sys.n(), sys.m(), sys.delay() as i64);
    let pw = PowerTable::new(&sys.a, -d, d, tol.inv_tol)?;
    let ad = pw.get(d);
    let p = symmetrize(&(ad.transpose() * &sol.z * ad));
    let qhat = symmetrize(&(ad.transpose() * q * ad));
    let h = sys
        .b
        .iter()
        .enumerate()
        .fold(DMatrix::zeros(n, m), |acc, (j, b)| acc + pw.get(-(j as i64)) * b);
    let mut w = r.clone();
    for (tau, s2, c) in sys.noise_channels() {
        for hh in 1..=tau {
            let ac = pw.get(-(hh as i64)) * c;
            w += ac.transpose() * &qhat * &ac * s2;
        }
    }
    let w = symmetrize(&w);
    let mut lambda = h.transpose() * &p * &h + &w;
    for (_, s2, c) in sys.noise_channels() {
        lambda += c.transpose() * &p * c * s2;
    }
    let lambda = symmetrize(&lambda);
    let g = h.transpose() * &p * &sys.a;
    let res = -&p + sys.a.transpose() * &p * &sys.a + &qhat - g.transpose() * solve_spd(&lambda, &g)?;
    let residual = res.norm();
    let lambda_psi_gap = (&lambda - &sol.psi).norm() / sol.psi.norm().max(f64::MIN_POSITIVE);
    if residual > 10.0 * tol.fp_rel * p.norm() {
        return Err(Error::ConsistencyFailure { what: "P-form Riccati residual".into(), residual });
    }
    if lambda_psi_gap > 1e-8 {
        return Err(Error::ConsistencyFailure { what: "Lambda differs from Psi".into(), residual: lambda_psi_gap });
    }
    Ok(PFormSolution { p, lambda, h, w_rq: w, qhat, residual, lambda_psi_gap })
}

/// Coupled-Riccati blocks rebuilt from `P`, with relative residuals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CareReconstruction {
    /// `P_1..P_{D+1}`.
    #[serde(rename = "P_blocks", with = "crate::serde_rows::list")]
    pub blocks: Vec<DMatrix<f64>>,
    #[serde(rename = "Upsilon", with = "crate::serde_rows")]
    pub upsilon: DMatrix<f64>,
    /// `‖Σ P_i − P‖ / ‖P‖`.
    pub sum_residual: f64,
    /// First coupled equation, `P_1 = AᵀP_1A + AᵀP_{D+1}A + Q̂`; for `D = 0` the plain Riccati identity.
    pub first_equation_residual: f64,
    /// `‖P_2 + MᵀΥ⁻¹M‖ / ‖P‖`, zero for `D = 0`.
    pub second_block_residual: f64,
    /// `max_i ‖P_i − AᵀP_{i−1}A‖ / ‖P‖` over `i ≥ 3`.
    pub shift_residual: f64,
    /// `‖Υ − Λ‖ / ‖Λ‖`.
    pub upsilon_residual: f64,
}

pub fn care_reconstruct(
    sys: &MultiDelaySystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    sol: &DdareSolution,
    tol: &ToleranceSet,
) -> Result<CareReconstruction> {
    let pf = p_form_check(sys, q, r, sol, tol)?;
    let d = sys.delay();
    let di = d as i64;
    let pw = PowerTable::new(&sys.a, -di, di, tol.inv_tol)?;
    let a = &sys.a;
    let (p, qhat) = (&pf.p, &pf.qhat);
    let pnorm = p.norm();

    let mut p1 = pw.get(di).transpose() * p * pw.get(di);
    for i in 0..di {
        p1 += pw.get(i).transpose() * qhat * pw.get(i);
    }
    let core = p - a.transpose() * p * a - qhat;
    let mut blocks = vec![symmetrize(&p1)];
    for i in 2..=(d + 1) {
        let ai = pw.get(i as i64 - 2);
        blocks.push(symmetrize(&(ai.transpose() * &core * ai)));
    }
    let total = blocks.iter().fold(DMatrix::zeros(sys.n(), sys.n()), |acc, b| acc + b);
    let sum_residual = (&total - p).norm() / pnorm;

    let mut upsilon = r.clone();
    for b in &blocks {
        upsilon += pf.h.transpose() * b * &pf.h;
    }
    for (j, s2, c) in sys.noise_channels() {
        let hj = pw.get(-(j as i64)) * c;
        upsilon += hj.transpose() * &blocks[0] * &hj * s2;
        for (i, b) in blocks.iter().enumerate().skip(1) {
            // block index i here is P_{i+1}, which carries noises j ≤ i−1.
            if j < i {
                upsilon += hj.transpose() * b * &hj * s2;
            }
        }
    }
    let upsilon = symmetrize(&upsilon);
    let upsilon_residual = (&upsilon - &pf.lambda).norm() / pf.lambda.norm();

    let mm = pf.h.transpose() * p * a;
    let riccati_term = mm.transpose() * solve_spd(&upsilon, &mm)?;
    let first_equation_residual = if d == 0 {
        (p - a.transpose() * p * a - qhat + &riccati_term).norm() / pnorm
    } else {
        let rhs = a.transpose() * &blocks[0] * a + a.transpose() * &blocks[d] * a + qhat;
        (&blocks[0] - rhs).norm() / pnorm
    };
    let second_block_residual = if d == 0 { 0.0 } else { (&blocks[1] + &riccati_term).norm() / pnorm };
    let shift_residual = (2..blocks.len())
        .map(|i| (&blocks[i] - a.transpose() * &blocks[i - 1] * a).norm() / pnorm)
        .fold(0.0, f64::max);

    let out = CareReconstruction {
        blocks,
        upsilon,
        sum_residual,
        first_equation_residual,
        second_block_residual,
        shift_residual,
        upsilon_residual,
    };
    for (what, v, limit) in [
        ("sum of coupled blocks", out.sum_residual, 1e-8),
        ("first coupled equation", out.first_equation_residual, 1e-7),
        ("second coupled block", out.second_block_residual, 1e-7),
        ("block shift relation", out.shift_residual, 1e-7),
        ("Upsilon differs from Lambda", out.upsilon_residual, 1e-7),
    ] {
        if !(v <= limit) {
            return Err(Error::ConsistencyFailure { what: what.into(), residual: v });
        }
    }
    Ok(out)
}
