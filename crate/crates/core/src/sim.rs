//! Seeded Monte Carlo simulation of the delayed closed loop.
//!
//! Each trial draws its noises from its own ChaCha stream (master seed plus
//! the trial index as stream id), so results do not depend on how trials
//! are scheduled across threads.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{MultiDelaySystem, NoiseModel, ProblemSpec};
use crate::reduction::FeedbackLaw;

/// Zero-mean draw with variance `sigma2`. For `bernoulli_loss` the loss
/// probability is `p` if given, else the smaller root of `p(1 − p) = σ²`.
pub fn sample_noise<R: Rng + ?Sized>(model: NoiseModel, sigma2: f64, p: Option<f64>, rng: &mut R) -> Result<f64> {
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidVariance(sigma2));
    }
    match model {
        NoiseModel::Gaussian => {
            if sigma2 == 0.0 {
                return Ok(0.0);
            }
            let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::NumericalFailure(e.to_string()))?;
            Ok(normal.sample(rng))
        }
        NoiseModel::TwoPoint => {
            if sigma2 == 0.0 {
                return Ok(0.0);
            }
            let s = sigma2.sqrt();
            Ok(if rng.random::<bool>() { s } else { -s })
        }
        NoiseModel::BernoulliLoss => {
            let p = match p {
                Some(p) if (0.0..=1.0).contains(&p) => p,
                Some(p) => return Err(Error::AssumptionViolated(format!("loss probability {p} outside [0, 1]"))),
                None if sigma2 > 0.25 => return Err(Error::InvalidVariance(sigma2)),
                None => 0.5 * (1.0 - (1.0 - 4.0 * sigma2).max(0.0).sqrt()),
            };
            if p == 0.0 || p == 1.0 {
                return Ok(0.0);
            }
            let received = rng.random_bool(1.0 - p);
            Ok(if received { p } else { p - 1.0 })
        }
    }
}

/// Realized noises `values[τ][t]` for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub values: Vec<Vec<f64>>,
    pub model: NoiseModel,
    pub seed: u64,
    pub stream: u64,
}

impl NoisePath {
    pub fn generate(
        sys: &MultiDelaySystem,
        model: NoiseModel,
        loss_probs: &[Option<f64>],
        horizon: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let d = sys.delay();
        let mut values = vec![Vec::with_capacity(horizon); d + 1];
        for _ in 0..horizon {
            for (tau, row) in values.iter_mut().enumerate() {
                let p = loss_probs.get(tau).copied().flatten();
                row.push(sample_noise(model, sys.sigma2[tau], p, &mut rng)?);
            }
        }
        Ok(Self { values, model, seed, stream })
    }

    pub fn horizon(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `ω_t^0, …, ω_t^D`.
    pub fn at(&self, t: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[t]).collect()
    }
}

/// `x_{t+1} = A x_t + Σ_τ (B_τ + ω_t^τ C_τ) u_{t−τ}`; `u_window` is `u_t, …, u_{t−D}`.
pub fn step(sys: &MultiDelaySystem, x: &DVector<f64>, u_window: &[DVector<f64>], omega: &[f64]) -> Result<DVector<f64>> {
    let d = sys.delay();
    if u_window.len() != d + 1 || omega.len() != d + 1 {
        return Err(Error::DimensionMismatch(format!("input window and noise must have length D+1 = {}", d + 1)));
    }
    if x.len() != sys.n() || u_window.iter().any(|u| u.len() != sys.m()) {
        return Err(Error::DimensionMismatch("state or input has the wrong length".into()));
    }
    let mut next = &sys.a * x;
    for tau in 0..=d {
        next += &sys.b[tau] * &u_window[tau];
        if omega[tau] != 0.0 {
            next += (&sys.c[tau] * &u_window[tau]) * omega[tau];
        }
    }
    Ok(next)
}

/// State and input trajectory of one trial: `x_0..x_T` and `u_0..u_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPath {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

/// Runs one trial along a given noise path. `u_init` is `u_{−1}, …, u_{−D}`.
pub fn simulate_path(
    sys: &MultiDelaySystem,
    law: &FeedbackLaw,
    x0: &DVector<f64>,
    u_init: &[DVector<f64>],
    noise: &NoisePath,
) -> Result<TrialPath> {
    let d = sys.delay();
    if u_init.len() != d {
        return Err(Error::HistoryLengthMismatch { expected: d, got: u_init.len() });
    }
    let horizon = noise.horizon();
    let mut hist: Vec<DVector<f64>> = u_init.to_vec();
    let mut xs = Vec::with_capacity(horizon + 1);
    let mut us = Vec::with_capacity(horizon + 1);
    let mut x = x0.clone();
    for t in 0..horizon {
        let u = law.apply(&x, &hist)?;
        let mut window = Vec::with_capacity(d + 1);
        window.push(u.clone());
        window.extend(hist.iter().cloned());
        let next = step(sys, &x, &window, &noise.at(t))?;
        xs.push(x);
        us.push(u.clone());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { trial: noise.stream as usize, step: t + 1 });
        }
        x = next;
        if d > 0 {
            hist.pop();
            hist.insert(0, u);
        }
    }
    us.push(law.apply(&x, &hist)?);
    xs.push(x);
    Ok(TrialPath { x: xs, u: us })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOptions {
    /// Keep per-trial state trajectories in the result.
    pub keep_trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationResult {
    pub trials: usize,
    pub horizon: usize,
    /// `m_t = mean ‖x_t‖²` over completed trials, `t = 0..=T`.
    pub ms: Vec<f64>,
    /// Same for `‖u_t‖²`.
    pub input_ms: Vec<f64>,
    pub seed: u64,
    pub noise_model: NoiseModel,
    pub law: FeedbackLaw,
    /// Trials aborted on a non-finite state, with the offending step.
    pub aborted: Vec<(usize, usize)>,
    #[serde(skip)]
    pub trajectories: Option<Vec<Vec<DVector<f64>>>>,
}

pub fn simulate_closed_loop(spec: &ProblemSpec, law: &FeedbackLaw) -> Result<SimulationResult> {
    simulate_closed_loop_with(spec, law, &SimOptions::default())
}

pub fn simulate_closed_loop_with(spec: &ProblemSpec, law: &FeedbackLaw, opts: &SimOptions) -> Result<SimulationResult> {
    let sys = &spec.system;
    sys.check_shapes()?;
    law.check(sys)?;
    if spec.x0.len() != sys.n() {
        return Err(Error::DimensionMismatch(format!("x0 must have length {}", sys.n())));
    }
    if spec.trials == 0 || spec.horizon == 0 {
        return Err(Error::DegenerateInput("trials and horizon must be positive".into()));
    }
    let outcomes: Vec<Result<TrialPath>> = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let noise = NoisePath::generate(sys, spec.noise_model, &spec.loss_probs, spec.horizon, spec.seed, i as u64)?;
            simulate_path(sys, law, &spec.x0, &spec.u_init, &noise)
        })
        .collect();

    let mut aborted = Vec::new();
    let mut paths = Vec::with_capacity(spec.trials);
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(p) => paths.push(p),
            Err(Error::NonFiniteState { step, .. }) => aborted.push((i, step)),
            Err(e) => return Err(e),
        }
    }
    let len = spec.horizon + 1;
    let (ms, input_ms) = if paths.is_empty() {
        (vec![f64::NAN; len], vec![f64::NAN; len])
    } else {
        let count = paths.len() as f64;
        let column = |f: &dyn Fn(&TrialPath, usize) -> f64, t: usize| {
            let vals: Vec<f64> = paths.iter().map(|p| f(p, t)).collect();
            pairwise_sum(&vals) / count
        };
        let xs = |p: &TrialPath, t: usize| p.x[t].norm_squared();
        let us = |p: &TrialPath, t: usize| p.u[t].norm_squared();
        ((0..len).map(|t| column(&xs, t)).collect(), (0..len).map(|t| column(&us, t)).collect())
    };
    let trajectories = opts.keep_trajectories.then(|| paths.into_iter().map(|p| p.x).collect());
    Ok(SimulationResult {
        trials: spec.trials,
        horizon: spec.horizon,
        ms,
        input_ms,
        seed: spec.seed,
        noise_model: spec.noise_model,
        law: law.clone(),
        aborted,
        trajectories,
    })
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (l, r) = v.split_at(v.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Decaying,
    NotDecaying,
    /// The sequence is identically zero.
    Decayed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub verdict: Verdict,
    /// `exp` of the least-squares slope of `ln m_t` over the tail window.
    pub fitted_rate: Option<f64>,
    pub tail_max: f64,
    pub overall_max: f64,
}

/// Decaying iff the maximum over the last `window` entries is at most `ratio` times the overall maximum.
pub fn check_ms_decay(ms: &[f64], window: usize, ratio: f64) -> Result<DecayReport> {
    if window == 0 || window >= ms.len() {
        return Err(Error::DegenerateInput(format!("window {window} must be in [1, {})", ms.len())));
    }
    let tail = &ms[ms.len() - window..];
    let finite = ms.iter().all(|v| v.is_finite());
    let overall_max = ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail_max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if finite && ms.iter().all(|v| *v == 0.0) {
        return Ok(DecayReport { verdict: Verdict::Decayed, fitted_rate: None, tail_max, overall_max });
    }
    let verdict = if finite && tail_max <= ratio * overall_max { Verdict::Decaying } else { Verdict::NotDecaying };

    let start = ms.len() - window;
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(i, v)| ((start + i) as f64, v.ln()))
        .collect();
    let fitted_rate = (pts.len() >= 2).then(|| {
        let k = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        (sxy / sxx).exp()
    });
    Ok(DecayReport { verdict, fitted_rate, tail_max, overall_max })
}

/// Writes `t,ms,input_ms`.
pub fn write_ms_csv<W: Write>(res: &SimulationResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "ms", "input_ms"]).map_err(csv_err)?;
    for (t, (m, u)) in res.ms.iter().zip(&res.input_ms).enumerate() {
        w.write_record([t.to_string(), m.to_string(), u.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trial,t,x_1..x_n` for every kept trajectory.
pub fn write_trajectories_csv<W: Write>(trajectories: &[Vec<DVector<f64>>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = trajectories.first().and_then(|t| t.first()).map_or(0, |x| x.len());
    let mut header = vec!["trial".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (trial, path) in trajectories.iter().enumerate() {
        for (t, x) in path.iter().enumerate() {
            let mut row = vec![trial.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn degenerate_variance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for model in [NoiseModel::Gaussian, NoiseModel::TwoPoint, NoiseModel::BernoulliLoss] {
            assert_eq!(sample_noise(model, 0.0, None, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_point_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = sample_noise(NoiseModel::TwoPoint, 4.0, None, &mut rng).unwrap();
            assert!(w == 2.0 || w == -2.0);
        }
    }

    #[test]
    fn bernoulli_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_noise(NoiseModel::BernoulliLoss, 0.21, Some(0.3), &mut rng).unwrap())
            .collect();
        assert!(draws.iter().all(|w| *w == 0.3 || (*w + 0.7).abs() < 1e-15));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n as f64;
        let se_mean = (0.21 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean);
        // Fourth central moment of the two-point law bounds the variance estimator spread.
        let m4 = 0.7 * 0.3f64.powi(4) + 0.3 * 0.7f64.powi(4);
        let se_var = ((m4 - 0.21 * 0.21) / n as f64).sqrt();
        assert!((var - 0.21).abs() < 3.0 * se_var);
    }

    #[test]
    fn bernoulli_needs_feasible_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_noise(NoiseModel::BernoulliLoss, 0.3, None, &mut rng), Err(Error::InvalidVariance(_))));
    }

    #[test]
    fn step_example() {
        let sys = MultiDelaySystem::new(s(2.0), vec![s(1.0), s(3.0)], vec![s(1.0), s(1.0)], vec![1.0, 1.0]);
        let next = step(&sys, &v(1.0), &[v(0.5), v(-1.0)], &[0.2, -0.5]).unwrap();
        assert!((next[0] - 0.1).abs() < 1e-14);
        assert_eq!(step(&sys, &v(1.0), &[v(0.0), v(0.0)], &[0.2, -0.5]).unwrap()[0], 2.0);
    }

    #[test]
    fn open_loop_stable_decay_is_exact() {
        let sys = MultiDelaySystem::new(s(0.5), vec![s(1.0)], vec![s(1.0)], vec![1.0]);
        let mut spec = ProblemSpec::for_system(sys.clone());
        spec.trials = 16;
        spec.horizon = 20;
        let res = simulate_closed_loop(&spec, &FeedbackLaw::zero(&sys)).unwrap();
        for (t, m) in res.ms.iter().enumerate() {
            assert_eq!(*m, 0.25f64.powi(t as i32));
        }
    }

    #[test]
    fn reproducible_across_runs() {
        let sys = MultiDelaySystem::new(s(1.1), vec![s(0.2), s(0.5)], vec![s(1.0), s(1.0)], vec![0.3, 0.2]);
        let mut spec = ProblemSpec::for_system(sys);
        spec.trials = 64;
        spec.horizon = 30;
        spec.seed = 99;
        let law = FeedbackLaw { gains: vec![s(-0.8), s(-0.1)] };
        let a = simulate_closed_loop(&spec, &law).unwrap();
        let b = simulate_closed_loop(&spec, &law).unwrap();
        assert_eq!(a.ms, b.ms);
        assert_eq!(a.ms.len(), 31);
    }

    #[test]
    fn decay_verdicts() {
        let geo: Vec<f64> = (0..60).map(|t| 4f64.powi(-t)).collect();
        let rep = check_ms_decay(&geo, 10, 0.05).unwrap();
        assert_eq!(rep.verdict, Verdict::Decaying);
        assert!((rep.fitted_rate.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(check_ms_decay(&[1.0; 40], 10, 0.05).unwrap().verdict, Verdict::NotDecaying);
        assert_eq!(check_ms_decay(&[0.0; 40], 10, 0.05).unwrap().verdict, Verdict::Decayed);
        assert!(check_ms_decay(&[1.0; 5], 5, 0.05).is_err());
    }

    #[test]
    fn csv_header() {
        let sys = MultiDelaySystem::new(s(0.5), vec![s(1.0)], vec![s(1.0)], vec![1.0]);
        let mut spec = ProblemSpec::for_system(sys.clone());
        spec.trials = 2;
        spec.horizon = 3;
        let res = simulate_closed_loop_with(&spec, &FeedbackLaw::zero(&sys), &SimOptions { keep_trajectories: true }).unwrap();
        let mut buf = Vec::new();
        write_ms_csv(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,ms,input_ms\n0,1,0\n"));
        let mut buf = Vec::new();
        write_trajectories_csv(res.trajectories.as_ref().unwrap(), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("trial,t,x_1\n0,0,1\n"));
    }
}
