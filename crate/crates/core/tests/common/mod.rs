#![allow(dead_code)]

use std::path::PathBuf;

use delaystab::margin::ScalarSubsystem;
use delaystab::numerics::singular_value_ratio;
use delaystab::MultiDelaySystem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Well-conditioned random square matrix with spectral scale around `scale`.
pub fn invertible(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    loop {
        let a = gauss(rng, n, n) * (scale / (n as f64).sqrt());
        if singular_value_ratio(&a) > 0.05 {
            return a;
        }
    }
}

/// Random multi-delay system with `n, m ≤ 3` and `D ≤ max_delay`.
pub fn random_system(rng: &mut ChaCha8Rng, max_delay: usize) -> MultiDelaySystem {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let d = rng.random_range(0..=max_delay);
    let scale = rng.random_range(0.6..1.8);
    let a = invertible(rng, n, scale);
    let mut b: Vec<DMatrix<f64>> = (0..=d)
        .map(|_| if rng.random_bool(0.7) { gauss(rng, n, m) } else { DMatrix::zeros(n, m) })
        .collect();
    if b.iter().all(|x| x.iter().all(|v| *v == 0.0)) {
        b[d] = gauss(rng, n, m);
    }
    let c = (0..=d).map(|_| gauss(rng, n, m)).collect();
    let sigma2 = (0..=d)
        .map(|_| if rng.random_bool(0.7) { rng.random_range(0.0..0.6) } else { 0.0 })
        .collect();
    MultiDelaySystem::new(a, b, c, sigma2)
}

/// `a^{2D} (σ_0²c² + σ_D²c̄²)(a² − 1) / b̄²`; below one means stabilizable.
pub fn stabilizability_ratio(s: &ScalarSubsystem, d: usize) -> f64 {
    let a2 = s.a * s.a;
    a2.powi(d as i32) * s.noise_weight() * (a2 - 1.0) / (s.bbar * s.bbar)
}

pub fn random_scalar(rng: &mut ChaCha8Rng) -> ScalarSubsystem {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    ScalarSubsystem {
        a: sign * rng.random_range(0.3..2.0),
        c: rng.random_range(-2.0..2.0),
        bbar: sign * rng.random_range(0.2..3.0),
        cbar: rng.random_range(-2.0..2.0),
        sigma0_2: rng.random_range(0.0..1.0),
        sigma_d_2: rng.random_range(0.0..1.0),
    }
}

/// Random scalar restricted system and delay whose ratio satisfies `accept`.
pub fn scalar_with_ratio(rng: &mut ChaCha8Rng, accept: impl Fn(f64) -> bool) -> (ScalarSubsystem, usize) {
    loop {
        let s = random_scalar(rng);
        let d = rng.random_range(0..=4);
        if accept(stabilizability_ratio(&s, d)) {
            return (s, d);
        }
    }
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Positive root of the scalar Riccati equation, written out directly:
/// `Z = a²Z + q − a²b̄²Z² / (αZ + U)` with `α = b̄² + a^{2D}(σ_0²c² + σ_D²c̄²)`.
pub fn scalar_oracle(sub: &ScalarSubsystem, q: f64, r: f64, d: usize) -> f64 {
    let a2 = sub.a * sub.a;
    let alpha = sub.bbar * sub.bbar + a2.powi(d as i32) * (sub.sigma0_2 * sub.c * sub.c + sub.sigma_d_2 * sub.cbar * sub.cbar);
    let mut u = r;
    for h in 1..=d {
        u += sub.sigma_d_2 * sub.cbar * sub.cbar * a2.powi((d - h) as i32) * q;
    }
    let qa = (1.0 - a2) * alpha + a2 * sub.bbar * sub.bbar;
    let qb = (1.0 - a2) * u - q * alpha;
    let qc = -q * u;
    let disc = qb * qb - 4.0 * qa * qc;
    // qa > 0 and qc < 0 give exactly one positive root.
    (-qb + disc.sqrt()) / (2.0 * qa)
}

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Random symmetric positive definite matrix.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let w = gauss(rng, n, n);
    &w * w.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Property config without regression files.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases: n, failure_persistence: None, ..Default::default() }
}
