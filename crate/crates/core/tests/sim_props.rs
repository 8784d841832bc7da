mod common;

use common::*;
use delaystab::lyapunov::exact_ms_check;
use delaystab::model::NoiseModel;
use delaystab::sim::{check_ms_decay, simulate_closed_loop};
use delaystab::{FeedbackLaw, MultiDelaySystem, ProblemSpec};
use nalgebra::DVector;

fn stochastic_scalar() -> MultiDelaySystem {
    MultiDelaySystem::new(scalar(1.2), vec![scalar(1.0)], vec![scalar(1.0)], vec![0.25])
}

fn spec(trials: usize, horizon: usize, seed: u64, model: NoiseModel) -> ProblemSpec {
    let mut s = ProblemSpec::for_system(stochastic_scalar());
    s.trials = trials;
    s.horizon = horizon;
    s.seed = seed;
    s.noise_model = model;
    s
}

/// `(1.2 + k)² + 0.25 k² = 0.9` at this `k`.
fn law_rho_09() -> FeedbackLaw {
    let k = (-2.4 + (2.4f64 * 2.4 - 4.0 * 1.25 * 0.54).sqrt()) / 2.5;
    FeedbackLaw { gains: vec![scalar(k)] }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut rng = rng(5);
    let sys = random_system(&mut rng, 2);
    let mut s = ProblemSpec::for_system(sys.clone());
    s.trials = 300;
    s.horizon = 40;
    s.seed = 17;
    s.x0 = DVector::from_element(sys.n(), 1.0);
    let law = FeedbackLaw::zero(&sys);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_closed_loop(&s, &law).unwrap())
    };
    let one = run(1);
    let many = run(4);
    assert_eq!(one.ms.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), many.ms.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(one.input_ms, many.input_ms);
    assert_eq!(run(3).ms, one.ms);
}

#[test]
fn fitted_rate_tracks_moment_radius() {
    let law = law_rho_09();
    let rho = exact_ms_check(&stochastic_scalar(), &law).unwrap().rho;
    assert!((rho - 0.9).abs() < 1e-12);
    let res = simulate_closed_loop(&spec(10_000, 60, 3, NoiseModel::Gaussian), &law).unwrap();
    let rate = check_ms_decay(&res.ms, 30, 0.05).unwrap().fitted_rate.unwrap();
    assert!((0.85..=0.95).contains(&rate), "fitted {rate}");
    assert!((rate - rho).abs() <= 0.1 * rho);
}

#[test]
fn unstable_law_grows() {
    // ρ = 1.2² = 1.44 under zero feedback.
    let law = FeedbackLaw { gains: vec![scalar(0.0)] };
    assert!(exact_ms_check(&stochastic_scalar(), &law).unwrap().rho > 1.05);
    let res = simulate_closed_loop(&spec(500, 50, 4, NoiseModel::Gaussian), &law).unwrap();
    assert!(res.ms[50] > res.ms[0] * 100.0);
    assert!(res.ms.windows(2).all(|w| w[1] > w[0]));
}

fn batch_rates(model: NoiseModel) -> (f64, f64) {
    let law = law_rho_09();
    let rates: Vec<f64> = (0..10)
        .map(|b| {
            let res = simulate_closed_loop(&spec(1000, 60, 100 + b, model), &law).unwrap();
            check_ms_decay(&res.ms, 30, 0.05).unwrap().fitted_rate.unwrap()
        })
        .collect();
    let k = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / k;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[test]
fn verdict_depends_only_on_variance() {
    let (g, g_se) = batch_rates(NoiseModel::Gaussian);
    let (t, t_se) = batch_rates(NoiseModel::TwoPoint);
    let combined = (g_se * g_se + t_se * t_se).sqrt();
    assert!((g - t).abs() < 3.0 * combined, "gaussian {g} ± {g_se}, two-point {t} ± {t_se}");
}
