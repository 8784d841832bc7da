mod common;

use common::*;
use delaystab::ddare::solve_ddare;
use delaystab::margin::{diagonal_delay_margin, scalar_stabilizable, MaxDelay};
use delaystab::{Error, ToleranceSet};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn closed_form_agrees_with_scan(seed in any::<u64>(), frac in 0.02..0.99f64) {
        let mut rng = rng(seed);
        let mut sub = random_scalar(&mut rng);
        let h = sub.bbar * sub.bbar / sub.noise_weight();
        sub.a = (1.0 + h * frac).sqrt() * sub.a.signum();
        let res = diagonal_delay_margin(&[sub]).unwrap();
        let d_real = res.d_max_real.unwrap();
        let scan = (0..).take_while(|d| scalar_stabilizable(&sub, *d)).count();
        prop_assert_eq!(res.max_stable_int_delay, MaxDelay::Finite(scan - 1));
        prop_assert!(((scan - 1) as f64) < d_real && d_real <= scan as f64 + 1e-9);
    }

    #[test]
    fn riccati_feasibility_ignores_weights(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (sub, d) = scalar_with_ratio(&mut rng, |x| !(0.9..1.1).contains(&x));
        let sys = sub.as_restricted(d).to_multi_delay().unwrap();
        let tol = ToleranceSet::default();
        let outcomes: Vec<bool> = (0..3)
            .map(|_| {
                let (q, r) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
                match solve_ddare(&sys, &scalar(q), &scalar(r), &tol) {
                    Ok(_) => true,
                    Err(Error::NotStabilizable { .. }) => false,
                    Err(e) => panic!("{e}"),
                }
            })
            .collect();
        prop_assert!(outcomes.iter().all(|o| *o == outcomes[0]));
        prop_assert_eq!(outcomes[0], scalar_stabilizable(&sub, d));
    }

    #[test]
    fn riccati_agrees_with_scalar_condition(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (sub, d) = scalar_with_ratio(&mut rng, |x| !(0.95..1.05).contains(&x));
        let sys = sub.as_restricted(d).to_multi_delay().unwrap();
        let converged = match solve_ddare(&sys, &scalar(1.0), &scalar(1.0), &ToleranceSet::default()) {
            Ok(_) => true,
            Err(Error::NotStabilizable { .. }) => false,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(converged, scalar_stabilizable(&sub, d));
    }

    #[test]
    fn stabilizable_delays_are_downward_closed(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let mut sub = random_scalar(&mut rng);
        if sub.a.abs() < 1.0 {
            sub.a = 1.0 / sub.a;
        }
        for d in 0..12 {
            if scalar_stabilizable(&sub, d + 1) {
                prop_assert!(scalar_stabilizable(&sub, d));
            }
        }
    }
}
