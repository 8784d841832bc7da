mod common;

use common::*;
use delaystab::ddare::{ddare_operator, solve_ddare, synthesize_gain, DdareMap};
use delaystab::lyapunov::exact_ms_check;
use delaystab::numerics::is_positive_definite;
use delaystab::{Error, ToleranceSet};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn value_iterates_increase_from_zero(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3);
        let (n, m) = (sys.n(), sys.m());
        let q = random_spd(&mut rng, n);
        let r = random_spd(&mut rng, m);
        let tol = 1e-9;
        let mut z = DMatrix::zeros(n, n);
        for _ in 0..60 {
            let (next, _) = ddare_operator(&sys, &q, &r, &z).unwrap();
            if next.norm() > 1e10 {
                break;
            }
            let scale = next.norm().max(1.0);
            let gap = &next - &z + DMatrix::identity(n, n) * (tol * scale);
            prop_assert!(gap.symmetric_eigen().eigenvalues.min() >= 0.0);
            z = next;
        }
    }

    #[test]
    fn scalar_solution_is_quadratic_root(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (sub, d) = scalar_with_ratio(&mut rng, |x| x < 0.95);
        let (q, r) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
        let sys = sub.as_restricted(d).to_multi_delay().unwrap();
        let sol = solve_ddare(&sys, &scalar(q), &scalar(r), &ToleranceSet::default()).unwrap();
        let want = scalar_oracle(&sub, q, r, d);
        prop_assert!((sol.z[(0, 0)] - want).abs() <= 1e-10 * want, "{} vs {want}", sol.z[(0, 0)]);
    }

    #[test]
    fn converged_solution_is_certified(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3);
        let (n, m) = (sys.n(), sys.m());
        let q = random_spd(&mut rng, n);
        let r = random_spd(&mut rng, m);
        let tol = ToleranceSet::default();
        match solve_ddare(&sys, &q, &r, &tol) {
            Ok(sol) => {
                let residual = DdareMap::new(&sys, &q, &r, &tol).unwrap().residual(&sol.z).unwrap();
                prop_assert!(residual <= tol.fp_rel * sol.z.norm().max(1.0));
                prop_assert!(is_positive_definite(&sol.z, tol.pd_tol).0);
                let law = synthesize_gain(&sys, &sol).unwrap();
                prop_assert!(exact_ms_check(&sys, &law).unwrap().rho < 1.0);
            }
            Err(Error::NotStabilizable { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn noiseless_delay_free_case_is_classical(a in -3.0..3.0f64, b in 0.1..3.0f64, q in 0.1..5.0f64, r in 0.1..5.0f64) {
        prop_assume!(a.abs() > 0.05);
        let sys = delaystab::MultiDelaySystem::new(scalar(a), vec![scalar(b)], vec![scalar(1.0)], vec![0.0]);
        let sol = solve_ddare(&sys, &scalar(q), &scalar(r), &ToleranceSet::default()).unwrap();
        // b²Z² + (r − a²r − qb²)Z − qr = 0.
        let (c2, c1, c0) = (b * b, r - a * a * r - q * b * b, -q * r);
        let want = (-c1 + (c1 * c1 - 4.0 * c2 * c0).sqrt()) / (2.0 * c2);
        prop_assert!((sol.z[(0, 0)] - want).abs() <= 1e-9 * want.max(1.0));
    }
}
