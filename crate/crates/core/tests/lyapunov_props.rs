mod common;

use common::*;
use delaystab::ddare::{law_from_iterate, solve_ddare, synthesize_gain};
use delaystab::lyapunov::{
    assemble_lmi, certificate_from_ddare, ddle_residual, ddli_margin, exact_ms_check, solve_ddle, verify_certificate,
};
use delaystab::numerics::{second_moment_operator_matrix, spectral_radius};
use delaystab::{Error, ToleranceSet};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn lmi_matches_lyapunov_inequality(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3);
        let (n, m) = (sys.n(), sys.m());
        let k = gauss(&mut rng, m, n) * rng.random_range(0.0..1.0);
        let p = match solve_ddle(&sys, &k, &random_spd(&mut rng, n)) {
            Ok(p) if rng.random_bool(0.5) => p,
            _ => random_spd(&mut rng, n),
        };
        let margin = ddli_margin(&sys, &k, &p).unwrap();
        prop_assume!(margin.abs() > 1e-9 * p.norm());
        let s = -p.clone().try_inverse().unwrap();
        let lmi = assemble_lmi(&sys, &s, &(&k * &s)).unwrap();
        let lmi_max = lmi.symmetric_eigen().eigenvalues.max();
        prop_assert_eq!(margin > 0.0, lmi_max < 0.0, "margin {} lmi {}", margin, lmi_max);
    }

    #[test]
    fn riccati_convergence_agrees_with_moment_test(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3);
        let (n, m) = (sys.n(), sys.m());
        let (q, r) = (DMatrix::identity(n, n), DMatrix::identity(m, m));
        let (converged, law) = match solve_ddare(&sys, &q, &r, &ToleranceSet::default()) {
            Ok(sol) => (true, synthesize_gain(&sys, &sol).unwrap()),
            Err(Error::NotStabilizable { last_iterate, .. }) => (false, law_from_iterate(&sys, &q, &r, &last_iterate).unwrap()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let rho = exact_ms_check(&sys, &law).unwrap().rho;
        prop_assume!(!(0.999..=1.001).contains(&rho));
        prop_assert_eq!(converged, rho < 1.0, "rho {}", rho);
    }

    #[test]
    fn ddle_solution_has_small_residual(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3);
        let (n, m) = (sys.n(), sys.m());
        let k = gauss(&mut rng, m, n) * rng.random_range(0.0..0.8);
        let q = random_spd(&mut rng, n);
        match solve_ddle(&sys, &k, &q) {
            Ok(p) => {
                let res = ddle_residual(&sys, &k, &p, &q).unwrap();
                prop_assert!(res.norm() <= 1e-9 * p.norm());
            }
            Err(Error::Unstable { rho }) => prop_assert!(rho >= 1.0 - 1e-6),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn riccati_certificate_verifies(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let sys = random_system(&mut rng, 3);
        let (n, m) = (sys.n(), sys.m());
        let q = random_spd(&mut rng, n);
        let r = random_spd(&mut rng, m);
        let tol = ToleranceSet::default();
        if let Ok(sol) = solve_ddare(&sys, &q, &r, &tol) {
            let cert = certificate_from_ddare(&sys, &q, &r, &sol, &tol).unwrap();
            let rep = verify_certificate(&sys, &cert, &tol);
            prop_assert!(rep.valid, "{:?}", rep.reasons);
        }
    }
}

#[test]
fn radius_of_delay_free_loop_matches_kronecker_form() {
    // Scalar: ρ = (a + bk)² + σ²c²k².
    let sys = delaystab::MultiDelaySystem::new(scalar(1.2), vec![scalar(1.0)], vec![scalar(1.0)], vec![0.25]);
    let k = -0.5;
    let f = scalar(1.2 + k);
    let t = second_moment_operator_matrix(&f, &[(0.25, scalar(k))]).unwrap();
    let want = 0.7f64.powi(2) + 0.25 * 0.25;
    assert!((spectral_radius(&t) - want).abs() < 1e-14);
    let law = delaystab::FeedbackLaw { gains: vec![scalar(k)] };
    assert!((exact_ms_check(&sys, &law).unwrap().rho - want).abs() < 1e-14);
}
