mod common;

use common::{enumerate_qp, grid_min, random_qp, rel_diff, rng};
use conlq::qp::{kkt_residuals, scale_solution, scale_value, solve_qp, QpOptions, QpProblem};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn solve(p: &QpProblem) -> conlq::qp::QpSolution {
    solve_qp(p, &QpOptions::default(), None).unwrap()
}

proptest! {
    #![proptest_config(common::cases(200))]

    #[test]
    fn matches_active_set_enumeration(seed in any::<u64>()) {
        let p = random_qp(&mut rng(seed));
        let sol = solve(&p);
        let (k_ref, v_ref) = enumerate_qp(&p);
        prop_assert!(rel_diff(sol.value, v_ref) < 1e-9, "value {} vs {}", sol.value, v_ref);
        prop_assert!((&sol.k_star - &k_ref).amax() < 1e-7);
        let kkt = kkt_residuals(&p, &sol.k_star, &sol.multipliers);
        prop_assert!(kkt.max() <= 1e-9, "{kkt:?}");
    }

    #[test]
    fn no_grid_point_beats_the_solution(seed in any::<u64>()) {
        let p = random_qp(&mut rng(seed));
        let sol = solve(&p);
        // A coarse global pass, then a fine pass around the minimizer.
        if let Some(v) = grid_min(&p, &sol.k_star, 1.0, 0.05) {
            prop_assert!(v >= sol.value - 1e-9);
        }
        let fine = grid_min(&p, &sol.k_star, 0.01, 1e-3).unwrap_or(f64::INFINITY);
        prop_assert!(fine >= sol.value - 1e-9);
        if p.region.rows() == 0 {
            prop_assert!(fine - sol.value < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(common::cases(100))]

    #[test]
    fn scaled_problem_is_solved_by_the_unit_solutions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_qp(&mut r);
        let alpha: f64 = r.random_range(-10.0..10.0);
        let unit_hat = solve(&p);
        let unit_bar = solve(&QpProblem::new(p.omega.clone(), -&p.w, p.region.clone()).unwrap());
        let direct = solve(&QpProblem::new(p.omega.clone(), &p.w * alpha, p.region.scaled(alpha.abs())).unwrap());

        let built = scale_solution(&unit_hat.k_star, &unit_bar.k_star, alpha);
        prop_assert!((&direct.k_star - &built).amax() < 1e-8);
        let v = scale_value(unit_hat.value, unit_bar.value, alpha);
        prop_assert!(rel_diff(direct.value, v) < 1e-8, "{} vs {}", direct.value, v);
    }

    #[test]
    fn scaled_multipliers_certify_the_scaled_problem(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_qp(&mut r);
        let alpha: f64 = r.random_range(0.0..10.0);
        let unit = solve(&p);
        let scaled = QpProblem::new(p.omega.clone(), &p.w * alpha, p.region.scaled(alpha)).unwrap();
        let k = &unit.k_star * alpha;
        let beta: DVector<f64> = &unit.multipliers * alpha;
        let kkt = kkt_residuals(&scaled, &k, &beta);
        prop_assert!(kkt.max() <= 1e-9 * alpha.max(1.0).powi(2), "{kkt:?}");
    }
}

#[test]
fn zero_scale_gives_zero() {
    let p = random_qp(&mut rng(7));
    let sol = solve(&p);
    assert_eq!(scale_value(sol.value, sol.value, 0.0), 0.0);
    assert!(scale_solution(&sol.k_star, &sol.k_star, 0.0).iter().all(|&x| x == 0.0));
}
