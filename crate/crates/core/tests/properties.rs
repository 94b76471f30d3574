use approx::assert_abs_diff_eq;
use ensemble_control::drift::{control_cost_terms, project_box, BoxBounds, ControlPath, DriftSpec, L1Norm, A0};
use ensemble_control::forward::{solve_forward, ForwardOptions, Scheme, Source};
use ensemble_control::grid::{make_grid, sample_function, DensityPreset, TimeGrid};
use ensemble_control::reduced::{prox, shrink};
use proptest::prelude::*;

fn path(values: &[f64], nt: usize) -> ControlPath<f64> {
    let time = TimeGrid::new(1.0, nt).unwrap();
    ControlPath::from_data(&time, 1, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prox_is_feasible_and_nonexpansive(
        a in prop::collection::vec(-5.0f64..5.0, 18),
        b in prop::collection::vec(-5.0f64..5.0, 18),
        tau in 0.0f64..2.0,
        lo in -2.0f64..0.0,
        hi in 0.0f64..2.0,
    ) {
        let bounds = BoxBounds::uniform(1, lo, hi).unwrap();
        let (u, v) = (path(&a, 8), path(&b, 8));
        let (pu, pv) = (prox(&u, tau, &bounds), prox(&v, tau, &bounds));
        prop_assert!(bounds.contains(&pu));
        prop_assert!(pu.sub(&pv).norm() <= u.sub(&v).norm() + 1e-12);
        prop_assert_eq!(prox(&pu, 0.0, &bounds), pu.clone());
        prop_assert_eq!(project_box(&project_box(&u, &bounds), &bounds), project_box(&u, &bounds));
    }

    #[test]
    fn shrink_matches_its_definition(v in -10.0f64..10.0, tau in 0.0f64..3.0) {
        let s = shrink(v, tau);
        prop_assert!(s.abs() <= (v.abs() - tau).max(0.0) + 1e-15);
        prop_assert!(s == 0.0 || s.signum() == v.signum());
        prop_assert!((v - s).abs() <= tau + 1e-15);
    }

    #[test]
    fn trapezoid_product_is_symmetric_and_bilinear(
        a in prop::collection::vec(-3.0f64..3.0, 14),
        b in prop::collection::vec(-3.0f64..3.0, 14),
        s in -2.0f64..2.0,
    ) {
        let (u, v) = (path(&a, 6), path(&b, 6));
        assert_abs_diff_eq!(u.dot(&v), v.dot(&u), epsilon = 1e-12);
        assert_abs_diff_eq!(u.axpy(s, &v).dot(&v), u.dot(&v) + s * v.dot(&v), epsilon = 1e-10);
        prop_assert!(u.norm() >= 0.0);
        let c = control_cost_terms(&u, L1Norm::Componentwise);
        assert_abs_diff_eq!(c.l2sq, u.dot(&u), epsilon = 1e-10);
        // |u| is convex, so the exact integral never exceeds the nodal one.
        prop_assert!(c.l1 <= c.l1_lumped + 1e-12);
    }

    #[test]
    fn forward_balances_mass_and_keeps_sign(
        u1 in -1.0f64..1.0,
        u2 in -0.8f64..0.8,
        muscl in any::<bool>(),
    ) {
        let grid = make_grid(1, &[-8.0], &[8.0], &[96]).unwrap();
        let time = TimeGrid::new(1.0, 32).unwrap();
        let rho0 = sample_function(&grid, &DensityPreset::Gaussian { center: [0.0, 0.0], variance: 0.4 });
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&time, &[u1], &[u2]));
        let scheme = if muscl { Scheme::Muscl } else { Scheme::Upwind };
        let traj = solve_forward(&rho0, &drift, &Source::Zero, &time, &ForwardOptions::with_scheme(scheme)).unwrap();
        let mut left = 0.0;
        for d in traj.diagnostics() {
            left += d.outflow;
            prop_assert!((d.mass + left - 1.0).abs() < 1e-12);
            prop_assert!(d.min >= 0.0);
        }
    }
}
