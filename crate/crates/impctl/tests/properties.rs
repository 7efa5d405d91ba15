//! Property-based invariants across modules.

use proptest::prelude::*;

use impctl::cli::config::{Overrides, RunConfig};
use impctl::cli::presets::preset;
use impctl::maxprin::{perturb_control, Direction, Perturbation};
use impctl::model::{cone_contains, cone_grid, Impulse, ImpulseControl};
use impctl::qvi::{simultaneous_z, SolveGrid};
use impctl::simulate::estimate_cost;

fn two_impulses(t1: f64, gap: f64, s1: f64, s2: f64) -> ImpulseControl {
    ImpulseControl {
        start_time: 0.0,
        impulses: vec![
            Impulse {
                time: t1,
                size: vec![s1],
            },
            Impulse {
                time: t1 + gap,
                size: vec![s2],
            },
        ],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbed_controls_stay_ordered_and_in_the_cone(
        t1 in 0.05f64..0.45,
        gap in 0.1f64..0.4,
        s1 in 0.1f64..3.0,
        s2 in 0.1f64..3.0,
        eps in 0.0f64..0.99,
        eps_bar in 0.0f64..0.3,
        eta in 0.0f64..5.0,
        index in 1usize..=2,
        forward in any::<bool>(),
    ) {
        let spec = preset("linear-adjoint").unwrap().spec;
        let control = two_impulses(t1, gap, s1, s2);
        let p = Perturbation {
            index,
            size_weight: eps,
            time_shift: eps_bar,
            direction: if forward { Direction::Forward } else { Direction::Backward },
            target: eta,
        };
        if let Ok(out) = perturb_control(&spec, &control, &p) {
            prop_assert_eq!(out.count(), 2);
            prop_assert!(out.impulses[0].time < out.impulses[1].time);
            prop_assert!(out.impulses[0].time >= control.start_time);
            prop_assert!(out.impulses[1].time <= spec.horizon);
            for imp in &out.impulses {
                prop_assert!(cone_contains(&spec.cone, &imp.size).unwrap());
            }
            let other = 2 - index;
            prop_assert_eq!(&out.impulses[other], &control.impulses[other]);
            let moved = &out.impulses[index - 1];
            let orig = &control.impulses[index - 1];
            prop_assert!((moved.size[0] - ((1.0 - eps) * orig.size[0] + eps * eta)).abs() < 1e-12);
            prop_assert!((moved.time - (orig.time + p.sign() * eps_bar)).abs() < 1e-12);
        }
    }

    #[test]
    fn cone_grid_points_lie_in_the_cone(per_ray in 2usize..30) {
        let spec = preset("impulse-active").unwrap().spec;
        for v in cone_grid(&spec.cone, per_ray).unwrap() {
            prop_assert!(cone_contains(&spec.cone, &v).unwrap());
        }
    }

    #[test]
    fn cubic_interpolation_reproduces_cubics(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        c in -2.0f64..2.0,
        d in -1.0f64..1.0,
        u in 0.0f64..1.0,
    ) {
        let spec = preset("heat-kernel").unwrap().spec;
        let grid = SolveGrid::new(&spec, -1.0, 1.0, 21, 5);
        let f = |x: f64| a + b * x + c * x * x + d * x * x * x;
        let v: Vec<f64> = grid.xs().iter().map(|x| f(*x)).collect();
        let x = -0.9 + 1.8 * u;
        let approx = grid.interp_cubic(&v, x);
        if (-0.9..0.9).contains(&x) {
            // Catmull-Rom is exact for quadratics and O(dx^4) for cubics.
            let tol = 1e-12 + d.abs() * grid.dx().powi(3);
            prop_assert!((approx - f(x)).abs() <= tol, "{} vs {}", approx, f(x));
        }
    }

    #[test]
    fn overrides_replace_config_fields(
        seed in any::<u64>(),
        paths in 100usize..100_000,
        steps in 10usize..1000,
    ) {
        let mut cfg = RunConfig::from_toml("[simulation]\npaths = 5\n").unwrap();
        cfg.apply(&Overrides {
            preset: Some("loan".into()),
            seed: Some(seed),
            paths: Some(paths),
            steps: Some(steps),
        });
        prop_assert_eq!(cfg.simulation.seed, seed);
        prop_assert_eq!(cfg.simulation.paths, paths);
        prop_assert_eq!(cfg.simulation.steps, steps);
        prop_assert_eq!(cfg.preset.as_deref(), Some("loan"));
        prop_assert!(cfg.resolve().is_ok());
    }

    #[test]
    fn simultaneous_band_widens_with_the_point_count(n in 1usize..500) {
        prop_assert!(simultaneous_z(n + 1) > simultaneous_z(n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn cost_estimates_are_seed_deterministic(seed in any::<u64>()) {
        let p = preset("loan").unwrap();
        let control = p.control.clone().unwrap();
        let a = estimate_cost(&p.spec, &control, &p.x0, 200, 40, seed).unwrap();
        let b = estimate_cost(&p.spec, &control, &p.x0, 200, 40, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn single_estimate_band_is_the_usual_quantile() {
    assert!((simultaneous_z(1) - 1.959_963_984_540_054).abs() < 1e-9);
}
