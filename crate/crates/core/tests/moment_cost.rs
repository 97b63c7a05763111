use nalgebra::DMatrix;
use proptest::prelude::*;
use rotorflow::cost::{
    build_scenario_weights, cost_gradients, moment_output, moment_output_from_full, stage_cost, terminal_cost,
    terminal_gradients, MomentTarget,
};
use rotorflow::gpc::{build_basis, project_gaussian_initial, GpcState};
use rotorflow::stokes::ControlMode;

const DT: f64 = 0.01;

fn target() -> MomentTarget {
    MomentTarget::new([-1.0, -1.0], [0.0, 0.0])
}

fn scenario_start(n_rotors: usize) -> GpcState {
    let sd = 0.025f64.sqrt();
    let rotors = vec![0.3; 2 * n_rotors];
    project_gaussian_initial(&[1.0, 1.0], &[sd, sd], &rotors, &build_basis(2, 3)).unwrap()
}

/// Squared distance of `[1, 1, 0.025, 0.025]` from `[-1, -1, 0, 0]`.
const START_ERROR: f64 = 4.0 + 4.0 + 0.025 * 0.025 * 2.0;

#[test]
fn start_costs_follow_from_the_weight_presets() {
    let basis = build_basis(2, 3);
    for (mode, terminal) in [(ControlMode::Velocity, 1000.0), (ControlMode::TorqueOnly, 500.0)] {
        let w = build_scenario_weights(mode, 4, DT, 1.0 / 3.0);
        let x = scenario_start(4);
        let zero = vec![0.0; mode.control_dim(4)];
        let l = stage_cost(&x, &zero, &basis, &w, &target());
        assert!((l - DT * 0.1 * START_ERROR).abs() < 1e-15, "{mode:?} stage {l}");
        let lf = terminal_cost(&x, &basis, &w, &target());
        assert!((lf - DT * terminal * START_ERROR).abs() < 1e-12, "{mode:?} terminal {lf}");
    }
    assert!((START_ERROR - 8.00125).abs() < 1e-15);
}

#[test]
fn control_weights_match_presets() {
    let v = build_scenario_weights(ControlMode::Velocity, 2, DT, 1.0);
    assert_eq!(v.control, [DT, DT, 0.1 * DT, 0.1 * DT, 0.1 * DT, 0.1 * DT]);
    let alpha = 1.0 / 3.0;
    let t = build_scenario_weights(ControlMode::TorqueOnly, 3, DT, alpha);
    assert_eq!(t.control, vec![alpha * alpha * DT; 3]);
    assert_eq!(t.alpha, alpha);

    let basis = build_basis(2, 3);
    let effort = stage_cost(&scenario_start(2), &[1.0; 6], &basis, &v, &target())
        - stage_cost(&scenario_start(2), &[0.0; 6], &basis, &v, &target());
    assert!((effort - 2.4 * DT).abs() < 1e-15);
}

fn state_strategy() -> impl Strategy<Value = GpcState> {
    prop::collection::vec(-1.0..1.0f64, 40).prop_map(|v| GpcState {
        coeffs: DMatrix::from_row_slice(4, 10, &v),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficient_moments_match_full_recovery(x in state_strategy()) {
        let basis = build_basis(2, 3);
        let a = moment_output(&x, &basis);
        let b = moment_output_from_full(&x, &basis);
        for m in 0..4 {
            prop_assert!((a.0[m] - b.0[m]).abs() < 1e-14);
        }
    }

    #[test]
    fn cost_derivatives_match_finite_differences(
        x in state_strategy(),
        u in prop::collection::vec(-1.0..1.0f64, 3),
        terminal in any::<bool>(),
    ) {
        let basis = build_basis(2, 3);
        let w = build_scenario_weights(ControlMode::Velocity, 1, DT, 1.0);
        let tgt = target();
        let flat: Vec<f64> = x.to_flat().iter().copied().collect();
        let cost = |f: &[f64]| {
            let s = GpcState::from_flat(f, 10).unwrap();
            if terminal { terminal_cost(&s, &basis, &w, &tgt) } else { stage_cost(&s, &u, &basis, &w, &tgt) }
        };
        let (l_x, l_xx) = if terminal {
            terminal_gradients(&x, &basis, &w, &tgt)
        } else {
            let d = cost_gradients(&x, &u, &basis, &w, &tgt);
            (d.l_x, d.l_xx)
        };
        let h = 1e-4;
        let scale = l_xx.amax().max(1.0);
        for a in 0..flat.len() {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[a] += h;
            m[a] -= h;
            let g = (cost(&p) - cost(&m)) / (2.0 * h);
            prop_assert!((g - l_x[a]).abs() <= 1e-6 * scale, "l_x[{}] {} vs {}", a, l_x[a], g);
            // exact Hessian: the cost is a quartic polynomial, so a coarse stencil suffices
            for b in a..flat.len() {
                let e = |da: f64, db: f64| {
                    let mut v = flat.clone();
                    v[a] += da;
                    v[b] += db;
                    cost(&v)
                };
                let hd = (e(h, h) - e(h, -h) - e(-h, h) + e(-h, -h)) / (4.0 * h * h);
                prop_assert!((hd - l_xx[(a, b)]).abs() <= 1e-5 * scale, "l_xx[{},{}] {} vs {}", a, b, l_xx[(a, b)], hd);
            }
        }
        if !terminal {
            let d = cost_gradients(&x, &u, &basis, &w, &tgt);
            for g in 0..3 {
                prop_assert!((d.l_u[g] - 2.0 * w.control[g] * u[g]).abs() < 1e-15);
                prop_assert_eq!(d.l_uu[(g, g)], 2.0 * w.control[g]);
            }
            prop_assert!(d.l_xu.iter().all(|v| *v == 0.0));
        }
    }

    /// With a zero variance target the exact Hessian is positive semidefinite.
    #[test]
    fn state_hessian_is_psd_for_zero_variance_target(x in state_strategy()) {
        let basis = build_basis(2, 3);
        let w = build_scenario_weights(ControlMode::TorqueOnly, 1, DT, 1.0 / 3.0);
        let (_, l_xx) = terminal_gradients(&x, &basis, &w, &target());
        let eig = l_xx.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|l| *l >= -1e-12 * l_xx.amax().max(1.0)));
    }
}
