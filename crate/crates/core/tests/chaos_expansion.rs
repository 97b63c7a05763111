use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotorflow::gpc::{
    build_basis, build_quadrature, gauss_hermite_1d, moments, project_gaussian_initial, GpcState, GpcSystem,
};
use rotorflow::stokes::{
    rk4_step, ControlMode, ControlVector, FlowParams, LinearModel, PhysicalModel, RotorSystem, Vec2,
};

fn double_factorial(k: usize) -> f64 {
    (1..=k).rev().step_by(2).map(|v| v as f64).product()
}

#[test]
fn norm_of_mixed_index_is_product_of_factorials() {
    let basis = build_basis(2, 3);
    let quad = build_quadrature(2, 8);
    let j = basis.indices.iter().position(|m| m.0 == [2, 1]).unwrap();
    let by_quadrature = quad.integrate(|z| basis.eval(z)[j].powi(2));
    assert!((by_quadrature - 2.0).abs() < 1e-12);
    assert_eq!(basis.norms[j], 2.0);
}

#[test]
fn standard_basis_has_ten_graded_terms() {
    let basis = build_basis(2, 3);
    let order: Vec<[usize; 2]> = basis.indices.iter().map(|m| [m.0[0], m.0[1]]).collect();
    assert_eq!(
        order,
        [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2], [3, 0], [2, 1], [1, 2], [0, 3]]
    );
}

#[test]
fn one_dimensional_rule_integrates_gaussian_moments() {
    for q in 1..=12 {
        let (z, w) = gauss_hermite_1d(q);
        for k in 0..2 * q {
            let approx: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(k as i32)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { double_factorial(k.saturating_sub(1)) };
            let scale: f64 = z.iter().zip(&w).map(|(z, w)| w * z.abs().powi(k as i32)).sum();
            assert!(
                (approx - exact).abs() <= 1e-12 * scale.max(1.0),
                "Q={q} k={k}: {approx} vs {exact}"
            );
        }
    }
}

proptest! {
    #[test]
    fn gram_matrix_is_diagonal_with_factorial_norms(degree in 0usize..=4, extra in 0usize..4) {
        let basis = build_basis(2, degree);
        let quad = build_quadrature(2, degree + 1 + extra);
        for a in 0..basis.len() {
            for b in 0..basis.len() {
                let g = quad.integrate(|z| {
                    let v = basis.eval(z);
                    v[a] * v[b]
                });
                let expect = if a == b { basis.norms[a] } else { 0.0 };
                prop_assert!((g - expect).abs() < 1e-10 * basis.norms[a].max(1.0));
            }
        }
    }

    #[test]
    fn moments_match_quadrature_and_are_psd(values in prop::collection::vec(-1.0..1.0f64, 40)) {
        let basis = build_basis(2, 3);
        let quad = build_quadrature(2, 8);
        let x = GpcState { coeffs: DMatrix::from_row_slice(4, 10, &values) };
        let m = moments(&x, &basis);
        let pts: Vec<Vec<f64>> = quad.nodes.iter().map(|z| x.reconstruct(&basis, z)).collect();
        for i in 0..4 {
            let mean: f64 = pts.iter().zip(&quad.weights).map(|(p, w)| w * p[i]).sum();
            prop_assert!((mean - m.mean[i]).abs() < 1e-10);
            for j in 0..4 {
                let c: f64 = pts
                    .iter()
                    .zip(&quad.weights)
                    .map(|(p, w)| w * (p[i] - m.mean[i]) * (p[j] - m.mean[j]))
                    .sum();
                prop_assert!((c - m.cov[(i, j)]).abs() < 1e-10, "cov[{},{}]", i, j);
            }
        }
        let eig = m.cov.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|l| *l >= -1e-12 * m.cov.amax().max(1.0)));
    }

    /// Linear dynamics act on each basis index separately; the control enters the mean only.
    #[test]
    fn linear_dynamics_decouple(
        a in prop::collection::vec(-1.0..1.0f64, 4),
        b in prop::collection::vec(-1.0..1.0f64, 2),
        c in prop::collection::vec(-1.0..1.0f64, 20),
        u in -2.0..2.0f64,
    ) {
        let am = DMatrix::from_row_slice(2, 2, &a);
        let bm = DMatrix::from_row_slice(2, 1, &b);
        let sys = GpcSystem::new(LinearModel::new(am.clone(), bm.clone()).unwrap(), build_basis(2, 3), build_quadrature(2, 8)).unwrap();
        let x = GpcState { coeffs: DMatrix::from_row_slice(2, 10, &c) };
        let dx = sys.galerkin_rhs(&x, &ControlVector::new(ControlMode::TorqueOnly, vec![u])).unwrap();
        let mut expect = &am * &x.coeffs;
        for i in 0..2 {
            expect[(i, 0)] += bm[(i, 0)] * u;
        }
        for (g, e) in dx.coeffs.iter().zip(expect.iter()) {
            prop_assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn initial_gaussian_has_exact_linear_coefficients() {
    let basis = build_basis(2, 3);
    let x = project_gaussian_initial(&[1.0, 1.0], &[0.025f64.sqrt(); 2], &[-1.0, 0.0], &basis).unwrap();
    assert!((x.coeffs[(0, 1)] - 0.158113883008419).abs() < 1e-15);
    assert!((x.coeffs[(1, 2)] - 0.158113883008419).abs() < 1e-15);
    let m = moments(&x, &basis);
    assert!((m.cov[(0, 0)] - 0.025).abs() < 1e-15);
    assert_eq!(m.cov[(2, 2)], 0.0);
    assert_eq!(m.cov[(3, 3)], 0.0);
}

fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}

/// Sampled `E[f(x(Z)) φ_j(Z)] / ‖φ_j‖²` agrees with the Galerkin right-hand side.
#[test]
fn galerkin_rhs_matches_sampled_projection() {
    let basis = build_basis(2, 3);
    let model = RotorSystem::new(2, ControlMode::Velocity, FlowParams::default());
    let sys = GpcSystem::new(model.clone(), basis.clone(), build_quadrature(2, 8)).unwrap();
    let sd = 0.025f64.sqrt();
    // rotors at (-0.6, -0.4) and (1.9, -0.2), well clear of the cloud
    let rotors = [-0.6, 1.9, -0.4, -0.2];
    let x = project_gaussian_initial(&[1.0, 1.0], &[sd, sd], &rotors, &basis).unwrap();
    let u = ControlVector::velocity(&[0.7, -1.1], &[Vec2::new(0.3, -0.2), Vec2::new(0.0, 0.5)]);
    let dx = sys.galerkin_rhs(&x, &u).unwrap();

    let samples = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nb = basis.len();
    let mut sum = vec![0.0; 2 * nb];
    let mut sum_sq = vec![0.0; 2 * nb];
    let mut f = vec![0.0; 6];
    for _ in 0..samples {
        let (z0, z1) = box_muller(&mut rng);
        let z = [z0, z1];
        let state = x.reconstruct(&basis, &z);
        model.rhs(&state, &u.values, &mut f).unwrap();
        let phi = basis.eval(&z);
        for i in 0..2 {
            for j in 0..nb {
                let v = f[i] * phi[j] / basis.norms[j];
                sum[i * nb + j] += v;
                sum_sq[i * nb + j] += v * v;
            }
        }
    }
    let n = samples as f64;
    for i in 0..2 {
        for j in 0..nb {
            let mean = sum[i * nb + j] / n;
            let se = ((sum_sq[i * nb + j] / n - mean * mean) / n).sqrt();
            let got = dx.coeffs[(i, j)];
            assert!((got - mean).abs() <= 3.0 * se + 1e-9, "row {i} mode {j}: {got} vs {mean} ± {se}");
        }
    }
    // rotor rows carry their commanded velocity in the mean only
    for (r, v) in [(2, 0.3), (3, 0.0), (4, -0.2), (5, 0.5)] {
        assert!((dx.coeffs[(r, 0)] - v).abs() < 1e-14);
        assert!(dx.coeffs.row(r).iter().skip(1).all(|c| *c == 0.0));
    }
}

/// With no uncertainty the expansion collapses onto a single deterministic trajectory.
#[test]
fn zero_variance_reduces_to_plain_rollout() {
    let basis = build_basis(2, 3);
    let model = RotorSystem::new(3, ControlMode::TorqueOnly, FlowParams::default());
    let sys = GpcSystem::new(model.clone(), basis.clone(), build_quadrature(2, 8)).unwrap();
    let start = [0.2, 0.1, -0.5, 0.4, 0.3, -0.3, 0.5, -0.2];
    let x0 = project_gaussian_initial(&start[..2], &[0.0, 0.0], &start[2..], &basis).unwrap();
    let controls = vec![ControlVector::new(ControlMode::TorqueOnly, vec![0.4, -0.3, 0.6]); 100];
    let traj = sys.propagate(&x0, &controls, 0.01).unwrap();

    let mut plain = start.to_vec();
    for u in &controls {
        plain = rk4_step(
            |x| {
                let mut out = vec![0.0; x.len()];
                model.rhs(x, &u.values, &mut out)?;
                Ok(out)
            },
            &plain,
            0.01,
        )
        .unwrap();
    }
    let last = traj.last().unwrap();
    for i in 0..8 {
        assert!((last.coeffs[(i, 0)] - plain[i]).abs() < 1e-12, "state {i}");
        assert!(last.coeffs.row(i).iter().skip(1).all(|c| *c == 0.0));
    }
}
