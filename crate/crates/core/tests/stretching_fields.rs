use nalgebra::Matrix2;
use rotorflow::ftle::{
    advect_points, cauchy_green, compute_ftle, flow_map, leading_directions, FtleGridSpec, IntegrationOptions,
    RotorPlayback, SteadyFlow, FLAG_BOUNDARY, FLAG_ESCAPED,
};
use rotorflow::stokes::{FlowParams, Vec2};

fn grid(n: usize, tau: f64) -> FtleGridSpec {
    FtleGridSpec {
        domain: [-1.0, 1.0, -1.0, 1.0],
        nx: n,
        ny: n,
        t0: 0.0,
        tau,
    }
}

/// For `ẋ = A x` the flow map is `e^{Aτ}`, so `C = MᵀM` at every node.
#[test]
fn linear_flow_gives_matrix_exponential_tensor() {
    let a: Matrix2<f64> = Matrix2::new(0.3, 1.0, -0.5, -0.3);
    let tau = 1.2;
    let m = (a * tau).exp();
    let c = m.transpose() * m;
    let eig = c.symmetric_eigen();
    let (imax, _) = eig.eigenvalues.argmax();
    let sigma = eig.eigenvalues[imax].ln() / (2.0 * tau);
    let lead = eig.eigenvectors.column(imax);

    let flow = SteadyFlow(move |p: Vec2| Vec2::new(a[(0, 0)] * p.x + a[(0, 1)] * p.y, a[(1, 0)] * p.x + a[(1, 1)] * p.y));
    let g = grid(9, tau);
    let opts = IntegrationOptions { dt: 0.01, escape_factor: 4.0 };
    let cg = cauchy_green(&flow_map(&g, &flow, &opts).unwrap());
    for t in &cg.tensors {
        assert!((t.a - c[(0, 0)]).abs() < 1e-8 && (t.b - c[(0, 1)]).abs() < 1e-8 && (t.d - c[(1, 1)]).abs() < 1e-8);
    }
    for d in leading_directions(&cg) {
        assert!((d.x * lead[0] + d.y * lead[1]).abs() > 1.0 - 1e-8);
    }
    let field = compute_ftle(&g, &flow, &opts).unwrap();
    assert!(field.sigma.iter().all(|s| (s - sigma).abs() < 1e-8));
}

#[test]
fn saddle_stretching_rate_equals_its_eigenvalue() {
    let flow = SteadyFlow(|p: Vec2| Vec2::new(0.7 * p.x, -0.7 * p.y));
    let field = compute_ftle(&grid(5, 1.0), &flow, &IntegrationOptions::default()).unwrap();
    assert!(field.sigma.iter().all(|s| (s - 0.7).abs() < 1e-9));
    // backward time exchanges the roles of the two axes with the same rate
    let back = compute_ftle(&grid(5, -1.0), &flow, &IntegrationOptions::default()).unwrap();
    assert!(back.sigma.iter().all(|s| (s - 0.7).abs() < 1e-9));
}

#[test]
fn edge_nodes_are_flagged_and_fast_tracers_escape() {
    let flow = SteadyFlow(|p: Vec2| Vec2::new(3.0 * p.x, 0.0));
    let g = grid(5, 1.0);
    let field = compute_ftle(&g, &flow, &IntegrationOptions::default()).unwrap();
    for iy in 0..5 {
        for ix in 0..5 {
            let f = field.flags[iy * 5 + ix];
            let edge = ix == 0 || iy == 0 || ix == 4 || iy == 4;
            assert_eq!(f & FLAG_BOUNDARY != 0, edge, "node ({ix}, {iy})");
            // e³ · 0.5 leaves the 4× box; the centre column stays put but
            // inherits the flag through its difference stencil
            assert!(f & FLAG_ESCAPED != 0, "node ({ix}, {iy})");
        }
    }
}

fn playback() -> RotorPlayback {
    let segments = 120;
    let positions = (0..segments)
        .map(|k| {
            let s = k as f64 * 0.01;
            vec![Vec2::new(-0.6 + 0.2 * s, 0.1), Vec2::new(0.5, -0.4 + 0.3 * s)]
        })
        .collect();
    let strengths = (0..segments).map(|k| vec![0.8, -0.5 + 0.004 * k as f64]).collect();
    RotorPlayback::new(0.01, positions, strengths, FlowParams::default()).unwrap()
}

#[test]
fn backward_map_inverts_forward_map() {
    let pb = playback();
    let span = pb.duration();
    // tracers clear of the rotors, where the step error stays small
    let start: Vec<Vec2> = (0..20).map(|k| Vec2::new(-1.0 + 0.1 * k as f64, 1.0)).collect();
    let (fwd, flags) = advect_points(&start, &pb, 0.0, span, 0.01, None).unwrap();
    assert!(flags.iter().all(|f| *f == 0));
    let (back, _) = advect_points(&fwd, &pb, span, -span, 0.01, None).unwrap();
    for (a, b) in start.iter().zip(&back) {
        assert!((*a - *b).norm() < 1e-8, "{a:?} -> {b:?}");
    }
    // the reversed playback run forward is the same backward integration
    let (rev, _) = advect_points(&fwd, &pb.time_reversed(), 0.0, span, 0.01, None).unwrap();
    for (a, b) in back.iter().zip(&rev) {
        assert!((*a - *b).norm() < 1e-12);
    }
}

/// Rotlet flows are incompressible, so the tensor has unit determinant up to
/// the second-order error of the difference stencil.
#[test]
fn rotor_flow_map_preserves_area() {
    let pb = playback();
    let centre_defect = |n: usize| {
        let g = FtleGridSpec {
            domain: [0.9, 1.5, 0.6, 1.2],
            nx: n,
            ny: n,
            t0: 0.0,
            tau: 1.2,
        };
        let cg = cauchy_green(&flow_map(&g, &pb, &IntegrationOptions::default()).unwrap());
        let t = cg.tensors[(n / 2) * n + n / 2];
        t.a * t.d - t.b * t.b - 1.0
    };
    let (coarse, fine) = (centre_defect(31), centre_defect(61));
    assert!(fine.abs() < 1e-4, "{fine}");
    let ratio = coarse / fine;
    assert!((3.5..4.5).contains(&ratio), "order ratio {ratio}");
}
