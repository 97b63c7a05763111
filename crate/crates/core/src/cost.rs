//! Quadratic moment-tracking cost on the particle mean and variances.
//!
//! `l(X, u) = (M(X) - y_ref)ᵀ S (M(X) - y_ref) + uᵀ R u` with
//! `M(X) = [μ₁, μ₂, σ₁₁, σ₂₂]` taken from the first two state rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gpc::{moments, GpcState, HermiteBasis};
use crate::stokes::ControlMode;

pub const N_MOMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentOutput(pub [f64; N_MOMENTS]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTarget {
    pub y_ref: [f64; N_MOMENTS],
}

impl MomentTarget {
    pub fn new(mean: [f64; 2], variance: [f64; 2]) -> Self {
        Self {
            y_ref: [mean[0], mean[1], variance[0], variance[1]],
        }
    }
}

/// Diagonal weights, already multiplied by the time step.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub stage: [f64; N_MOMENTS],
    pub terminal: [f64; N_MOMENTS],
    pub control: Vec<f64>,
    /// Torque-mode control scaling; `1` for velocity mode.
    pub alpha: f64,
}

fn diagonal_of(m: &DMatrix<f64>, name: &'static str) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("{name} must be square")));
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return Err(Error::NonDiagonalWeight(name));
            }
        }
    }
    Ok(m.diagonal().iter().copied().collect())
}

impl CostWeights {
    /// Builds weights from full matrices, rejecting off-diagonal entries.
    pub fn from_matrices(s: &DMatrix<f64>, s_terminal: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let stage = diagonal_of(s, "S")?;
        let terminal = diagonal_of(s_terminal, "S_H")?;
        let control = diagonal_of(r, "R")?;
        if stage.len() != N_MOMENTS || terminal.len() != N_MOMENTS {
            return Err(Error::DimensionMismatch("S and S_H must be 4x4".into()));
        }
        let w = Self {
            stage: stage.try_into().unwrap(),
            terminal: terminal.try_into().unwrap(),
            control,
            alpha: 1.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage.iter().chain(&self.terminal).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("moment weights must be >= 0".into()));
        }
        if self.control.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("control weights must be > 0".into()));
        }
        Ok(())
    }
}

/// Published presets: the velocity-control scenario and the torque-only scenario.
pub fn build_scenario_weights(mode: ControlMode, n_rotors: usize, dt: f64, alpha: f64) -> CostWeights {
    match mode {
        ControlMode::Velocity => {
            let mut control = vec![dt; n_rotors];
            control.extend(std::iter::repeat(0.1 * dt).take(2 * n_rotors));
            CostWeights {
                stage: [0.1 * dt; N_MOMENTS],
                terminal: [1000.0 * dt; N_MOMENTS],
                control,
                alpha: 1.0,
            }
        }
        ControlMode::TorqueOnly => CostWeights {
            stage: [0.1 * dt; N_MOMENTS],
            terminal: [500.0 * dt; N_MOMENTS],
            control: vec![alpha * alpha * dt; n_rotors],
            alpha,
        },
    }
}

pub fn moment_output(x: &GpcState, basis: &HermiteBasis) -> MomentOutput {
    let c = &x.coeffs;
    let var = |i: usize| (1..c.ncols()).map(|k| c[(i, k)] * c[(i, k)] * basis.norms[k]).sum::<f64>();
    MomentOutput([c[(0, 0)], c[(1, 0)], var(0), var(1)])
}

fn weighted_error(y: &MomentOutput, diag: &[f64; N_MOMENTS], target: &MomentTarget) -> f64 {
    (0..N_MOMENTS)
        .map(|m| {
            let e = y.0[m] - target.y_ref[m];
            diag[m] * e * e
        })
        .sum()
}

pub fn stage_cost(
    x: &GpcState,
    u: &[f64],
    basis: &HermiteBasis,
    weights: &CostWeights,
    target: &MomentTarget,
) -> f64 {
    let y = moment_output(x, basis);
    let effort: f64 = u.iter().zip(&weights.control).map(|(ui, ri)| ri * ui * ui).sum();
    weighted_error(&y, &weights.stage, target) + effort
}

pub fn terminal_cost(x: &GpcState, basis: &HermiteBasis, weights: &CostWeights, target: &MomentTarget) -> f64 {
    weighted_error(&moment_output(x, basis), &weights.terminal, target)
}

/// Derivatives of a stage (or terminal) cost with respect to the flat
/// coefficient vector and the control.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivatives {
    pub l_x: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_u: DVector<f64>,
    pub l_uu: DMatrix<f64>,
    pub l_xu: DMatrix<f64>,
}

fn moment_state_derivatives(
    x: &GpcState,
    basis: &HermiteBasis,
    diag: &[f64; N_MOMENTS],
    target: &MomentTarget,
) -> (DVector<f64>, DMatrix<f64>) {
    let c = &x.coeffs;
    let nb = c.ncols();
    let dim = c.nrows() * nb;
    let y = moment_output(x, basis);
    let mut l_x = DVector::zeros(dim);
    let mut l_xx = DMatrix::zeros(dim, dim);
    for row in 0..2 {
        // mean of coordinate `row`
        let m = row;
        let e = y.0[m] - target.y_ref[m];
        let idx = row * nb;
        l_x[idx] += 2.0 * diag[m] * e;
        l_xx[(idx, idx)] += 2.0 * diag[m];

        // variance of coordinate `row`
        let m = 2 + row;
        let e = y.0[m] - target.y_ref[m];
        for k in 1..nb {
            let ik = row * nb + k;
            let dk = 2.0 * c[(row, k)] * basis.norms[k];
            l_x[ik] += 2.0 * diag[m] * e * dk;
            for kk in 1..nb {
                let ikk = row * nb + kk;
                let dkk = 2.0 * c[(row, kk)] * basis.norms[kk];
                l_xx[(ik, ikk)] += 2.0 * diag[m] * dk * dkk;
            }
            l_xx[(ik, ik)] += 2.0 * diag[m] * e * 2.0 * basis.norms[k];
        }
    }
    (l_x, l_xx)
}

/// Exact gradients and Hessians of the stage cost; `l_xu` vanishes.
pub fn cost_gradients(
    x: &GpcState,
    u: &[f64],
    basis: &HermiteBasis,
    weights: &CostWeights,
    target: &MomentTarget,
) -> CostDerivatives {
    let (l_x, l_xx) = moment_state_derivatives(x, basis, &weights.stage, target);
    let nc = u.len();
    let l_u = DVector::from_fn(nc, |g, _| 2.0 * weights.control[g] * u[g]);
    let l_uu = DMatrix::from_fn(nc, nc, |g, h| if g == h { 2.0 * weights.control[g] } else { 0.0 });
    let l_xu = DMatrix::zeros(l_x.len(), nc);
    CostDerivatives {
        l_x,
        l_xx,
        l_u,
        l_uu,
        l_xu,
    }
}

pub fn terminal_gradients(
    x: &GpcState,
    basis: &HermiteBasis,
    weights: &CostWeights,
    target: &MomentTarget,
) -> (DVector<f64>, DMatrix<f64>) {
    moment_state_derivatives(x, basis, &weights.terminal, target)
}

/// Particle block of the full moment recovery, as `M(X)` ordering.
pub fn moment_output_from_full(x: &GpcState, basis: &HermiteBasis) -> MomentOutput {
    let m = moments(x, basis);
    MomentOutput([m.mean[0], m.mean[1], m.cov[(0, 0)], m.cov[(1, 1)]])
}
