//! Hermite polynomial chaos surrogate.
//!
//! Every physical state coordinate `x_i(Z)` is expanded as `Σ_j X[i, j] φ_j(Z)`
//! with `Z` standard normal in `d` dimensions. The Galerkin-projected
//! coefficient dynamics are evaluated with a tensor Gauss-Hermite rule.
//!
//! Flat coefficient vectors are row-major: entry `i * (K + 1) + j` holds `X[i, j]`.

mod basis;
mod quadrature;

pub use basis::{build_basis, hermite_eval, hermite_table, HermiteBasis, MultiIndex};
pub use quadrature::{build_quadrature, gauss_hermite_1d, QuadratureRule};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stokes::{ControlVector, PhysicalModel};

/// Expansion coefficients, one row per physical state coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcState {
    pub coeffs: DMatrix<f64>,
}

impl GpcState {
    pub fn zeros(n: usize, n_basis: usize) -> Self {
        Self {
            coeffs: DMatrix::zeros(n, n_basis),
        }
    }

    pub fn n_states(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let (n, k) = self.coeffs.shape();
        DVector::from_fn(n * k, |l, _| self.coeffs[(l / k, l % k)])
    }

    pub fn from_flat(flat: &[f64], n_basis: usize) -> Result<Self> {
        if n_basis == 0 || flat.len() % n_basis != 0 {
            return Err(Error::DimensionMismatch(format!(
                "flat coefficient vector of length {} is not a multiple of {}",
                flat.len(),
                n_basis
            )));
        }
        let n = flat.len() / n_basis;
        Ok(Self {
            coeffs: DMatrix::from_row_slice(n, n_basis, flat),
        })
    }

    /// Zeroth coefficients, i.e. the mean of each physical coordinate.
    pub fn mean_state(&self) -> Vec<f64> {
        self.coeffs.column(0).iter().copied().collect()
    }

    /// Physical state at a point `z` of the stochastic space.
    pub fn reconstruct(&self, basis: &HermiteBasis, z: &[f64]) -> Vec<f64> {
        let phi = DVector::from_vec(basis.eval(z));
        (&self.coeffs * phi).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Mean and covariance recovered from the coefficients.
pub fn moments(x: &GpcState, basis: &HermiteBasis) -> MomentVector {
    let c = &x.coeffs;
    let n = c.nrows();
    let mean = c.column(0).clone_owned();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 1..c.ncols() {
                acc += c[(i, k)] * c[(j, k)] * basis.norms[k];
            }
            cov[(i, j)] = acc;
            cov[(j, i)] = acc;
        }
    }
    MomentVector { mean, cov }
}

/// Exact expansion of `x_i = μ_i + σ_i Z_i` for the stochastic coordinates
/// (the first `mean.len()` rows), followed by deterministic rows.
pub fn project_gaussian_initial(
    mean: &[f64],
    stdev: &[f64],
    deterministic_states: &[f64],
    basis: &HermiteBasis,
) -> Result<GpcState> {
    if mean.len() != stdev.len() || mean.len() != basis.dim {
        return Err(Error::DimensionMismatch(format!(
            "{} means, {} standard deviations, basis dimension {}",
            mean.len(),
            stdev.len(),
            basis.dim
        )));
    }
    if stdev.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument("standard deviations must be finite and >= 0".into()));
    }
    let n = mean.len() + deterministic_states.len();
    let mut x = GpcState::zeros(n, basis.len());
    for (i, (&mu, &sd)) in mean.iter().zip(stdev).enumerate() {
        x.coeffs[(i, 0)] = mu;
        if sd != 0.0 {
            let lin = basis.linear_index(i).ok_or_else(|| {
                Error::InvalidArgument("basis must contain degree-one terms to represent a nonzero variance".into())
            })?;
            x.coeffs[(i, lin)] = sd;
        }
    }
    for (k, &v) in deterministic_states.iter().enumerate() {
        x.coeffs[(mean.len() + k, 0)] = v;
    }
    Ok(x)
}

/// Galerkin-projected coefficient dynamics of a physical model.
#[derive(Debug, Clone)]
pub struct GpcSystem<M> {
    pub model: M,
    pub basis: HermiteBasis,
    pub quad: QuadratureRule,
    /// `φ_j(z_q)`, nodes × basis.
    phi: DMatrix<f64>,
    /// `w_q φ_j(z_q) / ⟨φ_j²⟩`, nodes × basis.
    proj: DMatrix<f64>,
}

impl<M: PhysicalModel> GpcSystem<M> {
    pub fn new(model: M, basis: HermiteBasis, quad: QuadratureRule) -> Result<Self> {
        if basis.dim != quad.dim {
            return Err(Error::DimensionMismatch(format!(
                "basis dimension {} but quadrature dimension {}",
                basis.dim, quad.dim
            )));
        }
        let nq = quad.len();
        let nb = basis.len();
        let mut phi = DMatrix::zeros(nq, nb);
        let mut proj = DMatrix::zeros(nq, nb);
        for (q, z) in quad.nodes.iter().enumerate() {
            for (j, v) in basis.eval(z).into_iter().enumerate() {
                phi[(q, j)] = v;
                proj[(q, j)] = quad.weights[q] * v / basis.norms[j];
            }
        }
        Ok(Self {
            model,
            basis,
            quad,
            phi,
            proj,
        })
    }

    pub fn n_states(&self) -> usize {
        self.model.state_dim()
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    /// Dimension of the flat coefficient vector.
    pub fn dim(&self) -> usize {
        self.n_states() * self.n_basis()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn proj(&self) -> &DMatrix<f64> {
        &self.proj
    }

    /// Physical states at every quadrature node, nodes × states.
    pub fn node_states(&self, flat: &[f64]) -> DMatrix<f64> {
        let n = self.n_states();
        let nb = self.n_basis();
        let mut out = DMatrix::zeros(self.quad.len(), n);
        for q in 0..self.quad.len() {
            for i in 0..n {
                let row = &flat[i * nb..(i + 1) * nb];
                let mut acc = 0.0;
                for (j, c) in row.iter().enumerate() {
                    acc += c * self.phi[(q, j)];
                }
                out[(q, i)] = acc;
            }
        }
        out
    }

    /// Coefficient derivative on flat vectors.
    pub fn rhs_flat(&self, flat: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n_states();
        let nb = self.n_basis();
        if flat.len() != n * nb || out.len() != n * nb {
            return Err(Error::DimensionMismatch(format!(
                "coefficient vector of length {} for {} states × {} basis functions",
                flat.len(),
                n,
                nb
            )));
        }
        let nodes = self.node_states(flat);
        let nq = self.quad.len();
        let mut values = DMatrix::zeros(nq, n);
        let mut xq = vec![0.0; n];
        let mut fq = vec![0.0; n];
        for q in 0..nq {
            for i in 0..n {
                xq[i] = nodes[(q, i)];
            }
            self.model.rhs(&xq, u, &mut fq)?;
            for i in 0..n {
                values[(q, i)] = fq[i];
            }
        }
        // Higher modes project deviations from node 0. The quadrature integrates
        // constants exactly, so this is the same operator, but a coordinate that
        // is identical at every node (a rotor) keeps exactly zero higher modes
        // instead of accumulating rounding that unstable rotor motion amplifies.
        out.fill(0.0);
        for q in 0..nq {
            for i in 0..n {
                let fi = values[(q, i)];
                let dev = fi - values[(0, i)];
                let dst = &mut out[i * nb..(i + 1) * nb];
                dst[0] += fi * self.proj[(q, 0)];
                if dev != 0.0 {
                    for (j, d) in dst.iter_mut().enumerate().skip(1) {
                        *d += dev * self.proj[(q, j)];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn galerkin_rhs(&self, x: &GpcState, u: &ControlVector) -> Result<GpcState> {
        let flat = x.to_flat();
        let mut out = vec![0.0; flat.len()];
        self.rhs_flat(flat.as_slice(), &u.values, &mut out)?;
        GpcState::from_flat(&out, self.n_basis())
    }

    /// The four RK4 stage states and stage derivatives of one step.
    pub fn rk4_stages(&self, x: &[f64], u: &[f64], dt: f64) -> Result<([Vec<f64>; 4], [Vec<f64>; 4])> {
        let len = x.len();
        let mut k1 = vec![0.0; len];
        self.rhs_flat(x, u, &mut k1)?;
        let x2: Vec<f64> = (0..len).map(|i| x[i] + 0.5 * dt * k1[i]).collect();
        let mut k2 = vec![0.0; len];
        self.rhs_flat(&x2, u, &mut k2)?;
        let x3: Vec<f64> = (0..len).map(|i| x[i] + 0.5 * dt * k2[i]).collect();
        let mut k3 = vec![0.0; len];
        self.rhs_flat(&x3, u, &mut k3)?;
        let x4: Vec<f64> = (0..len).map(|i| x[i] + dt * k3[i]).collect();
        let mut k4 = vec![0.0; len];
        self.rhs_flat(&x4, u, &mut k4)?;
        Ok(([x.to_vec(), x2, x3, x4], [k1, k2, k3, k4]))
    }

    /// One RK4 step of the coefficient dynamics with the control held fixed.
    pub fn step_flat(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let (_, [k1, k2, k3, k4]) = self.rk4_stages(x, u, dt)?;
        Ok((0..x.len())
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }

    /// RK4 rollout; returns `controls.len() + 1` states.
    pub fn propagate(&self, x0: &GpcState, controls: &[ControlVector], dt: f64) -> Result<Vec<GpcState>> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let nb = self.n_basis();
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut cur: Vec<f64> = x0.to_flat().iter().copied().collect();
        states.push(x0.clone());
        for (t, u) in controls.iter().enumerate() {
            cur = self.step_flat(&cur, &u.values, dt).map_err(|e| e.at_step(t))?;
            states.push(GpcState::from_flat(&cur, nb)?);
        }
        Ok(states)
    }
}
