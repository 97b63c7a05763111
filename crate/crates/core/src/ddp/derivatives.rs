//! Derivatives of the Galerkin coefficient dynamics and of its RK4 discretization.
//!
//! Continuous Jacobians are quadrature sums over node Jacobians of the physical model:
//! `A[(i,j),(a,b)] = Σ_q ∂f_i/∂x_a(z_q) · w_q φ_j(z_q)/⟨φ_j²⟩ · φ_b(z_q)`.
//! Only rows of physical coordinates that appear in the model's Jacobian
//! pattern are ever nonzero, which the RK4 chain rule exploits.

use nalgebra::{DMatrix, DVector};

use super::{Dynamics, HessianMode};
use crate::error::{Error, Result};
use crate::gpc::GpcSystem;
use crate::stokes::{PhysicalModel, Tensor3};

/// Dynamics second-order terms contracted with a costate `v`:
/// `xx = Σ_k v_k ∂²F_k/∂X²`, `xu = Σ_k v_k ∂²F_k/∂X∂u`, `uu = Σ_k v_k ∂²F_k/∂u²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderTerms {
    pub xx: DMatrix<f64>,
    pub xu: DMatrix<f64>,
    pub uu: DMatrix<f64>,
}

/// Full second-derivative tensors of the coefficient dynamics, indexed `(output, in1, in2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcHessians {
    pub state_state: Tensor3,
    pub state_control: Tensor3,
    pub control_control: Tensor3,
}

/// Derivatives of one discrete step `X_{t+1} = F(X_t, u_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDerivatives {
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    /// Present only in full second-order mode.
    pub second: Option<GpcHessians>,
}

/// Precomputed quadrature products and sparsity data for one system.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    nb: usize,
    nq: usize,
    pattern: Vec<(usize, usize)>,
    /// Physical rows with any nonzero Jacobian entry, ascending.
    active_phys: Vec<usize>,
    /// Position of a physical row within `active_phys`.
    active_pos: Vec<Option<usize>>,
    /// `proj[q, j] φ_b(z_q)` at column `j * nb + b`.
    proj_phi: DMatrix<f64>,
    /// `φ_b(z_q) φ_e(z_q)` at column `b * nb + e`.
    phi_phi: DMatrix<f64>,
}

impl Layout {
    fn new<M: PhysicalModel>(sys: &GpcSystem<M>) -> Self {
        let n = sys.n_states();
        let nb = sys.n_basis();
        let nq = sys.quad.len();
        let pattern = sys.model.state_jacobian_pattern();
        let mut active = vec![false; n];
        for &(i, _) in &pattern {
            active[i] = true;
        }
        let active_phys: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let mut active_pos = vec![None; n];
        for (p, &i) in active_phys.iter().enumerate() {
            active_pos[i] = Some(p);
        }
        let phi = sys.phi();
        let proj = sys.proj();
        let proj_phi = DMatrix::from_fn(nq, nb * nb, |q, c| proj[(q, c / nb)] * phi[(q, c % nb)]);
        let phi_phi = DMatrix::from_fn(nq, nb * nb, |q, c| phi[(q, c / nb)] * phi[(q, c % nb)]);
        Self {
            n,
            nb,
            nq,
            pattern,
            active_phys,
            active_pos,
            proj_phi,
            phi_phi,
        }
    }

    fn dim(&self) -> usize {
        self.n * self.nb
    }

    fn active_rows(&self) -> usize {
        self.active_phys.len() * self.nb
    }

    /// Flat index of row `r` of a row-restricted matrix.
    fn flat_row(&self, r: usize) -> usize {
        self.active_phys[r / self.nb] * self.nb + r % self.nb
    }

    /// Row-restricted state Jacobian (active rows × dim) and full control Jacobian.
    fn continuous_jacobians<M: PhysicalModel>(
        &self,
        sys: &GpcSystem<M>,
        x: &[f64],
        u: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (n, nb, nq) = (self.n, self.nb, self.nq);
        let nc = sys.control_dim();
        let nodes = sys.node_states(x);
        let mut jx = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, nc);
        let mut pattern_vals = DMatrix::zeros(self.pattern.len(), nq);
        let mut control_vals = DMatrix::zeros(n * nc, nq);
        let mut xq = vec![0.0; n];
        for q in 0..nq {
            for i in 0..n {
                xq[i] = nodes[(q, i)];
            }
            sys.model.jacobians(&xq, u, &mut jx, &mut ju)?;
            for (p, &(i, a)) in self.pattern.iter().enumerate() {
                pattern_vals[(p, q)] = jx[(i, a)];
            }
            for i in 0..n {
                for g in 0..nc {
                    control_vals[(i * nc + g, q)] = ju[(i, g)];
                }
            }
        }
        let state_blocks = &pattern_vals * &self.proj_phi;
        let mut a = DMatrix::zeros(self.active_rows(), self.dim());
        for (p, &(i, col)) in self.pattern.iter().enumerate() {
            let base = self.active_pos[i].expect("pattern row is active") * nb;
            for j in 0..nb {
                for b in 0..nb {
                    a[(base + j, col * nb + b)] = state_blocks[(p, j * nb + b)];
                }
            }
        }
        let control_blocks = &control_vals * sys.proj();
        let mut bu = DMatrix::zeros(self.dim(), nc);
        for i in 0..n {
            for g in 0..nc {
                for j in 0..nb {
                    bu[(i * nb + j, g)] = control_blocks[(i * nc + g, j)];
                }
            }
        }
        Ok((a, bu))
    }

    fn scatter_rows(&self, restricted: &DMatrix<f64>) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.dim(), restricted.ncols());
        for r in 0..restricted.nrows() {
            full.row_mut(self.flat_row(r)).copy_from(&restricted.row(r));
        }
        full
    }

    /// Columns of `a` at the active flat rows, giving an active × active block.
    fn active_columns(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.active_rows();
        DMatrix::from_fn(a.nrows(), r, |row, c| a[(row, self.flat_row(c))])
    }

    /// RK4 chain rule: `(F_X, F_u)` of one step.
    fn discrete_jacobians<M: PhysicalModel>(
        &self,
        sys: &GpcSystem<M>,
        x: &[f64],
        u: &[f64],
        dt: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (stages, _) = sys.rk4_stages(x, u, dt)?;
        let factors = [0.0, 0.5 * dt, 0.5 * dt, dt];
        let weights = [1.0, 2.0, 2.0, 1.0];
        let mut acc_x = DMatrix::zeros(self.active_rows(), self.dim());
        let mut acc_u = DMatrix::zeros(self.dim(), sys.control_dim());
        let mut prev_x: Option<DMatrix<f64>> = None;
        let mut prev_u: Option<DMatrix<f64>> = None;
        for s in 0..4 {
            let (a, b) = self.continuous_jacobians(sys, &stages[s], u)?;
            // dk_s = A_s (I + c dk_{s-1}),  du_s = B_s + c A_s du_{s-1}
            let (dk, du) = match (&prev_x, &prev_u) {
                (Some(px), Some(pu)) => {
                    let c = factors[s];
                    let dk = &a + c * (self.active_columns(&a) * px);
                    let du = b + c * self.scatter_rows(&(&a * pu));
                    (dk, du)
                }
                _ => (a, b),
            };
            acc_x += weights[s] * &dk;
            acc_u += weights[s] * &du;
            prev_x = Some(dk);
            prev_u = Some(du);
        }
        let mut f_x = self.scatter_rows(&(acc_x * (dt / 6.0)));
        for k in 0..self.dim() {
            f_x[(k, k)] += 1.0;
        }
        Ok((f_x, acc_u * (dt / 6.0)))
    }

    /// Continuous-time second-order terms contracted with `lam`.
    fn contracted<M: PhysicalModel>(
        &self,
        sys: &GpcSystem<M>,
        x: &[f64],
        u: &[f64],
        lam: &[f64],
    ) -> Result<SecondOrderTerms> {
        let (n, nb, nq) = (self.n, self.nb, self.nq);
        let nc = sys.control_dim();
        if lam.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "costate of length {} for coefficient dimension {}",
                lam.len(),
                self.dim()
            )));
        }
        let lam_mat = DMatrix::from_row_slice(n, nb, lam);
        // g_i(q) = Σ_j λ_ij proj[q, j]
        let g = &lam_mat * sys.proj().transpose();
        let nodes = sys.node_states(x);
        let mut h_xx = DMatrix::zeros(n * n, nq);
        let mut h_xu = DMatrix::zeros(n * nc, nq);
        let mut uu = DMatrix::zeros(nc, nc);
        let mut xq = vec![0.0; n];
        for q in 0..nq {
            for i in 0..n {
                xq[i] = nodes[(q, i)];
            }
            let d = sys.model.derivatives(&xq, u)?;
            let weights: Vec<f64> = (0..n).map(|i| g[(i, q)]).collect();
            let hxx = d.hess_state_state.contract_first(&weights);
            let hxu = d.hess_state_control.contract_first(&weights);
            let huu = d.hess_control_control.contract_first(&weights);
            for a in 0..n {
                for c in 0..n {
                    h_xx[(a * n + c, q)] = hxx[(a, c)];
                }
                for k in 0..nc {
                    h_xu[(a * nc + k, q)] = hxu[(a, k)];
                }
            }
            uu += huu;
        }
        let xx_blocks = &h_xx * &self.phi_phi;
        let mut xx = DMatrix::zeros(self.dim(), self.dim());
        for a in 0..n {
            for c in 0..n {
                for b in 0..nb {
                    for e in 0..nb {
                        xx[(a * nb + b, c * nb + e)] = xx_blocks[(a * n + c, b * nb + e)];
                    }
                }
            }
        }
        let xu_blocks = &h_xu * sys.phi();
        let mut xu = DMatrix::zeros(self.dim(), nc);
        for a in 0..n {
            for k in 0..nc {
                for b in 0..nb {
                    xu[(a * nb + b, k)] = xu_blocks[(a * nc + k, b)];
                }
            }
        }
        Ok(SecondOrderTerms { xx, xu, uu })
    }
}

/// Continuous-time Jacobians `(∂Ẋ/∂X, ∂Ẋ/∂u)` of the coefficient dynamics.
pub fn gpc_jacobian<M: PhysicalModel>(
    sys: &GpcSystem<M>,
    x: &[f64],
    u: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let layout = Layout::new(sys);
    let (a, b) = layout.continuous_jacobians(sys, x, u)?;
    Ok((layout.scatter_rows(&a), b))
}

/// Full continuous-time second-derivative tensors of the coefficient dynamics.
pub fn gpc_hessians<M: PhysicalModel>(sys: &GpcSystem<M>, x: &[f64], u: &[f64]) -> Result<GpcHessians> {
    let n = sys.n_states();
    let nb = sys.n_basis();
    let nc = sys.control_dim();
    let dim = n * nb;
    let nodes = sys.node_states(x);
    let phi = sys.phi();
    let proj = sys.proj();
    let mut state_state = Tensor3::zeros(dim, dim, dim);
    let mut state_control = Tensor3::zeros(dim, dim, nc);
    let mut control_control = Tensor3::zeros(dim, nc, nc);
    let mut xq = vec![0.0; n];
    for q in 0..sys.quad.len() {
        for i in 0..n {
            xq[i] = nodes[(q, i)];
        }
        let d = sys.model.derivatives(&xq, u)?;
        for i in 0..n {
            for j in 0..nb {
                let pj = proj[(q, j)];
                let row = i * nb + j;
                for a in 0..n {
                    for c in 0..n {
                        let h = d.hess_state_state.get(i, a, c);
                        if h == 0.0 {
                            continue;
                        }
                        for b in 0..nb {
                            let hb = h * pj * phi[(q, b)];
                            for e in 0..nb {
                                state_state.add(row, a * nb + b, c * nb + e, hb * phi[(q, e)]);
                            }
                        }
                    }
                    for k in 0..nc {
                        let h = d.hess_state_control.get(i, a, k);
                        if h == 0.0 {
                            continue;
                        }
                        for b in 0..nb {
                            state_control.add(row, a * nb + b, k, h * pj * phi[(q, b)]);
                        }
                    }
                }
                for k in 0..nc {
                    for l in 0..nc {
                        let h = d.hess_control_control.get(i, k, l);
                        if h != 0.0 {
                            control_control.add(row, k, l, h * pj);
                        }
                    }
                }
            }
        }
    }
    Ok(GpcHessians {
        state_state,
        state_control,
        control_control,
    })
}

/// Continuous-time second-order terms contracted with the costate `lam`.
pub fn contract_hessians<M: PhysicalModel>(
    sys: &GpcSystem<M>,
    x: &[f64],
    u: &[f64],
    lam: &[f64],
) -> Result<SecondOrderTerms> {
    Layout::new(sys).contracted(sys, x, u, lam)
}

/// Step derivatives: RK4 Jacobians, plus `dt`-scaled continuous Hessians
/// (the explicit-Euler consistent approximation) in full mode.
pub fn discrete_derivatives<M: PhysicalModel>(
    sys: &GpcSystem<M>,
    x: &[f64],
    u: &[f64],
    dt: f64,
    mode: HessianMode,
) -> Result<DiscreteDerivatives> {
    let layout = Layout::new(sys);
    let (f_x, f_u) = layout.discrete_jacobians(sys, x, u, dt)?;
    let second = match mode {
        HessianMode::GaussNewton => None,
        HessianMode::FullDdp => {
            let mut h = gpc_hessians(sys, x, u)?;
            scale_tensor(&mut h.state_state, dt);
            scale_tensor(&mut h.state_control, dt);
            scale_tensor(&mut h.control_control, dt);
            Some(h)
        }
    };
    Ok(DiscreteDerivatives { f_x, f_u, second })
}

fn scale_tensor(t: &mut Tensor3, s: f64) {
    let [d0, d1, d2] = t.dims();
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                t.set(i, j, k, s * t.get(i, j, k));
            }
        }
    }
}

/// RK4-discretized coefficient dynamics as a [`Dynamics`] implementation.
#[derive(Debug, Clone)]
pub struct GpcDynamics<M> {
    pub system: GpcSystem<M>,
    pub dt: f64,
    layout: Layout,
}

impl<M: PhysicalModel> GpcDynamics<M> {
    pub fn new(system: GpcSystem<M>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let layout = Layout::new(&system);
        Ok(Self { system, dt, layout })
    }
}

impl<M: PhysicalModel> Dynamics for GpcDynamics<M> {
    fn state_dim(&self) -> usize {
        self.system.dim()
    }

    fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.system.step_flat(x.as_slice(), u.as_slice(), self.dt)?;
        Ok(DVector::from_vec(next))
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.layout
            .discrete_jacobians(&self.system, x.as_slice(), u.as_slice(), self.dt)
    }

    fn second_order(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        v_x: &DVector<f64>,
    ) -> Result<Option<SecondOrderTerms>> {
        let mut terms = self
            .layout
            .contracted(&self.system, x.as_slice(), u.as_slice(), v_x.as_slice())?;
        terms.xx *= self.dt;
        terms.xu *= self.dt;
        terms.uu *= self.dt;
        Ok(Some(terms))
    }
}
