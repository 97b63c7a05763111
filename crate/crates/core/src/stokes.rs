//! Closed-form rotlet flows and the two controlled rotor/particle systems.
//!
//! A rotlet of strength `γ` at `x_R` induces the planar velocity
//! `u(x) = -γ k̂ × (x - x_R) / (r² + eps²)`, with `k̂ × (a, b) = (-b, a)`.
//! With `eps = 0` this is the bare point-torque singularity and evaluations
//! closer than `r_min` are rejected.
//!
//! State layout (dimension `2(n_r + 1)`):
//! `[x_p, y_p, x_r1 .. x_rn, y_r1 .. y_rn]`.
//!
//! Control layout: velocity control is `[γ_1 .. γ_n, v_x1 .. v_xn, v_y1 .. v_yn]`,
//! torque-only control is `[γ_1 .. γ_n]`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm_squared(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// `k̂ × self` for the out-of-plane unit vector.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Blob radius and singularity guard shared by every rotlet evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// Blob regularization; `0` gives the exact rotlet.
    pub eps: f64,
    /// Minimum admissible evaluation distance when `eps == 0`.
    pub r_min: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            eps: 0.0,
            r_min: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotorConfig {
    pub positions: Vec<Vec2>,
    pub strengths: Vec<f64>,
}

impl RotorConfig {
    pub fn new(positions: Vec<Vec2>, strengths: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("at least one rotor is required".into()));
        }
        if positions.len() != strengths.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rotor positions but {} strengths",
                positions.len(),
                strengths.len()
            )));
        }
        Ok(Self {
            positions,
            strengths,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rotors evenly spaced on a circle, numbered counterclockwise starting
    /// from the rotor directly to the right of `center`.
    pub fn ring(center: Vec2, radius: f64, n_rotors: usize) -> Vec<Vec2> {
        (0..n_rotors)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / n_rotors as f64;
                center + Vec2::new(radius * angle.cos(), radius * angle.sin())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlMode {
    /// Rotor strengths and translational velocities are inputs.
    Velocity,
    /// Only strengths are inputs; rotors are advected by the other rotors.
    TorqueOnly,
}

impl ControlMode {
    pub fn control_dim(self, n_rotors: usize) -> usize {
        match self {
            ControlMode::Velocity => 3 * n_rotors,
            ControlMode::TorqueOnly => n_rotors,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub particle: Vec2,
    pub rotor_x: Vec<f64>,
    pub rotor_y: Vec<f64>,
}

impl SystemState {
    pub fn new(particle: Vec2, rotors: &[Vec2]) -> Self {
        Self {
            particle,
            rotor_x: rotors.iter().map(|p| p.x).collect(),
            rotor_y: rotors.iter().map(|p| p.y).collect(),
        }
    }

    pub fn n_rotors(&self) -> usize {
        self.rotor_x.len()
    }

    pub fn dim(&self) -> usize {
        2 * (self.n_rotors() + 1)
    }

    pub fn rotor(&self, i: usize) -> Vec2 {
        Vec2::new(self.rotor_x[i], self.rotor_y[i])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.particle.x);
        v.push(self.particle.y);
        v.extend_from_slice(&self.rotor_x);
        v.extend_from_slice(&self.rotor_y);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() < 4 || flat.len() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "flat state of length {} is not 2(n_r + 1) with n_r >= 1",
                flat.len()
            )));
        }
        let n = flat.len() / 2 - 1;
        Ok(Self {
            particle: Vec2::new(flat[0], flat[1]),
            rotor_x: flat[2..2 + n].to_vec(),
            rotor_y: flat[2 + n..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub mode: ControlMode,
    pub values: Vec<f64>,
}

impl ControlVector {
    pub fn new(mode: ControlMode, values: Vec<f64>) -> Self {
        Self { mode, values }
    }

    pub fn zeros(mode: ControlMode, n_rotors: usize) -> Self {
        Self::new(mode, vec![0.0; mode.control_dim(n_rotors)])
    }

    /// Builds a velocity-mode control from separate strength and velocity lists.
    pub fn velocity(strengths: &[f64], velocities: &[Vec2]) -> Self {
        let mut values = strengths.to_vec();
        values.extend(velocities.iter().map(|v| v.x));
        values.extend(velocities.iter().map(|v| v.y));
        Self::new(ControlMode::Velocity, values)
    }

    fn check(&self, n_rotors: usize) -> Result<()> {
        let expected = self.mode.control_dim(n_rotors);
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{:?} control for {} rotors needs {} entries, got {}",
                self.mode,
                n_rotors,
                expected,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("control contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// Dense rank-3 tensor with row-major `(i, j, k)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: [d0, d1, d2],
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Slice `i` as a `d1 × d2` matrix.
    pub fn slice(&self, i: usize) -> DMatrix<f64> {
        let [_, d1, d2] = self.dims;
        DMatrix::from_fn(d1, d2, |j, k| self.get(i, j, k))
    }

    /// `Σ_i w_i T[i, :, :]`.
    pub fn contract_first(&self, w: &[f64]) -> DMatrix<f64> {
        let [d0, d1, d2] = self.dims;
        assert_eq!(w.len(), d0);
        let mut out = DMatrix::zeros(d1, d2);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for j in 0..d1 {
                for k in 0..d2 {
                    out[(j, k)] += wi * self.get(i, j, k);
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// First and second derivatives of a physical right-hand side `f(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub jac_state: DMatrix<f64>,
    pub jac_control: DMatrix<f64>,
    pub hess_state_state: Tensor3,
    pub hess_control_control: Tensor3,
    pub hess_state_control: Tensor3,
}

impl DerivativeBundle {
    pub fn zeros(n: usize, nc: usize) -> Self {
        Self {
            jac_state: DMatrix::zeros(n, n),
            jac_control: DMatrix::zeros(n, nc),
            hess_state_state: Tensor3::zeros(n, n, n),
            hess_control_control: Tensor3::zeros(n, nc, nc),
            hess_state_control: Tensor3::zeros(n, n, nc),
        }
    }
}

/// A controlled ODE `ẋ = f(x, u)` with analytic derivatives.
pub trait PhysicalModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()>;

    /// Writes `∂f/∂x` and `∂f/∂u` into pre-sized buffers.
    fn jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        jac_state: &mut DMatrix<f64>,
        jac_control: &mut DMatrix<f64>,
    ) -> Result<()>;

    fn derivatives(&self, x: &[f64], u: &[f64]) -> Result<DerivativeBundle>;

    /// `(i, a)` pairs for which `∂f_i/∂x_a` may be nonzero somewhere.
    fn state_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.state_dim();
        (0..n).flat_map(|i| (0..n).map(move |a| (i, a))).collect()
    }
}

/// Kernel `K(d) = (d_y, -d_x) / (|d|² + eps²)` and its derivatives in `d`,
/// so that a rotlet of strength `γ` contributes `γ K(x - x_R)`.
struct Kernel {
    k: [f64; 2],
    dk: [[f64; 2]; 2],
    d2k: [[[f64; 2]; 2]; 2],
}

fn kernel(d: Vec2, params: &FlowParams, second: bool) -> Result<Kernel> {
    let r2 = d.norm_squared();
    if params.eps == 0.0 && r2 < params.r_min * params.r_min {
        return Err(Error::SingularEvaluation {
            distance: r2.sqrt(),
            r_min: params.r_min,
            step: None,
        });
    }
    let s = r2 + params.eps * params.eps;
    let (dx, dy) = (d.x, d.y);
    let inv = 1.0 / s;
    let inv2 = inv * inv;
    let k = [dy * inv, -dx * inv];
    let dk = [
        [-2.0 * dx * dy * inv2, inv - 2.0 * dy * dy * inv2],
        [-inv + 2.0 * dx * dx * inv2, 2.0 * dx * dy * inv2],
    ];
    let mut d2k = [[[0.0; 2]; 2]; 2];
    if second {
        let inv3 = inv2 * inv;
        let kx_xx = -2.0 * dy * inv2 + 8.0 * dx * dx * dy * inv3;
        let kx_xy = -2.0 * dx * inv2 + 8.0 * dx * dy * dy * inv3;
        let kx_yy = -6.0 * dy * inv2 + 8.0 * dy * dy * dy * inv3;
        let ky_xx = 6.0 * dx * inv2 - 8.0 * dx * dx * dx * inv3;
        let ky_xy = 2.0 * dy * inv2 - 8.0 * dx * dx * dy * inv3;
        let ky_yy = 2.0 * dx * inv2 - 8.0 * dx * dy * dy * inv3;
        d2k = [[[kx_xx, kx_xy], [kx_xy, kx_yy]], [[ky_xx, ky_xy], [ky_xy, ky_yy]]];
    }
    Ok(Kernel { k, dk, d2k })
}

pub fn rotlet_velocity(
    eval_point: Vec2,
    rotor_pos: Vec2,
    strength: f64,
    params: &FlowParams,
) -> Result<Vec2> {
    let kern = kernel(eval_point - rotor_pos, params, false)?;
    Ok(Vec2::new(strength * kern.k[0], strength * kern.k[1]))
}

pub fn superposed_velocity(eval_point: Vec2, rotors: &RotorConfig, params: &FlowParams) -> Result<Vec2> {
    rotors
        .positions
        .iter()
        .zip(&rotors.strengths)
        .try_fold(Vec2::ZERO, |acc, (&pos, &g)| {
            Ok(acc + rotlet_velocity(eval_point, pos, g, params)?)
        })
}

/// Rotor/particle system in either control mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotorSystem {
    pub n_rotors: usize,
    pub mode: ControlMode,
    pub params: FlowParams,
}

struct Sink<'a> {
    f: Option<&'a mut [f64]>,
    jx: Option<&'a mut DMatrix<f64>>,
    ju: Option<&'a mut DMatrix<f64>>,
    hxx: Option<&'a mut Tensor3>,
    hxu: Option<&'a mut Tensor3>,
}

impl RotorSystem {
    pub fn new(n_rotors: usize, mode: ControlMode, params: FlowParams) -> Self {
        Self {
            n_rotors,
            mode,
            params,
        }
    }

    #[inline]
    fn rx(&self, i: usize) -> usize {
        2 + i
    }

    #[inline]
    fn ry(&self, i: usize) -> usize {
        2 + self.n_rotors + i
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        let n = self.state_dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, expected {}",
                x.len(),
                n
            )));
        }
        if u.len() != self.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "control has length {}, expected {}",
                u.len(),
                self.control_dim()
            )));
        }
        Ok(())
    }

    /// Adds the influence of rotor `src` (strength index `g`) on the point
    /// stored at state indices `(px, py)`.
    fn interact(
        &self,
        x: &[f64],
        u: &[f64],
        (px, py): (usize, usize),
        src: usize,
        sink: &mut Sink<'_>,
    ) -> Result<()> {
        let (sx, sy) = (self.rx(src), self.ry(src));
        let d = Vec2::new(x[px] - x[sx], x[py] - x[sy]);
        let second = sink.hxx.is_some() || sink.hxu.is_some();
        let kern = kernel(d, &self.params, second)?;
        let g = u[src];
        let rows = [px, py];
        let pcols = [px, py];
        let scols = [sx, sy];
        if let Some(f) = sink.f.as_deref_mut() {
            f[px] += g * kern.k[0];
            f[py] += g * kern.k[1];
        }
        if let Some(jx) = sink.jx.as_deref_mut() {
            for c in 0..2 {
                for e in 0..2 {
                    let v = g * kern.dk[c][e];
                    jx[(rows[c], pcols[e])] += v;
                    jx[(rows[c], scols[e])] -= v;
                }
            }
        }
        if let Some(ju) = sink.ju.as_deref_mut() {
            ju[(px, src)] += kern.k[0];
            ju[(py, src)] += kern.k[1];
        }
        if let Some(hxx) = sink.hxx.as_deref_mut() {
            for c in 0..2 {
                for e in 0..2 {
                    for h in 0..2 {
                        let v = g * kern.d2k[c][e][h];
                        hxx.add(rows[c], pcols[e], pcols[h], v);
                        hxx.add(rows[c], pcols[e], scols[h], -v);
                        hxx.add(rows[c], scols[e], pcols[h], -v);
                        hxx.add(rows[c], scols[e], scols[h], v);
                    }
                }
            }
        }
        if let Some(hxu) = sink.hxu.as_deref_mut() {
            for c in 0..2 {
                for e in 0..2 {
                    let v = kern.dk[c][e];
                    hxu.add(rows[c], pcols[e], src, v);
                    hxu.add(rows[c], scols[e], src, -v);
                }
            }
        }
        Ok(())
    }

    fn evaluate(&self, x: &[f64], u: &[f64], mut sink: Sink<'_>) -> Result<()> {
        self.check_dims(x, u)?;
        let nr = self.n_rotors;
        if let Some(f) = sink.f.as_deref_mut() {
            f.fill(0.0);
        }
        if let Some(jx) = sink.jx.as_deref_mut() {
            jx.fill(0.0);
        }
        if let Some(ju) = sink.ju.as_deref_mut() {
            ju.fill(0.0);
        }
        for i in 0..nr {
            self.interact(x, u, (0, 1), i, &mut sink)?;
        }
        match self.mode {
            ControlMode::Velocity => {
                if let Some(f) = sink.f.as_deref_mut() {
                    for i in 0..nr {
                        f[self.rx(i)] = u[nr + i];
                        f[self.ry(i)] = u[2 * nr + i];
                    }
                }
                if let Some(ju) = sink.ju.as_deref_mut() {
                    for i in 0..nr {
                        ju[(self.rx(i), nr + i)] = 1.0;
                        ju[(self.ry(i), 2 * nr + i)] = 1.0;
                    }
                }
            }
            ControlMode::TorqueOnly => {
                for j in 0..nr {
                    for i in 0..nr {
                        if i != j {
                            self.interact(x, u, (self.rx(j), self.ry(j)), i, &mut sink)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl PhysicalModel for RotorSystem {
    fn state_dim(&self) -> usize {
        2 * (self.n_rotors + 1)
    }

    fn control_dim(&self) -> usize {
        self.mode.control_dim(self.n_rotors)
    }

    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        self.evaluate(
            x,
            u,
            Sink {
                f: Some(out),
                jx: None,
                ju: None,
                hxx: None,
                hxu: None,
            },
        )
    }

    fn jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        jac_state: &mut DMatrix<f64>,
        jac_control: &mut DMatrix<f64>,
    ) -> Result<()> {
        self.evaluate(
            x,
            u,
            Sink {
                f: None,
                jx: Some(jac_state),
                ju: Some(jac_control),
                hxx: None,
                hxu: None,
            },
        )
    }

    fn derivatives(&self, x: &[f64], u: &[f64]) -> Result<DerivativeBundle> {
        let mut b = DerivativeBundle::zeros(self.state_dim(), self.control_dim());
        self.evaluate(
            x,
            u,
            Sink {
                f: None,
                jx: Some(&mut b.jac_state),
                ju: Some(&mut b.jac_control),
                hxx: Some(&mut b.hess_state_state),
                hxu: Some(&mut b.hess_state_control),
            },
        )?;
        Ok(b)
    }

    fn state_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.state_dim();
        let mut pattern: Vec<(usize, usize)> = (0..2).flat_map(|i| (0..n).map(move |a| (i, a))).collect();
        if self.mode == ControlMode::TorqueOnly && self.n_rotors > 1 {
            pattern.extend((2..n).flat_map(|i| (2..n).map(move |a| (i, a))));
        }
        pattern
    }
}

fn system_for(state: &SystemState, u: &ControlVector, params: &FlowParams) -> Result<RotorSystem> {
    if state.rotor_x.len() != state.rotor_y.len() || state.rotor_x.is_empty() {
        return Err(Error::DimensionMismatch(
            "rotor coordinate lists must be nonempty and of equal length".into(),
        ));
    }
    u.check(state.n_rotors())?;
    Ok(RotorSystem::new(state.n_rotors(), u.mode, *params))
}

fn rhs_for(state: &SystemState, u: &ControlVector, params: &FlowParams) -> Result<Vec<f64>> {
    let sys = system_for(state, u, params)?;
    let mut out = vec![0.0; sys.state_dim()];
    sys.rhs(&state.to_flat(), &u.values, &mut out)?;
    Ok(out)
}

/// Right-hand side of the velocity-controlled system in flat state layout.
pub fn velocity_control_rhs(state: &SystemState, u: &ControlVector, params: &FlowParams) -> Result<Vec<f64>> {
    if u.mode != ControlMode::Velocity {
        return Err(Error::InvalidArgument("velocity_control_rhs needs a velocity-mode control".into()));
    }
    rhs_for(state, u, params)
}

/// Right-hand side of the torque-only system; rotors exclude their own field.
pub fn torque_only_rhs(state: &SystemState, u: &ControlVector, params: &FlowParams) -> Result<Vec<f64>> {
    if u.mode != ControlMode::TorqueOnly {
        return Err(Error::InvalidArgument("torque_only_rhs needs a torque-only control".into()));
    }
    rhs_for(state, u, params)
}

pub fn analytic_derivatives(
    state: &SystemState,
    u: &ControlVector,
    params: &FlowParams,
) -> Result<DerivativeBundle> {
    let sys = system_for(state, u, params)?;
    sys.derivatives(&state.to_flat(), &u.values)
}

/// One classical fourth-order Runge-Kutta step of an autonomous rhs.
/// Controls captured by `rhs` are held constant across the step.
pub fn rk4_step<F>(mut rhs: F, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = rhs(x)?;
    let k2 = rhs(&axpy(0.5 * dt, &k1))?;
    let k3 = rhs(&axpy(0.5 * dt, &k2))?;
    let k4 = rhs(&axpy(dt, &k3))?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Linear model `ẋ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl PhysicalModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.state_dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for (a, xa) in x.iter().enumerate() {
                acc += self.a[(i, a)] * xa;
            }
            for (g, ug) in u.iter().enumerate() {
                acc += self.b[(i, g)] * ug;
            }
            *o = acc;
        }
        Ok(())
    }

    fn jacobians(
        &self,
        _x: &[f64],
        _u: &[f64],
        jac_state: &mut DMatrix<f64>,
        jac_control: &mut DMatrix<f64>,
    ) -> Result<()> {
        jac_state.copy_from(&self.a);
        jac_control.copy_from(&self.b);
        Ok(())
    }

    fn derivatives(&self, _x: &[f64], _u: &[f64]) -> Result<DerivativeBundle> {
        let mut b = DerivativeBundle::zeros(self.state_dim(), self.control_dim());
        b.jac_state.copy_from(&self.a);
        b.jac_control.copy_from(&self.b);
        Ok(b)
    }

    fn state_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.state_dim();
        (0..n)
            .flat_map(|i| (0..n).map(move |a| (i, a)))
            .filter(|&(i, a)| self.a[(i, a)] != 0.0)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const P0: FlowParams = FlowParams { eps: 0.0, r_min: 1e-4 };

    #[test]
    fn rotlet_hand_values() {
        let v = rotlet_velocity(Vec2::new(1.0, 0.0), Vec2::ZERO, 1.0, &P0).unwrap();
        assert_eq!(v, Vec2::new(0.0, -1.0));
        let v = rotlet_velocity(Vec2::new(0.0, 2.0), Vec2::ZERO, 1.0, &P0).unwrap();
        assert_eq!(v, Vec2::new(0.5, 0.0));
        let v = rotlet_velocity(Vec2::new(0.3, -0.7), Vec2::new(0.1, 0.2), 0.0, &P0).unwrap();
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn singular_only_without_blob() {
        let err = rotlet_velocity(Vec2::new(1e-6, 0.0), Vec2::ZERO, 1.0, &P0).unwrap_err();
        assert!(err.is_singular());
        let blob = FlowParams { eps: 0.1, r_min: 1e-4 };
        let v = rotlet_velocity(Vec2::ZERO, Vec2::ZERO, 1.0, &blob).unwrap();
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn superposition_examples() {
        let sym = RotorConfig::new(vec![Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)], vec![1.0, 1.0]).unwrap();
        let v = superposed_velocity(Vec2::ZERO, &sym, &P0).unwrap();
        assert_abs_diff_eq!(v.x, 0.0);
        assert_abs_diff_eq!(v.y, 0.0);

        let anti = RotorConfig::new(vec![Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)], vec![1.0, -1.0]).unwrap();
        let v = superposed_velocity(Vec2::ZERO, &anti, &P0).unwrap();
        assert_eq!(v, Vec2::new(0.0, -2.0));

        let single = RotorConfig::new(vec![Vec2::new(0.2, -0.4)], vec![0.7]).unwrap();
        let p = Vec2::new(1.1, 0.3);
        assert_eq!(
            superposed_velocity(p, &single, &P0).unwrap(),
            rotlet_velocity(p, single.positions[0], 0.7, &P0).unwrap()
        );
    }

    #[test]
    fn velocity_mode_examples() {
        let rotors = [Vec2::new(0.0, 0.0), Vec2::new(2.0, 1.0)];
        let state = SystemState::new(Vec2::new(-1.0, 3.0), &rotors);
        let u = ControlVector::velocity(&[0.0, 0.0], &[Vec2::new(1.0, 0.0); 2]);
        let f = velocity_control_rhs(&state, &u, &P0).unwrap();
        assert_eq!(f, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        let state = SystemState::new(Vec2::new(1.0, 0.0), &[Vec2::ZERO]);
        let u = ControlVector::velocity(&[1.0], &[Vec2::ZERO]);
        let f = velocity_control_rhs(&state, &u, &P0).unwrap();
        assert_eq!(f, vec![0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn mode_and_dimension_errors() {
        let state = SystemState::new(Vec2::new(1.0, 0.0), &[Vec2::ZERO]);
        let torque = ControlVector::new(ControlMode::TorqueOnly, vec![1.0]);
        assert!(matches!(
            velocity_control_rhs(&state, &torque, &P0),
            Err(Error::InvalidArgument(_))
        ));
        let short = ControlVector::new(ControlMode::Velocity, vec![1.0]);
        assert!(matches!(
            velocity_control_rhs(&state, &short, &P0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn torque_pair_symmetries() {
        let d = 0.5;
        let state = SystemState::new(Vec2::new(3.0, 3.0), &[Vec2::new(-d, 0.0), Vec2::new(d, 0.0)]);
        let co = torque_only_rhs(&state, &ControlVector::new(ControlMode::TorqueOnly, vec![0.8, 0.8]), &P0).unwrap();
        // rotor 1 velocity (co[2], co[4]), rotor 2 velocity (co[3], co[5])
        assert_abs_diff_eq!(co[2], -co[3], epsilon = 1e-15);
        assert_abs_diff_eq!(co[4], -co[5], epsilon = 1e-15);
        assert_abs_diff_eq!(co[2], 0.0, epsilon = 1e-15);
        assert!(co[4].abs() > 0.0);

        let anti = torque_only_rhs(&state, &ControlVector::new(ControlMode::TorqueOnly, vec![0.8, -0.8]), &P0).unwrap();
        assert_abs_diff_eq!(anti[2], anti[3], epsilon = 1e-15);
        assert_abs_diff_eq!(anti[4], anti[5], epsilon = 1e-15);

        let lone = SystemState::new(Vec2::new(1.0, 1.0), &[Vec2::ZERO]);
        let f = torque_only_rhs(&lone, &ControlVector::new(ControlMode::TorqueOnly, vec![2.0]), &P0).unwrap();
        assert_eq!(&f[2..], &[0.0, 0.0]);
    }

    #[test]
    fn torque_collision_is_singular() {
        let state = SystemState::new(Vec2::new(1.0, 1.0), &[Vec2::ZERO, Vec2::new(1e-5, 0.0)]);
        let err = torque_only_rhs(&state, &ControlVector::new(ControlMode::TorqueOnly, vec![1.0, 1.0]), &P0).unwrap_err();
        assert!(err.is_singular());
    }

    #[test]
    fn control_column_is_unit_kernel() {
        let rotors = [Vec2::new(0.1, 0.2), Vec2::new(-0.5, 0.4)];
        let p = Vec2::new(0.9, -0.3);
        let state = SystemState::new(p, &rotors);
        let u = ControlVector::velocity(&[0.3, -1.2], &[Vec2::new(0.1, 0.2), Vec2::new(-0.3, 0.0)]);
        let b = analytic_derivatives(&state, &u, &P0).unwrap();
        for (i, &r) in rotors.iter().enumerate() {
            let k = rotlet_velocity(p, r, 1.0, &P0).unwrap();
            assert_abs_diff_eq!(b.jac_control[(0, i)], k.x, epsilon = 1e-15);
            assert_abs_diff_eq!(b.jac_control[(1, i)], k.y, epsilon = 1e-15);
        }
        assert_eq!(b.hess_control_control.max_abs(), 0.0);
    }

    #[test]
    fn rk4_trivial_rhs() {
        let x = [1.0, -2.0];
        let y = rk4_step(|_| Ok(vec![0.0, 0.0]), &x, 0.1).unwrap();
        assert_eq!(y, x.to_vec());
        let y = rk4_step(|_| Ok(vec![3.0, -1.0]), &x, 0.1).unwrap();
        assert_abs_diff_eq!(y[0], 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], -2.1, epsilon = 1e-15);
        assert!(rk4_step(|_| Ok(vec![0.0, 0.0]), &x, 0.0).is_err());
    }

    #[test]
    fn ring_numbering_starts_right_of_center() {
        let ring = RotorConfig::ring(Vec2::new(-1.0, -1.0), 0.2, 4);
        assert_abs_diff_eq!(ring[0].x, -0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(ring[0].y, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ring[1].x, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ring[1].y, -0.8, epsilon = 1e-15);
    }

    #[test]
    fn flat_layout_round_trip() {
        let s = SystemState::new(Vec2::new(1.0, 2.0), &[Vec2::new(3.0, 4.0), Vec2::new(5.0, 6.0)]);
        assert_eq!(s.to_flat(), vec![1.0, 2.0, 3.0, 5.0, 4.0, 6.0]);
        assert_eq!(SystemState::from_flat(&s.to_flat()).unwrap(), s);
    }
}
