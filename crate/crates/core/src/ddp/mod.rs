//! Differential dynamic programming on generic discrete-time dynamics.
//!
//! The backward pass builds the local quadratic model of the cost-to-go
//! (`Q_X = l_X + F_Xᵀ V_X'`, `Q_XX = l_XX + F_Xᵀ V_XX' F_X [+ V_X'·F_XX]`, ...),
//! solves for the feedforward `k = -Q_uu⁻¹ Q_u` and gain `K = -Q_uu⁻¹ Q_uX`,
//! and the forward pass line-searches `u + s·k + K (X_new - X)`.

mod derivatives;

pub use derivatives::{
    contract_hessians, discrete_derivatives, gpc_hessians, gpc_jacobian, DiscreteDerivatives, GpcDynamics,
    GpcHessians, SecondOrderTerms,
};

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::cost::CostDerivatives;
use crate::error::{Error, Result};

/// Discrete-time dynamics `X_{t+1} = F(X_t, u_t)` with derivatives.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// `(F_X, F_u)` at `(x, u)`.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
    /// Second-order tensors contracted with `v_x`; `None` if unavailable.
    fn second_order(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _v_x: &DVector<f64>,
    ) -> Result<Option<SecondOrderTerms>> {
        Ok(None)
    }
}

/// Stage and terminal costs with exact derivatives.
pub trait Objective {
    fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal(&self, x: &DVector<f64>) -> f64;
    fn stage_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives;
    fn terminal_derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Drop the dynamics second-order terms (iLQR).
    GaussNewton,
    /// Include `V_X'·F_XX`, `V_X'·F_Xu`, `V_X'·F_uu`.
    FullDdp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpOptions {
    pub max_iters: usize,
    /// Relative cost change below which the solve stops.
    pub cost_tol: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_increase: f64,
    pub reg_decrease: f64,
    pub stepsizes: Vec<f64>,
    /// Fraction of the predicted decrease that a step must realize.
    pub armijo: f64,
    pub hessian_mode: HessianMode,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            cost_tol: 1e-6,
            reg_init: 1e-9,
            reg_min: 1e-9,
            reg_max: 1e9,
            reg_increase: 10.0,
            reg_decrease: 2.0,
            stepsizes: (0..=10).map(|k| 0.5f64.powi(k)).collect(),
            armijo: 1e-4,
            hessian_mode: HessianMode::GaussNewton,
        }
    }
}

impl DdpOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.reg_init, self.reg_min, self.reg_max];
        if positive.iter().any(|v| !(*v > 0.0)) || self.reg_min > self.reg_max {
            return Err(Error::InvalidArgument("regularization bounds must be positive and ordered".into()));
        }
        if !(self.reg_increase > 1.0) || !(self.reg_decrease > 1.0) {
            return Err(Error::InvalidArgument("regularization factors must exceed 1".into()));
        }
        if self.stepsizes.is_empty()
            || self.stepsizes.iter().any(|s| !(*s > 0.0 && *s <= 1.0))
            || self.stepsizes.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::InvalidArgument("stepsizes must be strictly decreasing in (0, 1]".into()));
        }
        if !(self.cost_tol >= 0.0) {
            return Err(Error::InvalidArgument("cost tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `H` states.
    pub states: Vec<DVector<f64>>,
    /// `H - 1` controls.
    pub controls: Vec<DVector<f64>>,
    pub total_cost: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl FeedbackPolicy {
    pub fn zeros(steps: usize, n: usize, nc: usize) -> Self {
        Self {
            feedforward: vec![DVector::zeros(nc); steps],
            gains: vec![DMatrix::zeros(nc, n); steps],
        }
    }
}

/// Local quadratic model of the cost-to-go change at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct QExpansion {
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_uu: DMatrix<f64>,
    pub q_xu: DMatrix<f64>,
}

/// Predicted cost change `s·linear + s²/2·quadratic` for stepsize `s`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExpectedImprovement {
    pub linear: f64,
    pub quadratic: f64,
}

impl ExpectedImprovement {
    /// Predicted decrease (positive when the model expects improvement).
    pub fn decrease(&self, stepsize: f64) -> f64 {
        -(stepsize * self.linear + 0.5 * stepsize * stepsize * self.quadratic)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Total cost of a state/control sequence.
pub fn trajectory_cost<O: Objective>(obj: &O, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
    let stage: f64 = states.iter().zip(controls).map(|(x, u)| obj.stage(x, u)).sum();
    stage + obj.terminal(states.last().expect("trajectory has at least one state"))
}

/// Open-loop rollout from `x0`.
pub fn rollout<D: Dynamics, O: Objective>(
    dynamics: &D,
    obj: &O,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (t, u) in controls.iter().enumerate() {
        let next = dynamics.step(&states[t], u).map_err(|e| e.at_step(t))?;
        states.push(next);
    }
    let total_cost = trajectory_cost(obj, &states, controls);
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        total_cost,
    })
}

/// `Fᵀ V F`, using `F = I + D` with few nonzero rows of `D` when that pays off.
fn congruence(f: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = f.nrows();
    if !f.is_square() || v.shape() != (n, n) {
        return f.tr_mul(&(v * f));
    }
    let rows: Vec<usize> = (0..n)
        .filter(|&r| (0..n).any(|c| f[(r, c)] != if r == c { 1.0 } else { 0.0 }))
        .collect();
    if 2 * rows.len() > n {
        return f.tr_mul(&(v * f));
    }
    let mut delta = f.select_rows(&rows);
    for (k, &r) in rows.iter().enumerate() {
        delta[(k, r)] -= 1.0;
    }
    // V F = V + V[:, S] D
    let vf = v + v.select_columns(&rows) * &delta;
    // Fᵀ (V F) = V F + Dᵀ (V F)[S, :]
    &vf + delta.tr_mul(&vf.select_rows(&rows))
}

/// Assembles the Q-expansion at one step from derivatives and next-step value terms.
pub fn q_expansion(
    l: &CostDerivatives,
    f_x: &DMatrix<f64>,
    f_u: &DMatrix<f64>,
    v_x: &DVector<f64>,
    v_xx: &DMatrix<f64>,
    second: Option<&SecondOrderTerms>,
) -> QExpansion {
    let vxx_fu = v_xx * f_u;
    let q_x = &l.l_x + f_x.tr_mul(v_x);
    let q_u = &l.l_u + f_u.tr_mul(v_x);
    let mut q_xx = &l.l_xx + congruence(f_x, v_xx);
    let mut q_uu = &l.l_uu + f_u.tr_mul(&vxx_fu);
    let mut q_xu = &l.l_xu + f_x.tr_mul(&vxx_fu);
    if let Some(s) = second {
        q_xx += &s.xx;
        q_uu += &s.uu;
        q_xu += &s.xu;
    }
    symmetrize(&mut q_xx);
    symmetrize(&mut q_uu);
    QExpansion {
        q_x,
        q_u,
        q_xx,
        q_uu,
        q_xu,
    }
}

/// Backward value recursion along `traj` with `λ I` added to `Q_uu`.
pub fn backward_pass<D: Dynamics, O: Objective>(
    dynamics: &D,
    obj: &O,
    traj: &Trajectory,
    reg: f64,
    mode: HessianMode,
) -> Result<(FeedbackPolicy, ExpectedImprovement)> {
    let steps = traj.controls.len();
    let n = dynamics.state_dim();
    let nc = dynamics.control_dim();
    let mut policy = FeedbackPolicy::zeros(steps, n, nc);
    let mut expected = ExpectedImprovement::default();
    let (mut v_x, mut v_xx) = obj.terminal_derivatives(&traj.states[steps]);
    for t in (0..steps).rev() {
        let x = &traj.states[t];
        let u = &traj.controls[t];
        let (f_x, f_u) = dynamics.linearize(x, u)?;
        let l = obj.stage_derivatives(x, u);
        let second = match mode {
            HessianMode::GaussNewton => None,
            HessianMode::FullDdp => dynamics.second_order(x, u, &v_x)?,
        };
        let q = q_expansion(&l, &f_x, &f_u, &v_x, &v_xx, second.as_ref());
        let mut q_uu_reg = q.q_uu.clone();
        for g in 0..nc {
            q_uu_reg[(g, g)] += reg;
        }
        let chol = Cholesky::new(q_uu_reg).ok_or(Error::NotPositiveDefinite { step: t })?;
        let k = -chol.solve(&q.q_u);
        let gain = -chol.solve(&q.q_xu.transpose());

        let quu_k = &q.q_uu * &k;
        expected.linear += k.dot(&q.q_u);
        expected.quadratic += k.dot(&quu_k);

        // V_X = Q_X + Kᵀ Q_uu k + Kᵀ Q_u + Q_uX^T k
        v_x = &q.q_x + gain.tr_mul(&quu_k) + gain.tr_mul(&q.q_u) + &q.q_xu * &k;
        // V_XX = Q_XX + Kᵀ Q_uu K + Kᵀ Q_uX + Q_uXᵀ K
        let quu_gain = &q.q_uu * &gain;
        let xu_gain = &q.q_xu * &gain;
        v_xx = &q.q_xx + gain.tr_mul(&quu_gain) + xu_gain.transpose() + &xu_gain;
        symmetrize(&mut v_xx);

        policy.feedforward[t] = k;
        policy.gains[t] = gain;
    }
    Ok((policy, expected))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOutcome {
    Accepted { trajectory: Trajectory, stepsize: f64 },
    NoImprovement,
}

/// Line search over `stepsizes`; the first step realizing at least `armijo`
/// times the predicted decrease (and a strict decrease) is accepted.
pub fn forward_pass<D: Dynamics, O: Objective>(
    dynamics: &D,
    obj: &O,
    traj: &Trajectory,
    policy: &FeedbackPolicy,
    expected: &ExpectedImprovement,
    stepsizes: &[f64],
    armijo: f64,
) -> Result<ForwardOutcome> {
    let steps = traj.controls.len();
    'search: for &alpha in stepsizes {
        let mut states = Vec::with_capacity(steps + 1);
        let mut controls = Vec::with_capacity(steps);
        states.push(traj.states[0].clone());
        for t in 0..steps {
            let dx = &states[t] - &traj.states[t];
            let u = &traj.controls[t] + alpha * &policy.feedforward[t] + &policy.gains[t] * dx;
            match dynamics.step(&states[t], &u) {
                Ok(next) if next.iter().all(|v| v.is_finite()) => states.push(next),
                Ok(_) => continue 'search,
                Err(e) if e.is_singular() => continue 'search,
                Err(e) => return Err(e),
            }
            controls.push(u);
        }
        let cost = trajectory_cost(obj, &states, &controls);
        let actual = traj.total_cost - cost;
        if cost.is_finite() && actual > 0.0 && actual >= armijo * expected.decrease(alpha) {
            return Ok(ForwardOutcome::Accepted {
                trajectory: Trajectory {
                    states,
                    controls,
                    total_cost: cost,
                },
                stepsize: alpha,
            });
        }
    }
    Ok(ForwardOutcome::NoImprovement)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Relative cost change (or predicted change) fell below the tolerance.
    Converged,
    MaxItersReached,
    /// Regularization hit its ceiling without finding a descent step.
    RegularizationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub reason: StopReason,
    pub iterations: usize,
    pub accepted: usize,
    pub final_reg: f64,
    pub final_cost: f64,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.reason == StopReason::Converged
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpSolution {
    pub trajectory: Trajectory,
    pub policy: FeedbackPolicy,
    /// Initial cost followed by the cost after every accepted iteration.
    pub cost_history: Vec<f64>,
    pub report: ConvergenceReport,
}

/// Iterates backward and forward passes from the nominal controls `u_init`.
pub fn solve<D: Dynamics, O: Objective>(
    dynamics: &D,
    obj: &O,
    x0: &DVector<f64>,
    u_init: Vec<DVector<f64>>,
    options: &DdpOptions,
) -> Result<DdpSolution> {
    solve_with_observer(dynamics, obj, x0, u_init, options, |_, _| {})
}

/// As [`solve`], calling `observer(iteration, cost)` after every accepted step.
pub fn solve_with_observer<D, O, F>(
    dynamics: &D,
    obj: &O,
    x0: &DVector<f64>,
    u_init: Vec<DVector<f64>>,
    options: &DdpOptions,
    mut observer: F,
) -> Result<DdpSolution>
where
    D: Dynamics,
    O: Objective,
    F: FnMut(usize, f64),
{
    options.validate()?;
    if u_init.is_empty() {
        return Err(Error::InvalidArgument("horizon must contain at least one control".into()));
    }
    let n = dynamics.state_dim();
    let nc = dynamics.control_dim();
    let mut traj = rollout(dynamics, obj, x0, &u_init)?;
    let mut policy = FeedbackPolicy::zeros(u_init.len(), n, nc);
    let mut history = vec![traj.total_cost];
    let mut reg = options.reg_init;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut reason = StopReason::MaxItersReached;

    while iterations < options.max_iters {
        iterations += 1;
        let backward = loop {
            match backward_pass(dynamics, obj, &traj, reg, options.hessian_mode) {
                Ok(out) => break Some(out),
                Err(Error::NotPositiveDefinite { .. }) => {
                    reg *= options.reg_increase;
                    if reg > options.reg_max {
                        break None;
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let Some((new_policy, expected)) = backward else {
            reason = StopReason::RegularizationLimit;
            break;
        };
        let scale = traj.total_cost.abs().max(f64::MIN_POSITIVE);
        if expected.decrease(1.0) <= options.cost_tol * scale * 1e-3 {
            policy = new_policy;
            reason = StopReason::Converged;
            break;
        }
        match forward_pass(dynamics, obj, &traj, &new_policy, &expected, &options.stepsizes, options.armijo)? {
            ForwardOutcome::Accepted { trajectory, .. } => {
                let rel = (traj.total_cost - trajectory.total_cost) / scale;
                debug_assert!(trajectory.total_cost < traj.total_cost);
                traj = trajectory;
                policy = new_policy;
                history.push(traj.total_cost);
                accepted += 1;
                observer(iterations, traj.total_cost);
                reg = (reg / options.reg_decrease).max(options.reg_min);
                if rel < options.cost_tol {
                    reason = StopReason::Converged;
                    break;
                }
            }
            ForwardOutcome::NoImprovement => {
                reg *= options.reg_increase;
                if reg > options.reg_max {
                    reason = StopReason::RegularizationLimit;
                    break;
                }
            }
        }
    }

    let report = ConvergenceReport {
        reason,
        iterations,
        accepted,
        final_reg: reg,
        final_cost: traj.total_cost,
    };
    Ok(DdpSolution {
        trajectory: traj,
        policy,
        cost_history: history,
        report,
    })
}
