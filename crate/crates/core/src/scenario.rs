//! Moment-steering problem setup: initial distribution, rotor ring, weights and solve.

use nalgebra::{DMatrix, DVector};

use crate::cost::{
    build_scenario_weights, cost_gradients, moment_output, stage_cost, terminal_cost, terminal_gradients,
    CostDerivatives, CostWeights, MomentOutput, MomentTarget,
};
use crate::ddp::{self, DdpOptions, DdpSolution, Dynamics, GpcDynamics, Objective};
use crate::error::{Error, Result};
use crate::gpc::{build_basis, build_quadrature, project_gaussian_initial, GpcState, GpcSystem, HermiteBasis};
use crate::stokes::{ControlMode, ControlVector, FlowParams, RotorConfig, RotorSystem, Vec2};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub mode: ControlMode,
    pub n_rotors: usize,
    pub t_final: f64,
    pub dt: f64,
    pub initial_mean: [f64; 2],
    /// Initial particle covariance is this value times the identity.
    pub initial_cov_scale: f64,
    pub target_mean: [f64; 2],
    pub target_var: [f64; 2],
    pub ring_radius: f64,
    pub gpc_degree: usize,
    pub quad_points: usize,
    /// Control-weight scaling used in torque mode.
    pub alpha: f64,
    pub flow: FlowParams,
    /// Replaces the preset weights when set.
    pub weights: Option<CostWeights>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            mode: ControlMode::Velocity,
            n_rotors: 4,
            t_final: 8.0,
            dt: 0.01,
            initial_mean: [1.0, 1.0],
            initial_cov_scale: 0.025,
            target_mean: [-1.0, -1.0],
            target_var: [0.0, 0.0],
            ring_radius: 0.2,
            gpc_degree: 3,
            quad_points: 8,
            alpha: 1.0 / 3.0,
            flow: FlowParams::default(),
            weights: None,
        }
    }
}

impl ScenarioSpec {
    /// Number of control steps `t_f / dt`, which must be integral within 1e-9.
    pub fn control_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_final > 0.0) || !self.dt.is_finite() || !self.t_final.is_finite() {
            return Err(Error::InvalidArgument("t_f and dt must be positive".into()));
        }
        let ratio = self.t_final / self.dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "t_f = {} is not an integer multiple of dt = {}",
                self.t_final, self.dt
            )));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.control_steps()?;
        match self.mode {
            ControlMode::Velocity if self.n_rotors < 1 => {
                return Err(Error::InvalidArgument("at least one rotor is required".into()))
            }
            ControlMode::TorqueOnly if self.n_rotors < 2 => {
                return Err(Error::InvalidArgument(
                    "torque-only control needs at least two rotors to generate translational motion".into(),
                ))
            }
            _ => {}
        }
        if !(self.initial_cov_scale >= 0.0) || self.target_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("variances must be >= 0".into()));
        }
        if !(self.ring_radius > 0.0) {
            return Err(Error::InvalidArgument("rotor ring radius must be positive".into()));
        }
        if self.quad_points < 1 {
            return Err(Error::InvalidArgument("quadrature needs at least one point".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if self.flow.eps < 0.0 || !(self.flow.r_min >= 0.0) {
            return Err(Error::InvalidArgument("eps and r_min must be >= 0".into()));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
            if w.control.len() != self.mode.control_dim(self.n_rotors) {
                return Err(Error::DimensionMismatch(format!(
                    "{} control weights for control dimension {}",
                    w.control.len(),
                    self.mode.control_dim(self.n_rotors)
                )));
            }
        }
        Ok(())
    }

    /// Rotor starting positions on a ring around the target mean, counterclockwise
    /// from the rotor directly to the right of the target.
    pub fn rotor_positions(&self) -> Vec<Vec2> {
        let center = Vec2::new(self.target_mean[0], self.target_mean[1]);
        RotorConfig::ring(center, self.ring_radius, self.n_rotors)
    }

    pub fn cost_weights(&self) -> CostWeights {
        self.weights
            .clone()
            .unwrap_or_else(|| build_scenario_weights(self.mode, self.n_rotors, self.dt, self.alpha))
    }

    pub fn target(&self) -> MomentTarget {
        MomentTarget::new(self.target_mean, self.target_var)
    }
}

/// Moment-tracking objective on flat coefficient vectors.
#[derive(Debug, Clone)]
pub struct MomentObjective {
    pub basis: HermiteBasis,
    pub weights: CostWeights,
    pub target: MomentTarget,
}

impl MomentObjective {
    fn state(&self, x: &DVector<f64>) -> GpcState {
        GpcState::from_flat(x.as_slice(), self.basis.len()).expect("flat state matches the basis")
    }
}

impl Objective for MomentObjective {
    fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        stage_cost(&self.state(x), u.as_slice(), &self.basis, &self.weights, &self.target)
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        terminal_cost(&self.state(x), &self.basis, &self.weights, &self.target)
    }

    fn stage_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        cost_gradients(&self.state(x), u.as_slice(), &self.basis, &self.weights, &self.target)
    }

    fn terminal_derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        terminal_gradients(&self.state(x), &self.basis, &self.weights, &self.target)
    }
}

/// A fully assembled problem ready to solve.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub dynamics: GpcDynamics<RotorSystem>,
    pub objective: MomentObjective,
    pub initial: GpcState,
    pub steps: usize,
}

impl Scenario {
    pub fn build(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let steps = spec.control_steps()?;
        let basis = build_basis(2, spec.gpc_degree);
        let quad = build_quadrature(2, spec.quad_points);
        let model = RotorSystem::new(spec.n_rotors, spec.mode, spec.flow);
        let system = GpcSystem::new(model, basis.clone(), quad)?;
        let rotors = spec.rotor_positions();
        let mut deterministic: Vec<f64> = rotors.iter().map(|r| r.x).collect();
        deterministic.extend(rotors.iter().map(|r| r.y));
        let sd = spec.initial_cov_scale.sqrt();
        let initial = project_gaussian_initial(&spec.initial_mean, &[sd, sd], &deterministic, &basis)?;
        let objective = MomentObjective {
            basis,
            weights: spec.cost_weights(),
            target: spec.target(),
        };
        let dynamics = GpcDynamics::new(system, spec.dt)?;
        Ok(Self {
            spec,
            dynamics,
            objective,
            initial,
            steps,
        })
    }

    pub fn basis(&self) -> &HermiteBasis {
        &self.objective.basis
    }

    pub fn zero_controls(&self) -> Vec<DVector<f64>> {
        vec![DVector::zeros(self.dynamics.control_dim()); self.steps]
    }

    pub fn solve(&self, options: &DdpOptions) -> Result<ScenarioSolution> {
        self.solve_with_observer(options, |_, _| {})
    }

    pub fn solve_with_observer<F: FnMut(usize, f64)>(
        &self,
        options: &DdpOptions,
        observer: F,
    ) -> Result<ScenarioSolution> {
        let x0 = self.initial.to_flat();
        let ddp = ddp::solve_with_observer(&self.dynamics, &self.objective, &x0, self.zero_controls(), options, observer)?;
        Ok(ScenarioSolution {
            mode: self.spec.mode,
            n_basis: self.basis().len(),
            ddp,
        })
    }

    /// Open-loop rollout and cost of a given control sequence.
    pub fn evaluate(&self, controls: &[DVector<f64>]) -> Result<ScenarioSolution> {
        let traj = ddp::rollout(&self.dynamics, &self.objective, &self.initial.to_flat(), controls)?;
        let cost = traj.total_cost;
        let n = self.dynamics.state_dim();
        let nc = self.dynamics.control_dim();
        Ok(ScenarioSolution {
            mode: self.spec.mode,
            n_basis: self.basis().len(),
            ddp: DdpSolution {
                policy: ddp::FeedbackPolicy::zeros(controls.len(), n, nc),
                cost_history: vec![cost],
                report: ddp::ConvergenceReport {
                    reason: ddp::StopReason::MaxItersReached,
                    iterations: 0,
                    accepted: 0,
                    final_reg: 0.0,
                    final_cost: cost,
                },
                trajectory: traj,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSolution {
    pub mode: ControlMode,
    pub n_basis: usize,
    pub ddp: DdpSolution,
}

impl ScenarioSolution {
    pub fn states(&self) -> Vec<GpcState> {
        self.ddp
            .trajectory
            .states
            .iter()
            .map(|x| GpcState::from_flat(x.as_slice(), self.n_basis).expect("flat state matches the basis"))
            .collect()
    }

    pub fn controls(&self) -> Vec<ControlVector> {
        self.ddp
            .trajectory
            .controls
            .iter()
            .map(|u| ControlVector::new(self.mode, u.iter().copied().collect()))
            .collect()
    }

    pub fn moment_history(&self, basis: &HermiteBasis) -> Vec<MomentOutput> {
        self.states().iter().map(|x| moment_output(x, basis)).collect()
    }

    pub fn total_cost(&self) -> f64 {
        self.ddp.trajectory.total_cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_must_be_integral() {
        let spec = ScenarioSpec::default();
        assert_eq!(spec.control_steps().unwrap(), 800);
        let bad = ScenarioSpec {
            t_final: 8.005,
            ..ScenarioSpec::default()
        };
        assert!(bad.control_steps().is_err());
    }

    #[test]
    fn torque_mode_needs_two_rotors() {
        let spec = ScenarioSpec {
            mode: ControlMode::TorqueOnly,
            n_rotors: 1,
            ..ScenarioSpec::default()
        };
        assert!(Scenario::build(spec).is_err());
    }

    #[test]
    fn initial_state_layout() {
        let s = Scenario::build(ScenarioSpec {
            n_rotors: 2,
            t_final: 0.1,
            ..ScenarioSpec::default()
        })
        .unwrap();
        assert_eq!(s.steps, 10);
        let c = &s.initial.coeffs;
        assert_eq!(c.shape(), (6, 10));
        approx::assert_abs_diff_eq!(c[(2, 0)], -0.8, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(c[(3, 0)], -1.2, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(c[(4, 0)], -1.0, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(c[(5, 0)], -1.0, epsilon = 1e-15);
        assert_eq!(s.dynamics.control_dim(), 6);
    }
}
