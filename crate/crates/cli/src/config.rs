//! TOML run configuration. Every section and key is optional; missing values
//! take the defaults of the velocity-control scenario. Unknown keys are errors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rotorflow::cost::{CostWeights, N_MOMENTS};
use rotorflow::ddp::{DdpOptions, HessianMode};
use rotorflow::ftle::{FtleGridSpec, IntegrationOptions};
use rotorflow::scenario::ScenarioSpec;
use rotorflow::stokes::{ControlMode, FlowParams};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Velocity,
    Torque,
}

impl From<ModeName> for ControlMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Velocity => ControlMode::Velocity,
            ModeName::Torque => ControlMode::TorqueOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub mode: ModeName,
    pub n_rotors: usize,
    pub t_final: f64,
    pub dt: f64,
    pub initial_mean: [f64; 2],
    pub initial_cov_scale: f64,
    pub target_mean: [f64; 2],
    pub target_var: [f64; 2],
    pub rotor_ring_radius: f64,
    pub gpc_degree: usize,
    pub quad_points: usize,
    pub alpha: f64,
    pub eps: f64,
    pub r_min: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        Self {
            mode: ModeName::Velocity,
            n_rotors: s.n_rotors,
            t_final: s.t_final,
            dt: s.dt,
            initial_mean: s.initial_mean,
            initial_cov_scale: s.initial_cov_scale,
            target_mean: s.target_mean,
            target_var: s.target_var,
            rotor_ring_radius: s.ring_radius,
            gpc_degree: s.gpc_degree,
            quad_points: s.quad_points,
            alpha: s.alpha,
            eps: s.flow.eps,
            r_min: s.flow.r_min,
        }
    }
}

/// Diagonal weight overrides in per-unit-time form; they are multiplied by `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub stage: [f64; N_MOMENTS],
    pub terminal: [f64; N_MOMENTS],
    pub control: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianName {
    GaussNewton,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpSection {
    pub max_iters: usize,
    pub cost_tol: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_increase: f64,
    pub reg_decrease: f64,
    /// Stepsizes are `1, 1/2, ..., 2^-min_stepsize_exponent`.
    pub min_stepsize_exponent: u32,
    pub hessian: HessianName,
}

impl Default for DdpSection {
    fn default() -> Self {
        let d = DdpOptions::default();
        Self {
            max_iters: d.max_iters,
            cost_tol: d.cost_tol,
            reg_init: d.reg_init,
            reg_min: d.reg_min,
            reg_max: d.reg_max,
            reg_increase: d.reg_increase,
            reg_decrease: d.reg_decrease,
            min_stepsize_exponent: 10,
            hessian: HessianName::GaussNewton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub particles: usize,
    pub seed: u64,
    /// Poisson bootstrap replicates for the true-cost standard error.
    pub bootstrap: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            particles: 10_000,
            seed: 1,
            bootstrap: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtleSection {
    pub t0: f64,
    pub tau: f64,
    pub resolution: usize,
    pub domain: [f64; 4],
    pub escape_factor: f64,
}

impl Default for FtleSection {
    fn default() -> Self {
        Self {
            t0: 1.5,
            tau: 1.5,
            resolution: 250,
            domain: [-2.0, 2.0, -2.0, 2.0],
            escape_factor: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n_rotors: Vec<usize>,
    pub t_final: Vec<f64>,
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_rotors: vec![1, 2, 3, 4, 5, 6],
            t_final: (1..=10).map(f64::from).collect(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsSection>,
    pub ddp: DdpSection,
    pub monte_carlo: MonteCarloSection,
    pub ftle: FtleSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        let s = &self.scenario;
        let mode: ControlMode = s.mode.into();
        let weights = self.weights.as_ref().map(|w| CostWeights {
            stage: w.stage.map(|v| v * s.dt),
            terminal: w.terminal.map(|v| v * s.dt),
            control: w.control.iter().map(|v| v * s.dt).collect(),
            alpha: if mode == ControlMode::TorqueOnly { s.alpha } else { 1.0 },
        });
        ScenarioSpec {
            mode,
            n_rotors: s.n_rotors,
            t_final: s.t_final,
            dt: s.dt,
            initial_mean: s.initial_mean,
            initial_cov_scale: s.initial_cov_scale,
            target_mean: s.target_mean,
            target_var: s.target_var,
            ring_radius: s.rotor_ring_radius,
            gpc_degree: s.gpc_degree,
            quad_points: s.quad_points,
            alpha: s.alpha,
            flow: FlowParams {
                eps: s.eps,
                r_min: s.r_min,
            },
            weights,
        }
    }

    pub fn ddp_options(&self) -> DdpOptions {
        let d = &self.ddp;
        DdpOptions {
            max_iters: d.max_iters,
            cost_tol: d.cost_tol,
            reg_init: d.reg_init,
            reg_min: d.reg_min,
            reg_max: d.reg_max,
            reg_increase: d.reg_increase,
            reg_decrease: d.reg_decrease,
            stepsizes: (0..=d.min_stepsize_exponent as i32).map(|k| 0.5f64.powi(k)).collect(),
            armijo: 1e-4,
            hessian_mode: match d.hessian {
                HessianName::GaussNewton => HessianMode::GaussNewton,
                HessianName::Full => HessianMode::FullDdp,
            },
        }
    }

    pub fn ftle_grid(&self) -> FtleGridSpec {
        FtleGridSpec {
            domain: self.ftle.domain,
            nx: self.ftle.resolution,
            ny: self.ftle.resolution,
            t0: self.ftle.t0,
            tau: self.ftle.tau,
        }
    }

    pub fn ftle_options(&self) -> IntegrationOptions {
        IntegrationOptions {
            dt: self.scenario.dt,
            escape_factor: self.ftle.escape_factor,
        }
    }

    /// Checks every section, naming the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, msg: String| CliError::Config(format!("{name}: {msg}"));
        self.scenario_spec()
            .validate()
            .map_err(|e| field("scenario", e.to_string()))?;
        if self.ddp.max_iters == 0 {
            return Err(field("ddp.max_iters", "must be at least 1".into()));
        }
        self.ddp_options()
            .validate()
            .map_err(|e| field("ddp", e.to_string()))?;
        if self.monte_carlo.particles == 0 {
            return Err(field("monte_carlo.particles", "must be at least 1".into()));
        }
        let grid = self.ftle_grid();
        grid.validate().map_err(|e| field("ftle", e.to_string()))?;
        if !(self.ftle.escape_factor >= 1.0) {
            return Err(field("ftle.escape_factor", "must be >= 1".into()));
        }
        if self.sweep.n_rotors.is_empty() || self.sweep.t_final.is_empty() {
            return Err(field("sweep", "n_rotors and t_final lists must be nonempty".into()));
        }
        if self.sweep.workers == 0 {
            return Err(field("sweep.workers", "must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.scenario.n_rotors, 4);
        assert_eq!(cfg.scenario_spec(), ScenarioSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[scenario]\nn_rotor = 3\n").unwrap_err();
        assert!(err.to_string().contains("n_rotor"), "{err}");
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.scenario.mode = ModeName::Torque;
        cfg.weights = Some(WeightsSection {
            stage: [0.1; 4],
            terminal: [500.0; 4],
            control: vec![1.0; 4],
        });
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn weights_scale_by_dt() {
        let cfg = RunConfig::from_toml(
            "[weights]\nstage = [1.0, 1.0, 1.0, 1.0]\nterminal = [2.0, 2.0, 2.0, 2.0]\ncontrol = [1,1,1,1,1,1,1,1,1,1,1,1]\n",
        )
        .unwrap();
        let w = cfg.scenario_spec().cost_weights();
        assert_eq!(w.stage, [0.01; 4]);
        assert_eq!(w.terminal, [0.02; 4]);
        assert_eq!(w.control.len(), 12);
    }

    #[test]
    fn validation_messages_name_fields() {
        let err = RunConfig::from_toml("[scenario]\nt_final = 8.005\n").unwrap_err();
        assert!(err.to_string().contains("not an integer multiple"), "{err}");
        let err = RunConfig::from_toml("[scenario]\nmode = \"torque\"\nn_rotors = 1\n").unwrap_err();
        assert!(err.to_string().contains("at least two rotors"), "{err}");
        let err = RunConfig::from_toml("[monte_carlo]\nparticles = 0\n").unwrap_err();
        assert!(err.to_string().contains("monte_carlo.particles"), "{err}");
    }
}
