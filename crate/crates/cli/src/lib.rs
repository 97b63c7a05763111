//! Command-line driver: configuration, orchestration and artifact output for
//! rotor-based moment steering runs.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::FtleOverrides;
use crate::config::{HessianName, ModeName, RunConfig};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rotorflow", version, about = "Optimal rotor schedules for steering particle distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one scenario and write its trajectory, controls and moments.
    Optimize {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Optimize and validate every (t_final, n_rotors) cell.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',')]
        sweep_n_rotors: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_t_final: Option<Vec<f64>>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Monte Carlo check of a solved run's stored controls.
    Validate {
        run: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Forward and backward FTLE fields of a solved run.
    Ftle {
        run: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        t0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        resolution: Option<usize>,
        /// `x_min,x_max,y_min,y_max`
        #[arg(long, value_delimiter = ',', num_args = 4, allow_hyphen_values = true)]
        domain: Option<Vec<f64>>,
    },
    /// Open-loop rollout of a control file.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        controls: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

/// Flags that override the configuration file, one per scenario field.
#[derive(Debug, Default, Args)]
pub struct ScenarioArgs {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub n_rotors: Option<usize>,
    #[arg(long)]
    pub t_final: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    pub initial_mean: Option<Vec<f64>>,
    #[arg(long)]
    pub initial_cov_scale: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    pub target_mean: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub target_var: Option<Vec<f64>>,
    #[arg(long)]
    pub rotor_ring_radius: Option<f64>,
    #[arg(long)]
    pub gpc_degree: Option<usize>,
    #[arg(long)]
    pub quad_points: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub r_min: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub cost_tol: Option<f64>,
    #[arg(long, value_enum)]
    pub hessian: Option<HessianArg>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Velocity,
    Torque,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum HessianArg {
    GaussNewton,
    Full,
}

fn pair(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

impl ScenarioArgs {
    /// Reads the configuration file, if any, and applies the flag overrides.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let s = &mut cfg.scenario;
        if let Some(m) = self.mode {
            s.mode = match m {
                ModeArg::Velocity => ModeName::Velocity,
                ModeArg::Torque => ModeName::Torque,
            };
        }
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(s.n_rotors, self.n_rotors);
        set!(s.t_final, self.t_final);
        set!(s.dt, self.dt);
        set!(s.initial_mean, self.initial_mean.as_deref().map(pair));
        set!(s.initial_cov_scale, self.initial_cov_scale);
        set!(s.target_mean, self.target_mean.as_deref().map(pair));
        set!(s.target_var, self.target_var.as_deref().map(pair));
        set!(s.rotor_ring_radius, self.rotor_ring_radius);
        set!(s.gpc_degree, self.gpc_degree);
        set!(s.quad_points, self.quad_points);
        set!(s.alpha, self.alpha);
        set!(s.eps, self.eps);
        set!(s.r_min, self.r_min);
        set!(cfg.ddp.max_iters, self.max_iters);
        set!(cfg.ddp.cost_tol, self.cost_tol);
        if let Some(h) = self.hessian {
            cfg.ddp.hessian = match h {
                HessianArg::GaussNewton => HessianName::GaussNewton,
                HessianArg::Full => HessianName::Full,
            };
        }
        set!(cfg.monte_carlo.particles, self.particles);
        set!(cfg.monte_carlo.seed, self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Executes one subcommand, printing a short report to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Optimize { scenario, out, quiet } => {
            let cfg = scenario.resolve()?;
            let outcome = commands::cmd_optimize(&cfg, &out, !quiet)?;
            let s = &outcome.summary;
            println!(
                "{}: cost {} after {} iterations, terminal moments {:?}",
                s.stop_reason, s.surrogate_cost, s.iterations, s.terminal_moments
            );
            if !s.converged {
                return Err(CliError::Numerical(format!(
                    "optimizer stopped without converging ({})",
                    s.stop_reason
                )));
            }
        }
        Command::Sweep {
            scenario,
            sweep_n_rotors,
            sweep_t_final,
            workers,
            out,
            quiet,
        } => {
            let mut cfg = scenario.resolve()?;
            if let Some(n) = sweep_n_rotors {
                cfg.sweep.n_rotors = n;
            }
            if let Some(t) = sweep_t_final {
                cfg.sweep.t_final = t;
            }
            if let Some(w) = workers {
                cfg.sweep.workers = w;
            }
            let cells = commands::cmd_sweep(&cfg, &out, !quiet)?;
            let failed = cells.iter().filter(|c| !c.succeeded()).count();
            println!("{} cells, {failed} failed; table in {}", cells.len(), out.join("cost_table.csv").display());
        }
        Command::Validate {
            run,
            particles,
            seed,
            bootstrap,
        } => {
            let r = commands::cmd_validate(&run, particles, seed, bootstrap)?;
            println!(
                "true cost {} (se {}), surrogate cost {}, first-half mean gap {:?}, flagged {}",
                r.true_cost,
                r.standard_error,
                r.surrogate_cost,
                r.max_mean_discrepancy_first_half,
                r.flagged_particles
            );
        }
        Command::Ftle {
            run,
            t0,
            tau,
            resolution,
            domain,
        } => {
            let overrides = FtleOverrides {
                t0,
                tau,
                resolution,
                domain: domain.map(|d| [d[0], d[1], d[2], d[3]]),
            };
            let (r, _) = commands::cmd_ftle(&run, overrides)?;
            println!(
                "forward max {} (p95 {}), backward max {} (p95 {}), ridge-to-contour distance {}",
                r.forward_max, r.forward_p95, r.backward_max, r.backward_p95, r.ridge_to_contour_distance
            );
        }
        Command::Simulate { scenario, controls, out } => {
            let cfg = scenario.resolve()?;
            let outcome = commands::cmd_simulate(&cfg, &controls, &out)?;
            println!(
                "cost {}, terminal moments {:?}",
                outcome.summary.surrogate_cost, outcome.summary.terminal_moments
            );
        }
    }
    Ok(())
}
