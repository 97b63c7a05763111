//! Subcommand implementations. Each writes into a run directory and returns
//! its in-memory results so callers can inspect them without re-reading files.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DVector;
use serde::Serialize;

use rotorflow::cost::MomentOutput;
use rotorflow::ftle::{self, FtleAnalysis, InitialDensity};
use rotorflow::monte_carlo::{sample_initial, simulate_moments, true_cost_with_error, MonteCarloRun};
use rotorflow::scenario::{Scenario, ScenarioSolution};
use rotorflow::stokes::{ControlMode, ControlVector, Vec2};

use crate::artifacts::{csv_row, parse_table, read_artifact, to_json, RunDir};
use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const CONTROLS_FILE: &str = "controls.csv";

fn time(k: usize, dt: f64) -> f64 {
    k as f64 * dt
}

fn state_names(n_rotors: usize) -> Vec<String> {
    let mut names = vec!["x_p".to_string(), "y_p".to_string()];
    names.extend((1..=n_rotors).map(|i| format!("x_r{i}")));
    names.extend((1..=n_rotors).map(|i| format!("y_r{i}")));
    names
}

fn control_names(mode: ControlMode, n_rotors: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=n_rotors).map(|i| format!("gamma_{i}")).collect();
    if mode == ControlMode::Velocity {
        names.extend((1..=n_rotors).map(|i| format!("vx_{i}")));
        names.extend((1..=n_rotors).map(|i| format!("vy_{i}")));
    }
    names
}

fn header(names: impl IntoIterator<Item = String>) -> String {
    let mut h = String::from("t");
    for n in names {
        h.push(',');
        h.push_str(&n);
    }
    h.push('\n');
    h
}

pub fn trajectory_csv(scenario: &Scenario, solution: &ScenarioSolution) -> String {
    let k1 = scenario.basis().len();
    let cols = state_names(scenario.spec.n_rotors)
        .into_iter()
        .flat_map(|n| (0..k1).map(move |j| format!("{n}_c{j}")));
    let mut out = header(cols);
    for (k, x) in solution.ddp.trajectory.states.iter().enumerate() {
        out.push_str(&csv_row(time(k, scenario.spec.dt), x.iter().copied()));
    }
    out
}

pub fn controls_csv(scenario: &Scenario, controls: &[DVector<f64>]) -> String {
    let mut out = header(control_names(scenario.spec.mode, scenario.spec.n_rotors));
    for (k, u) in controls.iter().enumerate() {
        out.push_str(&csv_row(time(k, scenario.spec.dt), u.iter().copied()));
    }
    out
}

fn moment_rows(out: &mut String, dt: f64, rows: impl Iterator<Item = [f64; 4]>, source: &str) {
    for (k, y) in rows.enumerate() {
        let mut line = time(k, dt).to_string();
        for (c, v) in y.iter().enumerate() {
            line.push(',');
            if c >= 2 && v.is_nan() {
                line.push_str("undefined");
            } else {
                line.push_str(&v.to_string());
            }
        }
        out.push_str(&line);
        out.push(',');
        out.push_str(source);
        out.push('\n');
    }
}

const MOMENTS_HEADER: &str = "t,mu1,mu2,s11,s22,source\n";

fn surrogate_moments(scenario: &Scenario, solution: &ScenarioSolution) -> Vec<MomentOutput> {
    solution.moment_history(scenario.basis())
}

/// Loads stored controls, checking their shape against the scenario.
pub fn load_controls(text: &str, source: &str, scenario: &Scenario) -> Result<Vec<DVector<f64>>, CliError> {
    let rows = parse_table(text, source)?;
    let nc = scenario.spec.mode.control_dim(scenario.spec.n_rotors);
    if rows.len() != scenario.steps {
        return Err(CliError::Config(format!(
            "{source}: {} control rows for {} steps",
            rows.len(),
            scenario.steps
        )));
    }
    if rows.first().is_some_and(|r| r.len() != nc) {
        return Err(CliError::Config(format!(
            "{source}: {} control columns for control dimension {nc}",
            rows[0].len()
        )));
    }
    Ok(rows.into_iter().map(DVector::from_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub n_rotors: usize,
    pub t_final: f64,
    pub dt: f64,
    pub steps: usize,
    pub basis_size: usize,
    pub converged: bool,
    pub stop_reason: String,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub final_regularization: f64,
    pub surrogate_cost: f64,
    pub initial_moments: [f64; 4],
    pub terminal_moments: [f64; 4],
}

fn summarize(scenario: &Scenario, solution: &ScenarioSolution, optimized: bool) -> RunSummary {
    let m = surrogate_moments(scenario, solution);
    let r = &solution.ddp.report;
    RunSummary {
        mode: format!("{:?}", scenario.spec.mode),
        n_rotors: scenario.spec.n_rotors,
        t_final: scenario.spec.t_final,
        dt: scenario.spec.dt,
        steps: scenario.steps,
        basis_size: scenario.basis().len(),
        converged: optimized && r.converged(),
        stop_reason: if optimized { format!("{:?}", r.reason) } else { "OpenLoop".into() },
        iterations: r.iterations,
        accepted_steps: r.accepted,
        final_regularization: r.final_reg,
        surrogate_cost: solution.total_cost(),
        initial_moments: m[0].0,
        terminal_moments: m[m.len() - 1].0,
    }
}

fn write_solution(
    run: &mut RunDir,
    producer: &str,
    cfg: &RunConfig,
    scenario: &Scenario,
    solution: &ScenarioSolution,
    summary: &RunSummary,
) -> Result<(), CliError> {
    run.write(CONFIG_FILE, producer, None, cfg.to_toml().as_bytes())?;
    run.write("trajectory.csv", producer, None, trajectory_csv(scenario, solution).as_bytes())?;
    let controls = controls_csv(scenario, &solution.ddp.trajectory.controls);
    run.write(CONTROLS_FILE, producer, None, controls.as_bytes())?;
    let mut moments = String::from(MOMENTS_HEADER);
    moment_rows(
        &mut moments,
        scenario.spec.dt,
        surrogate_moments(scenario, solution).into_iter().map(|m| m.0),
        "gpc",
    );
    run.write("moments.csv", producer, None, moments.as_bytes())?;
    run.write("summary.json", producer, None, &to_json(summary))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub scenario: Scenario,
    pub solution: ScenarioSolution,
    pub summary: RunSummary,
}

/// Solves the configured scenario and writes trajectory, controls, moments,
/// convergence history and summary. A non-converged solve still writes its
/// artifacts; the caller decides how to report it.
pub fn cmd_optimize(cfg: &RunConfig, out: &Path, progress: bool) -> Result<OptimizeOutcome, CliError> {
    cfg.validate()?;
    let scenario = Scenario::build(cfg.scenario_spec())?;
    let solution = scenario.solve_with_observer(&cfg.ddp_options(), |it, cost| {
        if progress && it % 10 == 0 {
            eprintln!("iteration {it:4}  cost {cost:.10}");
        }
    })?;
    let summary = summarize(&scenario, &solution, true);
    let mut run = RunDir::create(out, cfg.hash())?;
    write_solution(&mut run, "optimize", cfg, &scenario, &solution, &summary)?;
    let mut conv = String::from("iteration,cost\n");
    for (i, c) in solution.ddp.cost_history.iter().enumerate() {
        conv.push_str(&format!("{i},{c}\n"));
    }
    run.write("convergence.csv", "optimize", None, conv.as_bytes())?;
    run.finish()?;
    Ok(OptimizeOutcome {
        scenario,
        solution,
        summary,
    })
}

/// Open-loop rollout of a control file under the configured scenario.
pub fn cmd_simulate(cfg: &RunConfig, controls: &Path, out: &Path) -> Result<OptimizeOutcome, CliError> {
    cfg.validate()?;
    let scenario = Scenario::build(cfg.scenario_spec())?;
    if !controls.is_file() {
        return Err(CliError::MissingArtifact(controls.to_path_buf()));
    }
    let text = std::fs::read_to_string(controls)?;
    let u = load_controls(&text, &controls.display().to_string(), &scenario)?;
    let solution = scenario.evaluate(&u)?;
    let summary = summarize(&scenario, &solution, false);
    let mut run = RunDir::create(out, cfg.hash())?;
    write_solution(&mut run, "simulate", cfg, &scenario, &solution, &summary)?;
    run.finish()?;
    Ok(OptimizeOutcome {
        scenario,
        solution,
        summary,
    })
}

/// Stored configuration and controls of a run, re-rolled through the surrogate.
pub fn load_run(dir: &Path) -> Result<(RunConfig, OptimizeOutcome), CliError> {
    let cfg = RunConfig::from_toml(&read_artifact(dir, CONFIG_FILE)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
    let scenario = Scenario::build(cfg.scenario_spec())?;
    let text = read_artifact(dir, CONTROLS_FILE)?;
    let controls = load_controls(&text, CONTROLS_FILE, &scenario)?;
    let solution = scenario.evaluate(&controls)?;
    let summary = summarize(&scenario, &solution, false);
    Ok((
        cfg,
        OptimizeOutcome {
            scenario,
            solution,
            summary,
        },
    ))
}

fn control_vectors(mode: ControlMode, controls: &[DVector<f64>]) -> Vec<ControlVector> {
    controls
        .iter()
        .map(|u| ControlVector::new(mode, u.iter().copied().collect()))
        .collect()
}

fn bootstrap_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Monte Carlo ensemble under the run's controls, with true cost and bootstrap error.
pub fn monte_carlo(
    scenario: &Scenario,
    controls: &[DVector<f64>],
    particles: usize,
    seed: u64,
    bootstrap: usize,
) -> Result<(MonteCarloRun, f64, f64), CliError> {
    let spec = &scenario.spec;
    let mean = Vec2::new(spec.initial_mean[0], spec.initial_mean[1]);
    let var = [spec.initial_cov_scale; 2];
    let ensemble = sample_initial(mean, var, particles, seed)?;
    let u = control_vectors(spec.mode, controls);
    let run = simulate_moments(
        &ensemble,
        &spec.rotor_positions(),
        &u,
        spec.dt,
        &spec.flow,
        bootstrap,
        bootstrap_seed(seed),
    )?;
    let (cost, se) = true_cost_with_error(&run, &u, &spec.cost_weights(), &spec.target())?;
    Ok((run, cost, se))
}

/// Largest per-component mean gap between surrogate and ensemble over steps `0..=steps/2`.
pub fn first_half_discrepancy(gpc: &[MomentOutput], run: &MonteCarloRun) -> [f64; 2] {
    let half = (gpc.len() - 1) / 2;
    let mut worst = [0.0f64; 2];
    for (g, m) in gpc.iter().zip(&run.moments).take(half + 1) {
        worst[0] = worst[0].max((g.0[0] - m.mean.x).abs());
        worst[1] = worst[1].max((g.0[1] - m.mean.y).abs());
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub particles: usize,
    pub seed: u64,
    pub bootstrap: usize,
    pub surrogate_cost: f64,
    pub true_cost: f64,
    /// NaN (written as null) with fewer than two particles or replicates.
    pub standard_error: f64,
    pub max_mean_discrepancy_first_half: [f64; 2],
    pub flagged_particles: usize,
    pub variance_defined: bool,
}

/// Advects a fresh ensemble under a run's stored controls and writes the
/// surrogate-versus-ensemble moment comparison.
pub fn cmd_validate(
    dir: &Path,
    particles: Option<usize>,
    seed: Option<u64>,
    bootstrap: Option<usize>,
) -> Result<ValidationReport, CliError> {
    let (cfg, run) = load_run(dir)?;
    let particles = particles.unwrap_or(cfg.monte_carlo.particles);
    let seed = seed.unwrap_or(cfg.monte_carlo.seed);
    let bootstrap = bootstrap.unwrap_or(cfg.monte_carlo.bootstrap);
    if particles == 0 {
        return Err(CliError::Config("particles: must be at least 1".into()));
    }
    let scenario = &run.scenario;
    let controls = &run.solution.ddp.trajectory.controls;
    let (mc, cost, se) = monte_carlo(scenario, controls, particles, seed, bootstrap)?;
    let gpc = surrogate_moments(scenario, &run.solution);
    let report = ValidationReport {
        particles,
        seed,
        bootstrap,
        surrogate_cost: run.solution.total_cost(),
        true_cost: cost,
        standard_error: se,
        max_mean_discrepancy_first_half: first_half_discrepancy(&gpc, &mc),
        flagged_particles: mc.flagged,
        variance_defined: particles > 1,
    };
    let mut table = String::from(MOMENTS_HEADER);
    let dt = scenario.spec.dt;
    moment_rows(&mut table, dt, gpc.iter().map(|m| m.0), "gpc");
    moment_rows(&mut table, dt, mc.moments.iter().map(|m| m.output()), "mc");
    let mut out = RunDir::open(dir)?;
    out.write("validation_moments.csv", "validate", Some(seed), table.as_bytes())?;
    out.write("validation.json", "validate", Some(seed), &to_json(&report))?;
    out.finish()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FtleOverrides {
    pub t0: Option<f64>,
    pub tau: Option<f64>,
    pub resolution: Option<usize>,
    pub domain: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FtleReport {
    pub t0: f64,
    pub tau: f64,
    pub nx: usize,
    pub ny: usize,
    pub domain: [f64; 4],
    pub dt: f64,
    pub forward_max: f64,
    pub backward_max: f64,
    pub forward_p95: f64,
    pub backward_p95: f64,
    /// Densities on the transported 1σ and 2σ ellipses.
    pub density_levels: [f64; 2],
    /// Distance from the top-5% forward FTLE nodes to the 2σ density contour.
    pub ridge_to_contour_distance: f64,
    pub flagged_forward: usize,
    pub flagged_backward: usize,
}

fn density_csv(analysis: &FtleAnalysis) -> String {
    let mut out = String::from("x,y,density\n");
    for (p, v) in analysis.density.grid.nodes().iter().zip(&analysis.density.values) {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, v));
    }
    out
}

/// Forward and backward FTLE fields of a run's optimal flow, plus the transported density.
pub fn cmd_ftle(dir: &Path, overrides: FtleOverrides) -> Result<(FtleReport, FtleAnalysis), CliError> {
    let (mut cfg, run) = load_run(dir)?;
    let f = &mut cfg.ftle;
    f.t0 = overrides.t0.unwrap_or(f.t0);
    f.tau = overrides.tau.unwrap_or(f.tau);
    f.resolution = overrides.resolution.unwrap_or(f.resolution);
    f.domain = overrides.domain.unwrap_or(f.domain);
    cfg.validate()?;
    let spec = &run.scenario.spec;
    let initial = InitialDensity {
        mean: Vec2::new(spec.initial_mean[0], spec.initial_mean[1]),
        variance: [spec.initial_cov_scale; 2],
    };
    let controls = run.solution.controls();
    let analysis = ftle::analyze_solution(
        &run.solution.states(),
        &controls,
        &cfg.ftle_grid(),
        &initial,
        &cfg.ftle_options(),
        spec.flow,
    )?;
    let flagged = |f: &ftle::FtleField| f.flags.iter().filter(|&&b| b != 0).count();
    let report = FtleReport {
        t0: cfg.ftle.t0,
        tau: cfg.ftle.tau,
        nx: cfg.ftle.resolution,
        ny: cfg.ftle.resolution,
        domain: cfg.ftle.domain,
        dt: spec.dt,
        forward_max: analysis.forward.max_abs(),
        backward_max: analysis.backward.max_abs(),
        forward_p95: analysis.forward.percentile(0.95),
        backward_p95: analysis.backward.percentile(0.95),
        density_levels: analysis.density.levels,
        ridge_to_contour_distance: analysis.ridge_to_contour_distance(0.95),
        flagged_forward: flagged(&analysis.forward),
        flagged_backward: flagged(&analysis.backward),
    };
    let mut out = RunDir::open(dir)?;
    for (name, field) in [("forward", &analysis.forward), ("backward", &analysis.backward)] {
        let mut csv = Vec::new();
        ftle::write_csv(field, &mut csv)?;
        out.write(&format!("ftle_{name}.csv"), "ftle", None, &csv)?;
        let mut bin = Vec::new();
        ftle::write_binary(field, &mut bin)?;
        out.write(&format!("ftle_{name}.bin"), "ftle", None, &bin)?;
    }
    out.write("density.csv", "ftle", None, density_csv(&analysis).as_bytes())?;
    out.write("ftle.json", "ftle", None, &to_json(&report))?;
    out.finish()?;
    Ok((report, analysis))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub t_final: f64,
    pub n_rotors: usize,
    /// `converged`, `not_converged` or `failed`.
    pub status: String,
    pub iterations: usize,
    pub surrogate_cost: f64,
    pub true_cost: f64,
    pub standard_error: f64,
    pub terminal_mean: [f64; 2],
    pub message: String,
}

impl SweepCell {
    fn failed(t_final: f64, n_rotors: usize, err: CliError) -> Self {
        Self {
            t_final,
            n_rotors,
            status: "failed".into(),
            iterations: 0,
            surrogate_cost: f64::NAN,
            true_cost: f64::NAN,
            standard_error: f64::NAN,
            terminal_mean: [f64::NAN; 2],
            message: err.to_string(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status != "failed"
    }
}

/// One optimize-and-validate cell of a sweep, written nowhere.
pub fn sweep_cell(base: &RunConfig, t_final: f64, n_rotors: usize) -> SweepCell {
    let run = || -> Result<SweepCell, CliError> {
        let mut cfg = base.clone();
        cfg.scenario.t_final = t_final;
        cfg.scenario.n_rotors = n_rotors;
        cfg.validate()?;
        let scenario = Scenario::build(cfg.scenario_spec())?;
        let solution = scenario.solve(&cfg.ddp_options())?;
        let mc = &cfg.monte_carlo;
        let controls = &solution.ddp.trajectory.controls;
        let (_, cost, se) = monte_carlo(&scenario, controls, mc.particles, mc.seed, mc.bootstrap)?;
        let terminal = surrogate_moments(&scenario, &solution).last().expect("nonempty history").0;
        let report = &solution.ddp.report;
        Ok(SweepCell {
            t_final,
            n_rotors,
            status: if report.converged() { "converged" } else { "not_converged" }.into(),
            iterations: report.iterations,
            surrogate_cost: solution.total_cost(),
            true_cost: cost,
            standard_error: se,
            terminal_mean: [terminal[0], terminal[1]],
            message: String::new(),
        })
    };
    run().unwrap_or_else(|e| SweepCell::failed(t_final, n_rotors, e))
}

fn csv_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Cost table with one row per final time and one column per rotor count.
pub fn cost_table_csv(cfg: &RunConfig, cells: &[SweepCell]) -> String {
    let cols = cfg.sweep.n_rotors.iter().map(|n| format!("n_r={n}"));
    let mut out = String::from("t_final");
    for c in cols {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    let width = cfg.sweep.n_rotors.len();
    for (row, &tf) in cells.chunks(width).zip(&cfg.sweep.t_final) {
        out.push_str(&tf.to_string());
        for c in row {
            out.push(',');
            out.push_str(&csv_value(c.true_cost));
        }
        out.push('\n');
    }
    out
}

fn cells_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(
        "t_final,n_rotors,status,iterations,surrogate_cost,true_cost,standard_error,mu1,mu2,message\n",
    );
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},\"{}\"\n",
            c.t_final,
            c.n_rotors,
            c.status,
            c.iterations,
            csv_value(c.surrogate_cost),
            csv_value(c.true_cost),
            csv_value(c.standard_error),
            csv_value(c.terminal_mean[0]),
            csv_value(c.terminal_mean[1]),
            c.message.replace('"', "'"),
        ));
    }
    out
}

/// Runs every `(t_f, n_r)` cell on up to `sweep.workers` threads. Results are
/// stored by cell index, so output order never depends on scheduling.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, progress: bool) -> Result<Vec<SweepCell>, CliError> {
    cfg.validate()?;
    let grid: Vec<(f64, usize)> = cfg
        .sweep
        .t_final
        .iter()
        .flat_map(|&tf| cfg.sweep.n_rotors.iter().map(move |&n| (tf, n)))
        .collect();
    let results: Vec<Mutex<Option<SweepCell>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.sweep.workers.min(grid.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(tf, n)) = grid.get(i) else { break };
                let cell = sweep_cell(cfg, tf, n);
                if progress {
                    eprintln!("t_f = {tf}, n_r = {n}: {} ({})", cell.status, csv_value(cell.true_cost));
                }
                *results[i].lock().expect("result slot") = Some(cell);
            });
        }
    });
    let cells: Vec<SweepCell> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect();
    let mut run = RunDir::create(out, cfg.hash())?;
    run.write(CONFIG_FILE, "sweep", None, cfg.to_toml().as_bytes())?;
    run.write("cost_table.csv", "sweep", Some(cfg.monte_carlo.seed), cost_table_csv(cfg, &cells).as_bytes())?;
    run.write("sweep_cells.csv", "sweep", Some(cfg.monte_carlo.seed), cells_csv(&cells).as_bytes())?;
    run.finish()?;
    if cells.iter().all(|c| !c.succeeded()) {
        return Err(CliError::Numerical("every sweep cell failed".into()));
    }
    Ok(cells)
}
