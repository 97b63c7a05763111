//! Particle-ensemble ground truth for the surrogate.
//!
//! Particles are drawn with ChaCha8 seeded by `seed_from_u64`. Each draw takes
//! one `next_u64`, maps it to the open unit interval as
//! `((v >> 11) + 0.5) * 2^-53`, then applies the standard normal inverse CDF.
//! Each particle consumes an x draw then a y draw.

use std::io::{self, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cost::{CostWeights, MomentTarget, N_MOMENTS};
use crate::error::{Error, Result};
use crate::stokes::{rotlet_velocity, ControlMode, ControlVector, FlowParams, Vec2};

/// Particle touched the `r_min` disk of a rotor and was evaluated with `eps = r_min`.
pub const FLAG_NEAR_SINGULAR: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub points: Vec<Vec2>,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Seeded stream of standard normal variates.
pub struct NormalStream {
    rng: ChaCha8Rng,
    normal: Normal,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::standard(),
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u = self.next_uniform();
        self.normal.inverse_cdf(u)
    }
}

/// `n` independent draws from `N(mean, diag(variance))`.
pub fn sample_initial(mean: Vec2, variance: [f64; 2], n: usize, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one particle".into()));
    }
    if variance.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("variances must be finite and >= 0".into()));
    }
    let sd = [variance[0].sqrt(), variance[1].sqrt()];
    let mut stream = NormalStream::new(seed);
    let points = (0..n)
        .map(|_| {
            let zx = stream.next_normal();
            let zy = stream.next_normal();
            Vec2::new(mean.x + sd[0] * zx, mean.y + sd[1] * zy)
        })
        .collect();
    Ok(ParticleEnsemble { points, seed })
}

/// Rotor positions at the four RK4 stages of every step, plus strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct RotorPath {
    pub dt: f64,
    /// `controls.len() + 1` positions at step boundaries.
    pub positions: Vec<Vec<Vec2>>,
    stages: Vec<[Vec<Vec2>; 4]>,
    pub strengths: Vec<Vec<f64>>,
}

fn rotor_velocities(rotors: &[Vec2], u: &ControlVector, params: &FlowParams) -> Result<Vec<Vec2>> {
    let n = rotors.len();
    match u.mode {
        ControlMode::Velocity => Ok((0..n).map(|i| Vec2::new(u.values[n + i], u.values[2 * n + i])).collect()),
        ControlMode::TorqueOnly => (0..n)
            .map(|i| {
                (0..n).filter(|&k| k != i).try_fold(Vec2::ZERO, |acc, k| {
                    Ok(acc + rotlet_velocity(rotors[i], rotors[k], u.values[k], params)?)
                })
            })
            .collect(),
    }
}

impl RotorPath {
    /// Integrates the rotors alone; they do not feel the particles.
    pub fn integrate(initial: &[Vec2], controls: &[ControlVector], dt: f64, params: &FlowParams) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::InvalidArgument("at least one rotor is required".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let n = initial.len();
        let mut positions = vec![initial.to_vec()];
        let mut stages = Vec::with_capacity(controls.len());
        let mut strengths = Vec::with_capacity(controls.len());
        for (t, u) in controls.iter().enumerate() {
            if u.values.len() != u.mode.control_dim(n) {
                return Err(Error::DimensionMismatch(format!(
                    "control of length {} for {} rotors",
                    u.values.len(),
                    n
                )));
            }
            let x = positions[t].clone();
            let advance = |k: &[Vec2], h: f64| -> Vec<Vec2> { x.iter().zip(k).map(|(&p, &v)| p + v * h).collect() };
            let k1 = rotor_velocities(&x, u, params).map_err(|e| e.at_step(t))?;
            let x2 = advance(&k1, 0.5 * dt);
            let k2 = rotor_velocities(&x2, u, params).map_err(|e| e.at_step(t))?;
            let x3 = advance(&k2, 0.5 * dt);
            let k3 = rotor_velocities(&x3, u, params).map_err(|e| e.at_step(t))?;
            let x4 = advance(&k3, dt);
            let k4 = rotor_velocities(&x4, u, params).map_err(|e| e.at_step(t))?;
            let next: Vec<Vec2> = (0..n)
                .map(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
                .collect();
            stages.push([x, x2, x3, x4]);
            strengths.push(u.values[..n].to_vec());
            positions.push(next);
        }
        Ok(Self {
            dt,
            positions,
            stages,
            strengths,
        })
    }

    pub fn steps(&self) -> usize {
        self.stages.len()
    }
}

/// Superposed rotlet velocity, clamping `eps` to `r_min` inside the singular disk.
fn particle_velocity(p: Vec2, rotors: &[Vec2], strengths: &[f64], params: &FlowParams, flag: &mut u8) -> Vec2 {
    let clamped = FlowParams {
        eps: params.r_min,
        r_min: params.r_min,
    };
    rotors.iter().zip(strengths).fold(Vec2::ZERO, |acc, (&r, &g)| {
        let v = match rotlet_velocity(p, r, g, params) {
            Ok(v) => v,
            Err(_) => {
                *flag |= FLAG_NEAR_SINGULAR;
                rotlet_velocity(p, r, g, &clamped).expect("regularized kernel is finite")
            }
        };
        acc + v
    })
}

fn rk4_particle(p: Vec2, stages: &[Vec<Vec2>; 4], strengths: &[f64], dt: f64, params: &FlowParams, flag: &mut u8) -> Vec2 {
    let k1 = particle_velocity(p, &stages[0], strengths, params, flag);
    let k2 = particle_velocity(p + k1 * (0.5 * dt), &stages[1], strengths, params, flag);
    let k3 = particle_velocity(p + k2 * (0.5 * dt), &stages[2], strengths, params, flag);
    let k4 = particle_velocity(p + k3 * dt, &stages[3], strengths, params, flag);
    p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Advects every particle along `path`, calling `visit(step, points, flags)`
/// for the initial ensemble and after every step.
pub fn advect_with<F>(ensemble: &ParticleEnsemble, path: &RotorPath, params: &FlowParams, mut visit: F)
where
    F: FnMut(usize, &[Vec2], &[u8]),
{
    let mut points = ensemble.points.clone();
    let mut flags = vec![0u8; points.len()];
    visit(0, &points, &flags);
    for t in 0..path.steps() {
        for (p, f) in points.iter_mut().zip(flags.iter_mut()) {
            *p = rk4_particle(*p, &path.stages[t], &path.strengths[t], path.dt, params, f);
        }
        visit(t + 1, &points, &flags);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHistory {
    pub dt: f64,
    /// Positions at every step boundary.
    pub snapshots: Vec<Vec<Vec2>>,
    /// Cumulative per-particle flags after the final step.
    pub flags: Vec<u8>,
}

/// Full position history of an ensemble driven by `controls`.
pub fn advect(
    ensemble: &ParticleEnsemble,
    initial_rotors: &[Vec2],
    controls: &[ControlVector],
    dt: f64,
    params: &FlowParams,
) -> Result<EnsembleHistory> {
    let path = RotorPath::integrate(initial_rotors, controls, dt, params)?;
    let mut snapshots = Vec::with_capacity(path.steps() + 1);
    let mut last_flags = Vec::new();
    advect_with(ensemble, &path, params, |_, pts, flags| {
        snapshots.push(pts.to_vec());
        last_flags = flags.to_vec();
    });
    Ok(EnsembleHistory {
        dt,
        snapshots,
        flags: last_flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMoments {
    pub mean: Vec2,
    pub cov: [[f64; 2]; 2],
}

impl SampleMoments {
    /// `[μ₁, μ₂, σ₁₁, σ₂₂]`, the ordering used by the cost.
    pub fn output(&self) -> [f64; N_MOMENTS] {
        [self.mean.x, self.mean.y, self.cov[0][0], self.cov[1][1]]
    }
}

/// Unbiased sample mean and covariance, summed in index order.
pub fn sample_moments(points: &[Vec2]) -> Result<SampleMoments> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("sample covariance needs at least two points".into()));
    }
    let n = points.len() as f64;
    let sum = points.iter().fold(Vec2::ZERO, |acc, &p| acc + p);
    let mean = sum * (1.0 / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &p in points {
        let d = p - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let k = 1.0 / (n - 1.0);
    Ok(SampleMoments {
        mean,
        cov: [[sxx * k, sxy * k], [sxy * k, syy * k]],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRun {
    /// Sample moments at every step boundary; covariances are NaN for a single particle.
    pub moments: Vec<SampleMoments>,
    /// Moment histories of Poisson bootstrap replicates.
    pub replicates: Vec<Vec<SampleMoments>>,
    /// Particles that needed the near-singular clamp at least once.
    pub flagged: usize,
}

/// Draw from Poisson(1) by inversion.
fn poisson_one(stream: &mut NormalStream) -> u32 {
    let u = stream.next_uniform();
    let mut k = 0u32;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    while u > cdf && k < 32 {
        k += 1;
        p /= k as f64;
        cdf += p;
    }
    k
}

fn weighted_moments(points: &[Vec2], weights: &[u32], shift: Vec2) -> SampleMoments {
    let (mut w, mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, &k) in points.iter().zip(weights) {
        if k == 0 {
            continue;
        }
        let k = k as f64;
        let d = *p - shift;
        w += k;
        sx += k * d.x;
        sy += k * d.y;
        sxx += k * d.x * d.x;
        sxy += k * d.x * d.y;
        syy += k * d.y * d.y;
    }
    let (mx, my) = (sx / w, sy / w);
    let denom = w - 1.0;
    SampleMoments {
        mean: shift + Vec2::new(mx, my),
        cov: [
            [(sxx - w * mx * mx) / denom, (sxy - w * mx * my) / denom],
            [(sxy - w * mx * my) / denom, (syy - w * my * my) / denom],
        ],
    }
}

fn moments_or_undefined(points: &[Vec2]) -> SampleMoments {
    sample_moments(points).unwrap_or_else(|_| SampleMoments {
        mean: points[0],
        cov: [[f64::NAN; 2]; 2],
    })
}

/// Sample-moment history without storing positions, plus `replicates`
/// Poisson bootstrap histories drawn from `bootstrap_seed`.
pub fn simulate_moments(
    ensemble: &ParticleEnsemble,
    initial_rotors: &[Vec2],
    controls: &[ControlVector],
    dt: f64,
    params: &FlowParams,
    replicates: usize,
    bootstrap_seed: u64,
) -> Result<MonteCarloRun> {
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one particle".into()));
    }
    let path = RotorPath::integrate(initial_rotors, controls, dt, params)?;
    let replicates = if ensemble.len() < 2 { 0 } else { replicates };
    let mut stream = NormalStream::new(bootstrap_seed);
    let weights: Vec<Vec<u32>> = (0..replicates)
        .map(|_| (0..ensemble.len()).map(|_| poisson_one(&mut stream)).collect())
        .collect();
    let mut moments = Vec::with_capacity(path.steps() + 1);
    let mut reps = vec![Vec::with_capacity(path.steps() + 1); replicates];
    let mut flagged = 0;
    advect_with(ensemble, &path, params, |_, pts, flags| {
        let m = moments_or_undefined(pts);
        for (hist, w) in reps.iter_mut().zip(&weights) {
            hist.push(weighted_moments(pts, w, m.mean));
        }
        moments.push(m);
        flagged = flags.iter().filter(|f| **f != 0).count();
    });
    Ok(MonteCarloRun {
        moments,
        replicates: reps,
        flagged,
    })
}

/// True cost of a run and its bootstrap standard error (NaN without replicates).
pub fn true_cost_with_error(
    run: &MonteCarloRun,
    controls: &[ControlVector],
    weights: &CostWeights,
    target: &MomentTarget,
) -> Result<(f64, f64)> {
    let cost = true_cost(&run.moments, controls, weights, target)?;
    let costs = run
        .replicates
        .iter()
        .map(|m| true_cost(m, controls, weights, target))
        .collect::<Result<Vec<f64>>>()?;
    if costs.len() < 2 {
        return Ok((cost, f64::NAN));
    }
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (costs.len() - 1) as f64;
    Ok((cost, var.sqrt()))
}

/// Moment-tracking cost with sample moments in place of surrogate moments.
pub fn true_cost(
    moments: &[SampleMoments],
    controls: &[ControlVector],
    weights: &CostWeights,
    target: &MomentTarget,
) -> Result<f64> {
    if moments.len() != controls.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} moment snapshots for {} controls",
            moments.len(),
            controls.len()
        )));
    }
    let error = |m: &SampleMoments, diag: &[f64; N_MOMENTS]| -> f64 {
        let y = m.output();
        (0..N_MOMENTS).map(|k| diag[k] * (y[k] - target.y_ref[k]).powi(2)).sum()
    };
    let mut total = 0.0;
    for (m, u) in moments.iter().zip(controls) {
        let effort: f64 = u.values.iter().zip(&weights.control).map(|(v, r)| r * v * v).sum();
        total += error(m, &weights.stage) + effort;
    }
    Ok(total + error(moments.last().expect("at least one snapshot"), &weights.terminal))
}

/// Counts per cell over `[x0, x1] × [y0, y1]`, row-major with x fastest.
pub fn histogram(points: &[Vec2], domain: [f64; 4], nx: usize, ny: usize) -> Vec<u32> {
    let [x0, x1, y0, y1] = domain;
    let mut counts = vec![0u32; nx * ny];
    for p in points {
        if !(p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1) {
            continue;
        }
        let ix = (((p.x - x0) / (x1 - x0) * nx as f64) as usize).min(nx - 1);
        let iy = (((p.y - y0) / (y1 - y0) * ny as f64) as usize).min(ny - 1);
        counts[iy * nx + ix] += 1;
    }
    counts
}

/// Writes `t, particle_id, x, y, flag` rows for every `stride`-th snapshot.
pub fn write_snapshots_csv<W: Write>(history: &EnsembleHistory, stride: usize, mut out: W) -> io::Result<()> {
    writeln!(out, "t,particle_id,x,y,flag")?;
    let stride = stride.max(1);
    for (t, pts) in history.snapshots.iter().enumerate().step_by(stride) {
        let time = t as f64 * history.dt;
        for (id, p) in pts.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", time, id, p.x, p.y, history.flags.get(id).copied().unwrap_or(0))?;
        }
    }
    Ok(())
}
