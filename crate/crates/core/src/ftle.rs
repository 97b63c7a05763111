//! Finite-time Lyapunov exponents of time-dependent planar flows.
//!
//! Tracers on a uniform grid are advected with RK4 over `[t0, t0 + tau]`. The
//! flow-map gradient comes from central differences of neighbouring tracers and
//! `σ = ln √λ_max(JᵀJ) / |tau|`.
//!
//! Grid nodes are stored row-major with x varying fastest: node `(ix, iy)` is
//! at index `iy * nx + ix`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::gpc::GpcState;
use crate::stokes::{rotlet_velocity, ControlVector, FlowParams, Vec2};

/// One-sided differences were used at this node.
pub const FLAG_BOUNDARY: u8 = 1;
/// The tracer (or a neighbour used for its gradient) came within `r_min` of a rotor.
pub const FLAG_SINGULAR: u8 = 2;
/// The tracer (or a neighbour) left the escape box and was frozen.
pub const FLAG_ESCAPED: u8 = 4;

/// Velocity field sampled by the tracer integrator.
pub trait FlowSource: Sync {
    /// Velocity at time `t` inside the integration step from `step.0` to `step.1`.
    /// Sets [`FLAG_SINGULAR`] in `flag` when a regularized evaluation was needed.
    fn velocity(&self, t: f64, step: (f64, f64), p: Vec2, flag: &mut u8) -> Vec2;

    /// Times over which the flow is defined.
    fn window(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Time-independent analytic field.
pub struct SteadyFlow<F>(pub F);

impl<F: Fn(Vec2) -> Vec2 + Sync> FlowSource for SteadyFlow<F> {
    fn velocity(&self, _t: f64, _step: (f64, f64), p: Vec2, _flag: &mut u8) -> Vec2 {
        (self.0)(p)
    }
}

/// Rotor field replayed from a stored history, held constant over each step.
#[derive(Debug, Clone, PartialEq)]
pub struct RotorPlayback {
    pub dt: f64,
    /// Rotor positions at the start of each segment.
    pub positions: Vec<Vec<Vec2>>,
    /// Rotor strengths over each segment.
    pub strengths: Vec<Vec<f64>>,
    pub params: FlowParams,
}

impl RotorPlayback {
    pub fn new(dt: f64, positions: Vec<Vec<Vec2>>, strengths: Vec<Vec<f64>>, params: FlowParams) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if positions.len() != strengths.len() || positions.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} position segments but {} strength segments",
                positions.len(),
                strengths.len()
            )));
        }
        if positions.iter().zip(&strengths).any(|(p, s)| p.len() != s.len()) {
            return Err(Error::DimensionMismatch("rotor counts differ between positions and strengths".into()));
        }
        Ok(Self {
            dt,
            positions,
            strengths,
            params,
        })
    }

    /// Rotor paths from the zeroth coefficients of a solved trajectory and the strengths of its controls.
    pub fn from_solution(states: &[GpcState], controls: &[ControlVector], dt: f64, params: FlowParams) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} states for {} controls",
                states.len(),
                controls.len()
            )));
        }
        let n_r = (states[0].n_states() - 2) / 2;
        let positions = states[..controls.len()]
            .iter()
            .map(|x| {
                (0..n_r)
                    .map(|i| Vec2::new(x.coeffs[(2 + i, 0)], x.coeffs[(2 + n_r + i, 0)]))
                    .collect()
            })
            .collect();
        let strengths = controls.iter().map(|u| u.values[..n_r].to_vec()).collect();
        Self::new(dt, positions, strengths, params)
    }

    pub fn segments(&self) -> usize {
        self.positions.len()
    }

    pub fn duration(&self) -> f64 {
        self.segments() as f64 * self.dt
    }

    /// Playback of the history backwards in time with negated strengths.
    pub fn time_reversed(&self) -> Self {
        Self {
            dt: self.dt,
            positions: self.positions.iter().rev().cloned().collect(),
            strengths: self.strengths.iter().rev().map(|s| s.iter().map(|g| -g).collect()).collect(),
            params: self.params,
        }
    }

    fn segment(&self, step: (f64, f64)) -> usize {
        let start = step.0.min(step.1);
        ((start / self.dt).round().max(0.0) as usize).min(self.segments() - 1)
    }
}

impl FlowSource for RotorPlayback {
    fn velocity(&self, _t: f64, step: (f64, f64), p: Vec2, flag: &mut u8) -> Vec2 {
        let k = self.segment(step);
        let clamped = FlowParams {
            eps: self.params.r_min,
            r_min: self.params.r_min,
        };
        self.positions[k]
            .iter()
            .zip(&self.strengths[k])
            .fold(Vec2::ZERO, |acc, (&r, &g)| {
                let v = rotlet_velocity(p, r, g, &self.params).unwrap_or_else(|_| {
                    *flag |= FLAG_SINGULAR;
                    rotlet_velocity(p, r, g, &clamped).expect("regularized kernel is finite")
                });
                acc + v
            })
    }

    fn window(&self) -> (f64, f64) {
        (0.0, self.duration())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtleGridSpec {
    /// `[x_min, x_max, y_min, y_max]`.
    pub domain: [f64; 4],
    pub nx: usize,
    pub ny: usize,
    pub t0: f64,
    pub tau: f64,
}

impl FtleGridSpec {
    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.domain;
        if !(x1 > x0) || !(y1 > y0) {
            return Err(Error::InvalidArgument("grid domain must have positive extent".into()));
        }
        if self.nx < 3 || self.ny < 3 {
            return Err(Error::InvalidArgument("grid needs at least 3 nodes per axis".into()));
        }
        if self.tau == 0.0 || !self.tau.is_finite() || !self.t0.is_finite() {
            return Err(Error::InvalidArgument("tau must be finite and nonzero".into()));
        }
        Ok(())
    }

    pub fn spacing(&self) -> (f64, f64) {
        let [x0, x1, y0, y1] = self.domain;
        ((x1 - x0) / (self.nx - 1) as f64, (y1 - y0) / (self.ny - 1) as f64)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, ix: usize, iy: usize) -> Vec2 {
        let (hx, hy) = self.spacing();
        Vec2::new(self.domain[0] + ix as f64 * hx, self.domain[2] + iy as f64 * hy)
    }

    pub fn nodes(&self) -> Vec<Vec2> {
        (0..self.ny)
            .flat_map(|iy| (0..self.nx).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| self.node(ix, iy))
            .collect()
    }

    fn with_tau(&self, t0: f64, tau: f64) -> Self {
        Self { t0, tau, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub dt: f64,
    /// Escape box side lengths as a multiple of the grid domain, about its center.
    pub escape_factor: f64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            dt: 0.01,
            escape_factor: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMapField {
    pub grid: FtleGridSpec,
    pub positions: Vec<Vec2>,
    pub flags: Vec<u8>,
}

fn step_count(span: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let ratio = span.abs() / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "integration span {span} is not a multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Advects `points` from `t0` over the signed span `tau`.
pub fn advect_points<S: FlowSource + ?Sized>(
    points: &[Vec2],
    source: &S,
    t0: f64,
    tau: f64,
    dt: f64,
    escape_box: Option<[f64; 4]>,
) -> Result<(Vec<Vec2>, Vec<u8>)> {
    let steps = step_count(tau, dt)?;
    let (lo, hi) = source.window();
    let (start, end) = (t0.min(t0 + tau), t0.max(t0 + tau));
    let slack = 1e-9 * dt;
    if start < lo - slack || end > hi + slack {
        return Err(Error::WindowOutOfRange { start, end, horizon: hi });
    }
    let h = dt * tau.signum();
    let mut out = points.to_vec();
    let mut flags = vec![0u8; points.len()];
    for (p, flag) in out.iter_mut().zip(flags.iter_mut()) {
        for m in 0..steps {
            if *flag & FLAG_ESCAPED != 0 {
                break;
            }
            let t = t0 + m as f64 * h;
            let seg = (t, t + h);
            let k1 = source.velocity(t, seg, *p, flag);
            let k2 = source.velocity(t + 0.5 * h, seg, *p + k1 * (0.5 * h), flag);
            let k3 = source.velocity(t + 0.5 * h, seg, *p + k2 * (0.5 * h), flag);
            let k4 = source.velocity(t + h, seg, *p + k3 * h, flag);
            *p = *p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if let Some([x0, x1, y0, y1]) = escape_box {
                if !(p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1) {
                    *flag |= FLAG_ESCAPED;
                }
            }
        }
    }
    Ok((out, flags))
}

fn escape_box(grid: &FtleGridSpec, factor: f64) -> [f64; 4] {
    let [x0, x1, y0, y1] = grid.domain;
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let (wx, wy) = (0.5 * factor * (x1 - x0), 0.5 * factor * (y1 - y0));
    [cx - wx, cx + wx, cy - wy, cy + wy]
}

/// Flow map of every grid node over `[t0, t0 + tau]`.
pub fn flow_map<S: FlowSource + ?Sized>(
    grid: &FtleGridSpec,
    source: &S,
    options: &IntegrationOptions,
) -> Result<FlowMapField> {
    grid.validate()?;
    let (positions, flags) = advect_points(
        &grid.nodes(),
        source,
        grid.t0,
        grid.tau,
        options.dt,
        Some(escape_box(grid, options.escape_factor)),
    )?;
    Ok(FlowMapField {
        grid: *grid,
        positions,
        flags,
    })
}

/// Symmetric 2×2 tensor `[[a, b], [b, d]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl Sym2 {
    /// Eigenvalues `(λ_min, λ_max)` in closed form.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.a + self.d);
        let half = 0.5 * (self.a - self.d);
        let r = half.hypot(self.b);
        (mean - r, mean + r)
    }

    /// Unit eigenvector of the largest eigenvalue.
    pub fn leading_direction(&self) -> Vec2 {
        let (_, max) = self.eigenvalues();
        let v = if self.b.abs() > 0.0 {
            Vec2::new(self.b, max - self.a)
        } else if self.a >= self.d {
            Vec2::new(1.0, 0.0)
        } else {
            Vec2::new(0.0, 1.0)
        };
        v * (1.0 / v.norm())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauchyGreenField {
    pub grid: FtleGridSpec,
    pub tensors: Vec<Sym2>,
    pub flags: Vec<u8>,
}

/// `C = JᵀJ` with `J` from central differences (one-sided on the boundary).
pub fn cauchy_green(map: &FlowMapField) -> CauchyGreenField {
    let g = &map.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (hx, hy) = g.spacing();
    let idx = |ix: usize, iy: usize| iy * nx + ix;
    let mut tensors = Vec::with_capacity(g.len());
    let mut flags = Vec::with_capacity(g.len());
    for iy in 0..ny {
        for ix in 0..nx {
            let mut flag = 0u8;
            let (xl, xr) = (ix.saturating_sub(1), (ix + 1).min(nx - 1));
            let (yl, yr) = (iy.saturating_sub(1), (iy + 1).min(ny - 1));
            if xl == ix || xr == ix || yl == iy || yr == iy {
                flag |= FLAG_BOUNDARY;
            }
            for k in [idx(ix, iy), idx(xl, iy), idx(xr, iy), idx(ix, yl), idx(ix, yr)] {
                flag |= map.flags[k] & (FLAG_SINGULAR | FLAG_ESCAPED);
            }
            let dx = (map.positions[idx(xr, iy)] - map.positions[idx(xl, iy)]) * (1.0 / ((xr - xl) as f64 * hx));
            let dy = (map.positions[idx(ix, yr)] - map.positions[idx(ix, yl)]) * (1.0 / ((yr - yl) as f64 * hy));
            // columns of J are dx and dy
            tensors.push(Sym2 {
                a: dx.dot(dx),
                b: dx.dot(dy),
                d: dy.dot(dy),
            });
            flags.push(flag);
        }
    }
    CauchyGreenField {
        grid: *g,
        tensors,
        flags,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtleField {
    pub grid: FtleGridSpec,
    pub dt: f64,
    pub sigma: Vec<f64>,
    pub flags: Vec<u8>,
}

impl FtleField {
    /// Value at `q` (0..=1) of the sorted finite σ values.
    pub fn percentile(&self, q: f64) -> f64 {
        let mut v: Vec<f64> = self.sigma.iter().copied().filter(|s| s.is_finite()).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let pos = (q.clamp(0.0, 1.0) * (v.len() - 1) as f64).round() as usize;
        v[pos]
    }

    pub fn max_abs(&self) -> f64 {
        self.sigma.iter().filter(|s| s.is_finite()).fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// `σ = ln λ_max / (2 |tau|)` per node.
pub fn ftle_field(cg: &CauchyGreenField, dt: f64) -> Result<FtleField> {
    let tau = cg.grid.tau.abs();
    let mut sigma = Vec::with_capacity(cg.tensors.len());
    let mut flags = cg.flags.clone();
    for (node, c) in cg.tensors.iter().enumerate() {
        let (min, max) = c.eigenvalues();
        if min < -1e-9 * max.abs().max(1.0) {
            return Err(Error::NegativeEigenvalue { node, value: min });
        }
        if max > 0.0 {
            sigma.push(0.5 * max.ln() / tau);
        } else {
            flags[node] |= FLAG_SINGULAR;
            sigma.push(f64::NEG_INFINITY);
        }
    }
    Ok(FtleField {
        grid: cg.grid,
        dt,
        sigma,
        flags,
    })
}

/// Leading stretching directions of a Cauchy-Green field.
pub fn leading_directions(cg: &CauchyGreenField) -> Vec<Vec2> {
    cg.tensors.iter().map(Sym2::leading_direction).collect()
}

/// Flow map, Cauchy-Green tensor and FTLE in one call.
pub fn compute_ftle<S: FlowSource + ?Sized>(
    grid: &FtleGridSpec,
    source: &S,
    options: &IntegrationOptions,
) -> Result<FtleField> {
    let map = flow_map(grid, source, options)?;
    ftle_field(&cauchy_green(&map), options.dt)
}

/// Initial Gaussian density `N(mean, diag(variance))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialDensity {
    pub mean: Vec2,
    pub variance: [f64; 2],
}

impl InitialDensity {
    pub fn pdf(&self, p: Vec2) -> f64 {
        let d = p - self.mean;
        let m2 = d.x * d.x / self.variance[0] + d.y * d.y / self.variance[1];
        (-0.5 * m2).exp() / (2.0 * std::f64::consts::PI * (self.variance[0] * self.variance[1]).sqrt())
    }

    /// Density on the ellipse at Mahalanobis distance `k`.
    pub fn level(&self, k: f64) -> f64 {
        (-0.5 * k * k).exp() / (2.0 * std::f64::consts::PI * (self.variance[0] * self.variance[1]).sqrt())
    }
}

/// Particle density on the grid at time `t0`, transported from `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: FtleGridSpec,
    pub values: Vec<f64>,
    /// Density levels of the transported 1σ and 2σ ellipses.
    pub levels: [f64; 2],
}

impl DensityField {
    /// Nodes at or above `level` with a 4-neighbour below it.
    pub fn contour_nodes(&self, level: f64) -> Vec<usize> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut out = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let k = iy * nx + ix;
                if self.values[k] < level {
                    continue;
                }
                let mut neighbours = Vec::with_capacity(4);
                if ix > 0 {
                    neighbours.push(k - 1);
                }
                if ix + 1 < nx {
                    neighbours.push(k + 1);
                }
                if iy > 0 {
                    neighbours.push(k - nx);
                }
                if iy + 1 < ny {
                    neighbours.push(k + nx);
                }
                if neighbours.iter().any(|&n| self.values[n] < level) {
                    out.push(k);
                }
            }
        }
        out
    }
}

/// Density at `grid.t0`; exact for incompressible flow since density is
/// conserved along trajectories.
pub fn transported_density<S: FlowSource + ?Sized>(
    grid: &FtleGridSpec,
    source: &S,
    initial: &InitialDensity,
    dt: f64,
) -> Result<DensityField> {
    let nodes = grid.nodes();
    let values = if grid.t0 == 0.0 {
        nodes.iter().map(|&p| initial.pdf(p)).collect()
    } else {
        let (origins, _) = advect_points(&nodes, source, grid.t0, -grid.t0, dt, None)?;
        origins.iter().map(|&p| initial.pdf(p)).collect()
    };
    Ok(DensityField {
        grid: *grid,
        values,
        levels: [initial.level(1.0), initial.level(2.0)],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtleAnalysis {
    pub forward: FtleField,
    pub backward: FtleField,
    pub density: DensityField,
}

impl FtleAnalysis {
    /// Smallest distance between a node with forward σ at or above the
    /// `quantile` level and a node on the density contour at Mahalanobis distance 2.
    pub fn ridge_to_contour_distance(&self, quantile: f64) -> f64 {
        let level = self.forward.percentile(quantile);
        let nodes = self.forward.grid.nodes();
        let ridge: Vec<usize> = (0..nodes.len())
            .filter(|&k| self.forward.sigma[k].is_finite() && self.forward.sigma[k] >= level)
            .collect();
        let contour = self.density.contour_nodes(self.density.levels[1]);
        let mut best = f64::INFINITY;
        for &r in &ridge {
            for &c in &contour {
                best = best.min((nodes[r] - nodes[c]).norm());
            }
        }
        best
    }
}

/// Forward and backward FTLE at `t0` over `|tau|`, plus the transported density.
pub fn analyze_playback(
    playback: &RotorPlayback,
    grid: &FtleGridSpec,
    initial: &InitialDensity,
    options: &IntegrationOptions,
) -> Result<FtleAnalysis> {
    let span = grid.tau.abs();
    let (start, end) = (grid.t0 - span, grid.t0 + span);
    let horizon = playback.duration();
    let slack = 1e-9 * playback.dt;
    if start < -slack || end > horizon + slack {
        return Err(Error::WindowOutOfRange { start, end, horizon });
    }
    let forward = compute_ftle(&grid.with_tau(grid.t0, span), playback, options)?;
    let backward = compute_ftle(&grid.with_tau(grid.t0, -span), playback, options)?;
    let density = transported_density(grid, playback, initial, options.dt)?;
    Ok(FtleAnalysis {
        forward,
        backward,
        density,
    })
}

/// [`analyze_playback`] on a solved trajectory.
pub fn analyze_solution(
    states: &[GpcState],
    controls: &[ControlVector],
    grid: &FtleGridSpec,
    initial: &InitialDensity,
    options: &IntegrationOptions,
    params: FlowParams,
) -> Result<FtleAnalysis> {
    let playback = RotorPlayback::from_solution(states, controls, options.dt, params)?;
    analyze_playback(&playback, grid, initial, options)
}

/// Writes `x, y, sigma, flag` rows.
pub fn write_csv<W: Write>(field: &FtleField, mut out: W) -> io::Result<()> {
    writeln!(out, "x,y,sigma,flag")?;
    for (k, p) in field.grid.nodes().iter().enumerate() {
        writeln!(out, "{},{},{},{}", p.x, p.y, field.sigma[k], field.flags[k])?;
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"FTLE";
const VERSION: u32 = 1;

/// Little-endian binary grid: magic `FTLE`, `u32` version, domain as 4 `f64`,
/// `nx` and `ny` as `u32`, `t0`, `tau`, `dt` as `f64`, then `nx·ny` sigma
/// values as `f64` and `nx·ny` flag bytes, both in node order.
pub fn write_binary<W: Write>(field: &FtleField, mut out: W) -> io::Result<()> {
    let g = &field.grid;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in g.domain {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(g.nx as u32).to_le_bytes())?;
    out.write_all(&(g.ny as u32).to_le_bytes())?;
    for v in [g.t0, g.tau, field.dt] {
        out.write_all(&v.to_le_bytes())?;
    }
    for s in &field.sigma {
        out.write_all(&s.to_le_bytes())?;
    }
    out.write_all(&field.flags)?;
    Ok(())
}

pub fn read_binary(bytes: &[u8]) -> io::Result<FtleField> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> io::Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated FTLE file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("missing FTLE magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
    if u32_at(take(4)?) != VERSION {
        return Err(bad("unsupported FTLE version"));
    }
    let mut domain = [0.0; 4];
    for d in domain.iter_mut() {
        *d = f64_at(take(8)?);
    }
    let nx = u32_at(take(4)?) as usize;
    let ny = u32_at(take(4)?) as usize;
    let t0 = f64_at(take(8)?);
    let tau = f64_at(take(8)?);
    let dt = f64_at(take(8)?);
    let sigma = (0..nx * ny).map(|_| take(8).map(f64_at)).collect::<io::Result<Vec<_>>>()?;
    let flags = take(nx * ny)?.to_vec();
    Ok(FtleField {
        grid: FtleGridSpec {
            domain,
            nx,
            ny,
            t0,
            tau,
        },
        dt,
        sigma,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize, tau: f64) -> FtleGridSpec {
        FtleGridSpec {
            domain: [-2.0, 2.0, -2.0, 2.0],
            nx: n,
            ny: n,
            t0: 0.0,
            tau,
        }
    }

    fn map_of(g: &FtleGridSpec, f: impl Fn(Vec2) -> Vec2) -> FlowMapField {
        FlowMapField {
            grid: *g,
            positions: g.nodes().into_iter().map(f).collect(),
            flags: vec![0; g.len()],
        }
    }

    #[test]
    fn identity_and_translation_give_unit_tensor() {
        let g = grid(5, 1.0);
        for m in [map_of(&g, |p| p), map_of(&g, |p| p + Vec2::new(3.0, -1.0))] {
            let cg = cauchy_green(&m);
            for c in &cg.tensors {
                assert_abs_diff_eq!(c.a, 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(c.b, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(c.d, 1.0, epsilon = 1e-12);
            }
            let f = ftle_field(&cg, 0.01).unwrap();
            assert!(f.max_abs() < 1e-12);
        }
    }

    #[test]
    fn linear_map_tensor_is_exact() {
        let g = grid(6, 1.0);
        let m = map_of(&g, |p| Vec2::new(2.0 * p.x + 0.5 * p.y, -p.x + 3.0 * p.y));
        let cg = cauchy_green(&m);
        // MᵀM for M = [[2, 0.5], [-1, 3]]
        for c in &cg.tensors {
            assert_abs_diff_eq!(c.a, 5.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.b, -2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.d, 9.25, epsilon = 1e-12);
        }
        let interior = cg.flags.iter().filter(|f| **f == 0).count();
        assert_eq!(interior, 16);
    }

    #[test]
    fn eigen_closed_form() {
        let c = Sym2 { a: 2.0, b: 1.0, d: 2.0 };
        assert_eq!(c.eigenvalues(), (1.0, 3.0));
        let v = c.leading_direction();
        assert_abs_diff_eq!(v.x, v.y, epsilon = 1e-15);
        let neg = CauchyGreenField {
            grid: grid(3, 1.0),
            tensors: vec![Sym2 { a: -1.0, b: 0.0, d: 1.0 }; 9],
            flags: vec![0; 9],
        };
        assert!(matches!(ftle_field(&neg, 0.01), Err(Error::NegativeEigenvalue { node: 0, .. })));
    }

    #[test]
    fn saddle_flow_has_unit_exponent() {
        let g = grid(41, 1.0);
        let f = compute_ftle(&g, &SteadyFlow(|p: Vec2| Vec2::new(p.x, -p.y)), &IntegrationOptions::default()).unwrap();
        for s in &f.sigma {
            assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn rotation_is_isometric() {
        let g = grid(21, 1.5);
        let omega = 0.7;
        let map = flow_map(&g, &SteadyFlow(move |p: Vec2| Vec2::new(-omega * p.y, omega * p.x)), &IntegrationOptions::default()).unwrap();
        for (p0, p1) in g.nodes().iter().zip(&map.positions) {
            assert_abs_diff_eq!(p0.norm(), p1.norm(), epsilon = 1e-8);
            let angle = p0.x * p1.y - p0.y * p1.x;
            if p0.norm() > 0.5 {
                assert_abs_diff_eq!(angle.atan2(p0.dot(*p1)), omega * 1.5, epsilon = 1e-8);
            }
        }
        assert!(ftle_field(&cauchy_green(&map), 0.01).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn escaped_tracers_are_frozen_and_flagged() {
        let g = grid(5, 3.0);
        let map = flow_map(&g, &SteadyFlow(|p: Vec2| Vec2::new(p.x, -p.y)), &IntegrationOptions::default()).unwrap();
        // x = ±2 reaches 2 e^3 > 8
        assert!(map.flags[0] & FLAG_ESCAPED != 0);
        assert_eq!(map.flags[2 * 5 + 2], 0);
        assert!(map.positions[0].x.abs() < 9.0);
    }

    fn sample_playback() -> RotorPlayback {
        let segs = 40;
        let positions = (0..segs)
            .map(|k| vec![Vec2::new(-1.0 + 0.01 * k as f64, -1.0), Vec2::new(1.0, 0.5)])
            .collect();
        let strengths = (0..segs).map(|k| vec![0.3 + 0.01 * k as f64, -0.2]).collect();
        RotorPlayback::new(0.01, positions, strengths, FlowParams::default()).unwrap()
    }

    #[test]
    fn forward_then_backward_returns_home() {
        let pb = sample_playback();
        let pts = vec![Vec2::new(0.0, 0.0), Vec2::new(-0.5, 0.7), Vec2::new(1.5, -1.5)];
        let (fwd, _) = advect_points(&pts, &pb, 0.1, 0.25, 0.01, None).unwrap();
        let (back, _) = advect_points(&fwd, &pb, 0.35, -0.25, 0.01, None).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert!((*a - *b).norm() < 1e-6);
        }
    }

    #[test]
    fn time_reversal_swaps_directions() {
        let pb = sample_playback();
        let rev = pb.time_reversed();
        let g = FtleGridSpec {
            domain: [-0.5, 0.5, -0.5, 0.5],
            nx: 9,
            ny: 9,
            t0: 0.3,
            tau: -0.2,
        };
        let opts = IntegrationOptions::default();
        let backward = compute_ftle(&g, &pb, &opts).unwrap();
        let g_rev = FtleGridSpec { t0: 0.1, tau: 0.2, ..g };
        let forward_rev = compute_ftle(&g_rev, &rev, &opts).unwrap();
        for (a, b) in backward.sigma.iter().zip(&forward_rev.sigma) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn window_is_checked() {
        let pb = sample_playback();
        let g = FtleGridSpec {
            domain: [-1.0, 1.0, -1.0, 1.0],
            nx: 3,
            ny: 3,
            t0: 0.3,
            tau: 0.2,
        };
        let density = InitialDensity {
            mean: Vec2::new(1.0, 1.0),
            variance: [0.025, 0.025],
        };
        let err = analyze_playback(&pb, &g, &density, &IntegrationOptions::default()).unwrap_err();
        assert!(matches!(err, Error::WindowOutOfRange { .. }));
        assert!(analyze_playback(&pb, &FtleGridSpec { t0: 0.2, ..g }, &density, &IntegrationOptions::default()).is_ok());
    }

    #[test]
    fn density_levels_and_contours() {
        let d = InitialDensity {
            mean: Vec2::new(0.0, 0.0),
            variance: [0.04, 0.04],
        };
        assert_abs_diff_eq!(d.pdf(Vec2::new(0.4, 0.0)), d.level(2.0), epsilon = 1e-12);
        let g = grid(81, 1.0);
        let still = SteadyFlow(|_| Vec2::ZERO);
        let field = transported_density(&FtleGridSpec { t0: 0.5, ..g }, &still, &d, 0.01).unwrap();
        let contour = field.contour_nodes(field.levels[1]);
        assert!(!contour.is_empty());
        let nodes = g.nodes();
        for k in contour {
            assert!((nodes[k].norm() - 0.4).abs() < 0.06);
        }
    }

    #[test]
    fn binary_round_trip() {
        let f = FtleField {
            grid: grid(3, -1.5),
            dt: 0.01,
            sigma: (0..9).map(|k| k as f64 * 0.25).collect(),
            flags: vec![1, 1, 1, 1, 0, 1, 1, 1, 1],
        };
        let mut buf = Vec::new();
        write_binary(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 32 + 8 + 24 + 72 + 9);
        assert_eq!(read_binary(&buf).unwrap(), f);
        assert!(read_binary(&buf[..20]).is_err());
    }
}
