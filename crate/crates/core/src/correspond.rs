//! From wave functions to drift–diffusion ensembles and back to densities.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{DiffusionSpec, Regime, SeedSpec, SpaceGrid, TimeGrid};
use crate::pde::{born_density, born_density_slice, density_moments, log_derivatives, Boundary, Direction, WaveField};
use crate::stats::{chunked_reduce, ks_against_cdf, Moments};

type C = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Plus,
    Minus,
}

/// Complex velocity `w = v + i u` per snapshot and grid point.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub grid: SpaceGrid,
    pub snapshot_times: Vec<f64>,
    /// `w[snap][idx * dim + i]`.
    pub w: Vec<Vec<C>>,
    pub valid: Vec<Vec<bool>>,
    /// `v2 = alpha hbar / m` (times the identity).
    pub v2: C,
    pub boundary: Boundary,
    pub branch: Option<Branch>,
}

impl VelocityField {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn check_time(&self, t: f64) -> Result<usize> {
        let n = self.snapshot_times.len();
        let (first, last) = (self.snapshot_times[0], self.snapshot_times[n - 1]);
        if n == 1 {
            return Ok(0);
        }
        let step = (last - first) / (n - 1) as f64;
        let k = ((t - first) / step).round();
        if k < -0.5 - 1e-9 || k > (n - 1) as f64 + 0.5 + 1e-9 || !k.is_finite() {
            return Err(Error::DriftLookupOutOfBox(t));
        }
        Ok((k.max(0.0) as usize).min(n - 1))
    }

    /// Real drift `Re w` at `x`, nearest snapshot in time, multilinear in space.
    /// `x` must already lie inside the (possibly periodic) box.
    pub fn drift_at(&self, snap: usize, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let w = &self.w[snap];
        let periodic = self.boundary == Boundary::Periodic;
        let locate = |axis: usize, xi: f64| -> (usize, usize, f64) {
            let a = &self.grid.axes[axis];
            let h = a.h();
            let s = (xi - a.min) / h;
            if periodic {
                let s = s.rem_euclid(a.n as f64);
                let j = (s.floor() as usize).min(a.n - 1);
                (j, (j + 1) % a.n, s - j as f64)
            } else {
                let s = s.clamp(0.0, (a.n - 1) as f64);
                let j = (s.floor() as usize).min(a.n - 2);
                (j, j + 1, s - j as f64)
            }
        };
        out[..d].fill(0.0);
        match d {
            1 => {
                let (j0, j1, f) = locate(0, x[0]);
                out[0] = (1.0 - f) * w[j0].re + f * w[j1].re;
            }
            2 => {
                let ny = self.grid.axes[1].n;
                let (i0, i1, fx) = locate(0, x[0]);
                let (j0, j1, fy) = locate(1, x[1]);
                for (ii, wx) in [(i0, 1.0 - fx), (i1, fx)] {
                    for (jj, wy) in [(j0, 1.0 - fy), (j1, fy)] {
                        let idx = ii * ny + jj;
                        for c in 0..2 {
                            out[c] += wx * wy * w[idx * 2 + c].re;
                        }
                    }
                }
            }
            _ => unreachable!("grids are 1d or 2d"),
        }
    }
}

/// `w^i = (1/m)(+- alpha hbar d_i ln Psi - q A_i)`, `v2 = alpha hbar / m`.
pub fn velocity_from_wave(field: &WaveField, branch: Branch) -> Result<VelocityField> {
    let spec = &field.spec;
    let d = field.grid.dim();
    let ah = spec.alpha() * spec.hbar;
    let sign = match branch {
        Branch::Plus => 1.0,
        Branch::Minus => -1.0,
    };
    let mut a = vec![0.0; d];
    let mut w = Vec::with_capacity(field.n_snapshots());
    let mut valid = Vec::with_capacity(field.n_snapshots());
    for (k, slice) in field.values.iter().enumerate() {
        let t = field.snapshot_times[k];
        let der = log_derivatives(slice, &field.grid, field.boundary)?;
        let mut wk = vec![C::new(0.0, 0.0); slice.len() * d];
        for idx in 0..slice.len() {
            if !der.unmasked[idx] {
                continue;
            }
            field.potential.vector_at(&field.grid.coords(idx), t, &mut a);
            for i in 0..d {
                wk[idx * d + i] = (sign * ah * der.grad[idx * d + i] - spec.charge * a[i]) / spec.mass;
            }
        }
        w.push(wk);
        valid.push(der.unmasked);
    }
    Ok(VelocityField {
        grid: field.grid.clone(),
        snapshot_times: field.snapshot_times.clone(),
        w,
        valid,
        v2: ah / spec.mass,
        boundary: field.boundary,
        branch: Some(branch),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintReport {
    pub max_abs: f64,
    /// `sqrt` of the snapshot average of `int r^2 dV` over points valid in both fields.
    pub l2: f64,
    pub n_points: usize,
    /// Residual per snapshot, `dim` components per point; zero where invalid.
    #[serde(skip)]
    pub residual: Vec<Vec<f64>>,
}

/// Residual of `cos(phi/2) u+ - sin(phi/2) v+ - cos(phi/2) u- + sin(phi/2) v-`.
pub fn constraint_check(plus: &VelocityField, minus: &VelocityField, phi: f64) -> Result<ConstraintReport> {
    if plus.grid != minus.grid || plus.snapshot_times.len() != minus.snapshot_times.len() {
        return Err(Error::GridMismatch("velocity fields live on different grids".into()));
    }
    if plus
        .snapshot_times
        .iter()
        .zip(&minus.snapshot_times)
        .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0))
    {
        return Err(Error::GridMismatch("velocity fields have different snapshot times".into()));
    }
    let d = plus.dim();
    let (c, s) = ((0.5 * phi).cos(), (0.5 * phi).sin());
    let mut rep = ConstraintReport {
        max_abs: 0.0,
        l2: 0.0,
        n_points: 0,
        residual: Vec::new(),
    };
    let mut total = 0.0;
    for k in 0..plus.w.len() {
        let mut r = vec![0.0; plus.w[k].len()];
        let mut sq = 0.0;
        for idx in 0..plus.grid.len() {
            if !(plus.valid[k][idx] && minus.valid[k][idx]) {
                continue;
            }
            rep.n_points += 1;
            for i in 0..d {
                let (wp, wm) = (plus.w[k][idx * d + i], minus.w[k][idx * d + i]);
                let v = c * wp.im - s * wp.re - c * wm.im + s * wm.re;
                r[idx * d + i] = v;
                rep.max_abs = rep.max_abs.max(v.abs());
                sq += v * v;
            }
        }
        total += sq * plus.grid.cell_volume();
        rep.residual.push(r);
    }
    rep.l2 = (total / plus.w.len().max(1) as f64).sqrt();
    Ok(rep)
}

/// Oracle drift `b = J/rho + side (s/2) grad ln rho` for `rho = born_density(field)`.
///
/// `direction` selects `b+` (forward simulation) or `b-` (backward).
/// `J / rho = (hbar grad arg Psi - q A)/m` in the quantum regime; otherwise
/// (1d only) `J = -int_{-inf}^x d_t rho`, so that continuity holds exactly.
pub fn fokker_planck_drift(field: &WaveField, spec: &DiffusionSpec, direction: Direction) -> Result<VelocityField> {
    let spec = spec.validate()?;
    if field.direction != Direction::Forward {
        return Err(Error::UnsupportedRegime("oracle drift is built from a forward field".into()));
    }
    let regime = spec.regime();
    if regime == Regime::Classical {
        return Err(Error::UnsupportedRegime("no density dynamics at alpha = 0".into()));
    }
    let d = field.grid.dim();
    let quantum = regime == Regime::Quantum;
    if !quantum && d != 1 {
        return Err(Error::UnsupportedRegime(format!(
            "{} oracle drift is implemented in 1d only",
            regime.label()
        )));
    }
    let side = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let s = spec.real_noise_rate();
    // grad ln rho = power * Re grad ln Psi, with rho ~ |Psi|^power
    let power = if regime == Regime::Brownian { 1.0 } else { 2.0 };
    let rho = born_density(field)?;
    let len = field.grid.len();
    let grid = &field.grid;
    let mut a = vec![0.0; d];
    let mut w = Vec::with_capacity(field.n_snapshots());
    let mut valid = Vec::with_capacity(field.n_snapshots());
    let dt_snap = field.times.dt() * field.stride as f64;
    for (k, slice) in field.values.iter().enumerate() {
        let t = field.snapshot_times[k];
        let der = log_derivatives(slice, grid, field.boundary)?;
        let current: Option<Vec<f64>> = if quantum {
            None
        } else {
            let n = rho.len();
            if n < 2 {
                return Err(Error::InvalidGrid("continuity current needs two snapshots".into()));
            }
            let (lo, hi, span) = if k == 0 {
                (0, 1, dt_snap)
            } else if k == n - 1 {
                (n - 2, n - 1, dt_snap)
            } else {
                (k - 1, k + 1, 2.0 * dt_snap)
            };
            let rate: Vec<f64> = (0..len).map(|i| (rho[hi][i] - rho[lo][i]) / span).collect();
            let h = grid.axes[0].h();
            let mut j = vec![0.0; len];
            for i in 1..len {
                j[i] = j[i - 1] - 0.5 * h * (rate[i - 1] + rate[i]);
            }
            Some(j)
        };
        let mut wk = vec![C::new(0.0, 0.0); len * d];
        let mut ok = vec![false; len];
        for idx in 0..len {
            if !der.unmasked[idx] {
                continue;
            }
            ok[idx] = true;
            field.potential.vector_at(&grid.coords(idx), t, &mut a);
            for i in 0..d {
                let osmotic = side * 0.5 * s * power * der.grad[idx * d + i].re;
                let flow = match &current {
                    None => (spec.hbar * der.grad[idx * d + i].im - spec.charge * a[i]) / spec.mass,
                    Some(j) => j[idx] / rho[k][idx],
                };
                wk[idx * d + i] = C::new(flow + osmotic, 0.0);
            }
        }
        w.push(wk);
        valid.push(ok);
    }
    Ok(VelocityField {
        grid: grid.clone(),
        snapshot_times: field.snapshot_times.clone(),
        w,
        valid,
        v2: spec.alpha() * spec.hbar / spec.mass,
        boundary: field.boundary,
        branch: None,
    })
}

/// Where simulated paths start.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Nodal density on a grid, sampled from its piecewise-(bi)linear interpolant.
    Density { grid: SpaceGrid, values: Vec<f64> },
    Point(Vec<f64>),
    /// `n_paths * dim` positions, path-major.
    Samples(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    Reflect,
    Periodic,
    /// Leaving the drift box is an error.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    /// Forward steps `t0 -> tf` with `b+`; backward steps `tf -> t0` with `b-`.
    pub direction: Direction,
    /// Defaults to reflect for Dirichlet fields and periodic for periodic ones.
    pub boundary: Option<BoundaryPolicy>,
    /// Record positions every `record_stride` steps (must divide `n_steps`).
    pub record_stride: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            direction: Direction::Forward,
            boundary: None,
            record_stride: 1,
        }
    }
}

/// Simulated real paths.
#[derive(Debug, Clone)]
pub struct DriftEnsemble {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub direction: Direction,
    pub spec: DiffusionSpec,
    pub seed: SeedSpec,
    pub boundary: BoundaryPolicy,
    pub record_stride: usize,
    /// `positions[r][k * dim + i]`, `r` indexing recorded steps in increasing time.
    pub positions: Vec<Vec<f64>>,
    /// Per-path realized `sum dX^i dX^j`, `qv[k * dim * dim + i * dim + j]`.
    pub qv: Vec<f64>,
    /// Per-path `sum (b^i dt)(b^j dt)`, the drift part of `qv`.
    pub drift_qv: Vec<f64>,
    pub interpolation: &'static str,
}

impl DriftEnsemble {
    pub fn record_times(&self) -> Vec<f64> {
        (0..self.positions.len()).map(|r| self.grid.time(r * self.record_stride)).collect()
    }

    pub fn positions_at(&self, t: f64) -> Result<&[f64]> {
        let k = self.grid.index_of(t)?;
        if k % self.record_stride != 0 {
            return Err(Error::TimeNotOnGrid(t));
        }
        Ok(&self.positions[k / self.record_stride])
    }

    /// Component `i` of every path at time `t`.
    pub fn component_at(&self, t: f64, i: usize) -> Result<Vec<f64>> {
        Ok(self.positions_at(t)?.iter().skip(i).step_by(self.dim).copied().collect())
    }

    /// Mean and standard error of the realized QV component `(i, j)` over paths.
    pub fn qv_mean(&self, i: usize, j: usize) -> (f64, f64) {
        let d = self.dim;
        let m = chunked_reduce(
            self.n_paths,
            Moments::default,
            |acc, k| acc.push(self.qv[k * d * d + i * d + j]),
            |a, b| a.merge(b),
        );
        (m.mean(), m.std_error())
    }

    /// Mean and standard error of `qv - drift_qv` for component `(i, j)`.
    ///
    /// The drift contributes `sum b^2 dt^2 = O(dt)` to the realized QV. The
    /// cross term has zero mean because each noise increment is independent of
    /// the drift it is added to, so what remains has expectation `s t delta_ij`.
    pub fn noise_qv_mean(&self, i: usize, j: usize) -> (f64, f64) {
        let d = self.dim;
        let m = chunked_reduce(
            self.n_paths,
            Moments::default,
            |acc, k| {
                let at = k * d * d + i * d + j;
                acc.push(self.qv[at] - self.drift_qv[at])
            },
            |a, b| a.merge(b),
        );
        (m.mean(), m.std_error())
    }
}

/// Samples `t` in `[0, 1]` from the density proportional to `a (1 - t) + b t`.
fn sample_linear(u: f64, a: f64, b: f64) -> f64 {
    let (a, b) = (a.max(0.0), b.max(0.0));
    if a + b <= 0.0 {
        return u;
    }
    let diff = b - a;
    if diff.abs() < 1e-12 * (a + b) {
        return u;
    }
    // a t + diff t^2 / 2 = u (a + b) / 2
    let disc = a * a + diff * u * (a + b);
    ((disc.max(0.0).sqrt() - a) / diff).clamp(0.0, 1.0)
}

/// Cumulative segment masses for sampling from a piecewise-(bi)linear density.
struct DensitySampler {
    grid: SpaceGrid,
    values: Vec<f64>,
    cdf: Vec<f64>,
}

impl DensitySampler {
    fn new(grid: &SpaceGrid, values: &[f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch("initial density does not match its grid".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteField("initial density"));
        }
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        match grid.axes.as_slice() {
            [x] => {
                for j in 0..x.n - 1 {
                    acc += 0.5 * (values[j] + values[j + 1]);
                    cdf.push(acc);
                }
            }
            [x, y] => {
                for i in 0..x.n - 1 {
                    for j in 0..y.n - 1 {
                        let c = |a: usize, b: usize| values[a * y.n + b];
                        acc += 0.25 * (c(i, j) + c(i + 1, j) + c(i, j + 1) + c(i + 1, j + 1));
                        cdf.push(acc);
                    }
                }
            }
            _ => return Err(Error::UnsupportedDim(grid.dim())),
        }
        if !(acc > 0.0) {
            return Err(Error::ZeroNorm);
        }
        Ok(DensitySampler {
            grid: grid.clone(),
            values: values.to_vec(),
            cdf,
        })
    }

    fn sample(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let total = *self.cdf.last().expect("non-empty");
        let u: f64 = rng.random::<f64>() * total;
        let cell = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        match self.grid.axes.as_slice() {
            [x] => {
                let t = sample_linear(rng.random(), self.values[cell], self.values[cell + 1]);
                out[0] = x.point(cell) + t * x.h();
            }
            [x, y] => {
                let (i, j) = (cell / (y.n - 1), cell % (y.n - 1));
                let c = |a: usize, b: usize| self.values[a * y.n + b];
                let (c00, c10, c01, c11) = (c(i, j), c(i + 1, j), c(i, j + 1), c(i + 1, j + 1));
                // marginal in x is linear, then y | x is linear
                let tx = sample_linear(rng.random(), c00 + c01, c10 + c11);
                let lo = (1.0 - tx) * c00 + tx * c10;
                let hi = (1.0 - tx) * c01 + tx * c11;
                let ty = sample_linear(rng.random(), lo, hi);
                out[0] = x.point(i) + tx * x.h();
                out[1] = y.point(j) + ty * y.h();
            }
            _ => unreachable!("checked in new"),
        }
    }
}

/// Brings `x` back into `[lo, hi]` by mirror reflection.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let width = hi - lo;
    let period = 2.0 * width;
    let mut y = (x - lo).rem_euclid(period);
    if y > width {
        y = period - y;
    }
    lo + y
}

/// Real drift table on one axis layout, contiguous per snapshot.
struct DriftTable {
    dim: usize,
    /// `re[snap][idx * dim + i]`.
    re: Vec<Vec<f64>>,
    min: Vec<f64>,
    inv_h: Vec<f64>,
    n: Vec<usize>,
    periodic: bool,
}

impl DriftTable {
    fn new(field: &VelocityField) -> Self {
        let axes = &field.grid.axes;
        DriftTable {
            dim: field.dim(),
            re: field.w.iter().map(|w| w.iter().map(|c| c.re).collect()).collect(),
            min: axes.iter().map(|a| a.min).collect(),
            inv_h: axes.iter().map(|a| 1.0 / a.h()).collect(),
            n: axes.iter().map(|a| a.n).collect(),
            periodic: field.boundary == Boundary::Periodic,
        }
    }

    #[inline]
    fn locate(&self, axis: usize, xi: f64) -> (usize, usize, f64) {
        let n = self.n[axis];
        let s = (xi - self.min[axis]) * self.inv_h[axis];
        if self.periodic {
            let s = if s >= 0.0 && s < n as f64 { s } else { s.rem_euclid(n as f64) };
            let j = (s as usize).min(n - 1);
            (j, if j + 1 == n { 0 } else { j + 1 }, s - j as f64)
        } else {
            let s = s.clamp(0.0, (n - 1) as f64);
            let j = (s as usize).min(n - 2);
            (j, j + 1, s - j as f64)
        }
    }

    #[inline]
    fn eval(&self, snap: usize, x: &[f64], out: &mut [f64]) {
        let w = &self.re[snap];
        if self.dim == 1 {
            let (j0, j1, f) = self.locate(0, x[0]);
            out[0] = (1.0 - f) * w[j0] + f * w[j1];
            return;
        }
        let ny = self.n[1];
        let (i0, i1, fx) = self.locate(0, x[0]);
        let (j0, j1, fy) = self.locate(1, x[1]);
        out[0] = 0.0;
        out[1] = 0.0;
        for (ii, wx) in [(i0, 1.0 - fx), (i1, fx)] {
            for (jj, wy) in [(j0, 1.0 - fy), (j1, fy)] {
                let idx = (ii * ny + jj) * 2;
                out[0] += wx * wy * w[idx];
                out[1] += wx * wy * w[idx + 1];
            }
        }
    }
}

/// Paths advanced together so that each step touches one drift snapshot.
const LOCKSTEP: usize = 256;

/// Euler–Maruyama simulation of `dX = b dt + Re(e^{i phi/2} dW)`.
///
/// Forward: `X_{k+1} = X_k + b+(X_k, t_k) dt + xi`. Backward, from `tf`:
/// `X_k = X_{k+1} - b-(X_{k+1}, t_{k+1}) dt + xi`. `Var xi = s dt` per component
/// with `s = |alpha| hbar (1 + cos phi) / 2m`. Path `k` draws from its own
/// stream, so results do not depend on the thread count.
pub fn drift_diffusion_simulate(
    drift: &VelocityField,
    spec: &DiffusionSpec,
    grid: &TimeGrid,
    n_paths: usize,
    initial: &InitialCondition,
    seed: SeedSpec,
    options: SimulationOptions,
) -> Result<DriftEnsemble> {
    let spec = spec.validate()?;
    let grid = grid.validate()?;
    if n_paths == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let d = drift.dim();
    let n_steps = grid.n_steps;
    if options.record_stride == 0 || n_steps % options.record_stride != 0 {
        return Err(Error::InvalidGrid(format!(
            "record stride {} does not divide {n_steps} steps",
            options.record_stride
        )));
    }
    let n_rec = n_steps / options.record_stride + 1;
    let cap = crate::noise::MAX_ENSEMBLE_VALUES;
    if n_rec.saturating_mul(n_paths).saturating_mul(d) > cap {
        return Err(Error::OverflowingEnsembleSize {
            requested: n_rec * n_paths * d,
            cap,
        });
    }
    drift.check_time(grid.t0)?;
    drift.check_time(grid.tf)?;
    let policy = options.boundary.unwrap_or(match drift.boundary {
        Boundary::Periodic => BoundaryPolicy::Periodic,
        Boundary::Dirichlet => BoundaryPolicy::Reflect,
    });
    let sampler = match initial {
        InitialCondition::Density { grid: g, values } => {
            if g.dim() != d {
                return Err(Error::DimMismatch { expected: d, got: g.dim() });
            }
            Some(DensitySampler::new(g, values)?)
        }
        InitialCondition::Point(p) if p.len() != d => return Err(Error::DimMismatch { expected: d, got: p.len() }),
        InitialCondition::Samples(s) if s.len() != n_paths * d => {
            return Err(Error::DimMismatch {
                expected: n_paths * d,
                got: s.len(),
            })
        }
        _ => None,
    };
    let dt = grid.dt();
    let sd = (spec.real_noise_rate() * dt).sqrt();
    let axes = drift.grid.axes.clone();
    let widths: Vec<f64> = axes
        .iter()
        .map(|a| match policy {
            BoundaryPolicy::Periodic => a.period(),
            _ => a.max - a.min,
        })
        .collect();
    // snapshot index for every step, resolved once
    let lookup: Vec<usize> = (0..=n_steps).map(|k| drift.check_time(grid.time(k))).collect::<Result<_>>()?;
    let table = DriftTable::new(drift);
    let dd = d * d;

    // Each chunk returns its trajectories (record-major within the chunk), qv and drift qv.
    let run_chunk = |c: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let first = c * LOCKSTEP;
        let m = LOCKSTEP.min(n_paths - first);
        let mut rngs: Vec<_> = (first..first + m).map(|k| seed.stream(k as u64)).collect();
        let mut x = vec![0.0; m * d];
        for (p, rng) in rngs.iter_mut().enumerate() {
            let xp = &mut x[p * d..(p + 1) * d];
            match initial {
                InitialCondition::Point(pt) => xp.copy_from_slice(pt),
                InitialCondition::Samples(s) => xp.copy_from_slice(&s[(first + p) * d..(first + p + 1) * d]),
                InitialCondition::Density { .. } => sampler.as_ref().expect("density sampler").sample(rng, xp),
            }
            confine(xp, &axes, policy)?;
        }
        let mut traj = vec![0.0; n_rec * m * d];
        let mut qv = vec![0.0; m * dd];
        let mut bqv = vec![0.0; m * dd];
        let store = |traj: &mut [f64], step: usize, x: &[f64]| {
            if step % options.record_stride == 0 {
                let r = step / options.record_stride;
                traj[r * m * d..(r + 1) * m * d].copy_from_slice(x);
            }
        };
        let start = match options.direction {
            Direction::Forward => 0,
            Direction::Backward => n_steps,
        };
        store(&mut traj, start, &x);
        let mut b = [0.0; 2];
        let mut dx = [0.0; 2];
        let mut bdt = [0.0; 2];
        for s in 0..n_steps {
            let (from, to, sign) = match options.direction {
                Direction::Forward => (s, s + 1, 1.0),
                Direction::Backward => (n_steps - s, n_steps - s - 1, -1.0),
            };
            let snap = lookup[from];
            for (p, rng) in rngs.iter_mut().enumerate() {
                let xp = &mut x[p * d..(p + 1) * d];
                table.eval(snap, xp, &mut b);
                for i in 0..d {
                    let step = b[i] * dt;
                    if !step.is_finite() || step.abs() > widths[i] {
                        return Err(Error::StepTooLarge {
                            displacement: step.abs(),
                            width: widths[i],
                        });
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    bdt[i] = sign * step;
                    dx[i] = bdt[i] + sd * z;
                    xp[i] += dx[i];
                }
                for i in 0..d {
                    for j in 0..d {
                        qv[p * dd + i * d + j] += dx[i] * dx[j];
                        bqv[p * dd + i * d + j] += bdt[i] * bdt[j];
                    }
                }
                confine(xp, &axes, policy)?;
            }
            store(&mut traj, to, &x);
        }
        Ok((traj, qv, bqv))
    };

    let n_chunks = n_paths.div_ceil(LOCKSTEP);
    let chunks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
        (0..n_chunks).into_par_iter().map(run_chunk).collect::<Result<_>>()?;
    let mut positions = vec![Vec::with_capacity(n_paths * d); n_rec];
    let mut qv = Vec::with_capacity(n_paths * dd);
    let mut drift_qv = Vec::with_capacity(n_paths * dd);
    for (traj, q, bq) in chunks {
        let m = q.len() / dd;
        for (r, pos) in positions.iter_mut().enumerate() {
            pos.extend_from_slice(&traj[r * m * d..(r + 1) * m * d]);
        }
        qv.extend(q);
        drift_qv.extend(bq);
    }
    Ok(DriftEnsemble {
        grid,
        dim: d,
        n_paths,
        direction: options.direction,
        spec,
        seed,
        boundary: policy,
        record_stride: options.record_stride,
        positions,
        qv,
        drift_qv,
        interpolation: "multilinear in space, nearest snapshot in time",
    })
}

fn confine(x: &mut [f64], axes: &[crate::params::Axis], policy: BoundaryPolicy) -> Result<()> {
    for (xi, a) in x.iter_mut().zip(axes) {
        match policy {
            BoundaryPolicy::Reflect => *xi = reflect(*xi, a.min, a.max),
            BoundaryPolicy::Periodic => {
                let p = a.period();
                if !(*xi >= a.min && *xi < a.min + p) {
                    *xi = a.min + (*xi - a.min).rem_euclid(p);
                }
            }
            BoundaryPolicy::Strict => {
                if !(*xi >= a.min && *xi <= a.max) {
                    return Err(Error::DriftLookupOutOfBox(*xi));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMethod {
    /// One bin per grid cell, centred on the node.
    Histogram,
    /// Gaussian kernel with Silverman's bandwidth.
    Kde,
}

/// Density on the nodes of a grid; node `j` stands for the cell around it.
#[derive(Debug, Clone, Serialize)]
pub struct DensityEstimate {
    #[serde(skip)]
    pub grid: SpaceGrid,
    pub values: Vec<f64>,
    pub method: DensityMethod,
    /// KDE bandwidth per axis.
    pub bandwidth: Option<Vec<f64>>,
    pub n_samples: usize,
    pub sample_mean: Vec<f64>,
    pub sample_var: Vec<f64>,
}

/// Estimates the ensemble density at time `t` on `grid`.
pub fn density_estimate(ens: &DriftEnsemble, t: f64, method: DensityMethod, grid: &SpaceGrid) -> Result<DensityEstimate> {
    if ens.n_paths == 0 {
        return Err(Error::EmptyEnsemble);
    }
    density_from_samples(ens.positions_at(t)?, ens.dim, method, grid)
}

/// Same as [`density_estimate`] for raw path-major samples.
pub fn density_from_samples(samples: &[f64], dim: usize, method: DensityMethod, grid: &SpaceGrid) -> Result<DensityEstimate> {
    if grid.dim() != dim {
        return Err(Error::DimMismatch { expected: grid.dim(), got: dim });
    }
    let n = samples.len() / dim;
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for i in 0..dim {
        let mut m = Moments::default();
        for k in 0..n {
            m.push(samples[k * dim + i]);
        }
        mean[i] = m.mean();
        var[i] = m.variance();
    }
    let vol = grid.cell_volume();
    let (values, bandwidth) = match method {
        DensityMethod::Histogram => {
            let mut counts = vec![0.0; grid.len()];
            for k in 0..n {
                if let Some(idx) = cell_of(grid, &samples[k * dim..(k + 1) * dim]) {
                    counts[idx] += 1.0;
                }
            }
            (counts.into_iter().map(|c| c / (n as f64 * vol)).collect(), None)
        }
        DensityMethod::Kde => {
            let bw: Vec<f64> = (0..dim)
                .map(|i| {
                    let mut col: Vec<f64> = (0..n).map(|k| samples[k * dim + i]).collect();
                    silverman_bandwidth(&mut col, dim)
                })
                .collect();
            (kde(samples, dim, grid, &bw), Some(bw))
        }
    };
    Ok(DensityEstimate {
        grid: grid.clone(),
        values,
        method,
        bandwidth,
        n_samples: n,
        sample_mean: mean,
        sample_var: var,
    })
}

fn cell_of(grid: &SpaceGrid, x: &[f64]) -> Option<usize> {
    let mut idx = 0;
    for (a, xi) in grid.axes.iter().zip(x) {
        let j = ((xi - a.min) / a.h()).round();
        if !(j >= 0.0 && j < a.n as f64) {
            return None;
        }
        idx = idx * a.n + j as usize;
    }
    Some(idx)
}

/// `0.9 min(sd, IQR/1.34) n^{-1/5}` in 1d, `sd n^{-1/(d+4)}` otherwise.
fn silverman_bandwidth(col: &mut [f64], dim: usize) -> f64 {
    let n = col.len() as f64;
    let mut m = Moments::default();
    for &v in col.iter() {
        m.push(v);
    }
    let sd = m.variance().sqrt();
    if dim > 1 {
        return sd * n.powf(-1.0 / (dim as f64 + 4.0));
    }
    col.sort_by(f64::total_cmp);
    let q = |p: f64| col[((p * (col.len() - 1) as f64).round() as usize).min(col.len() - 1)];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread * n.powf(-0.2);
    if bw > 0.0 {
        bw
    } else {
        f64::EPSILON.max(1e-12)
    }
}

fn kde(samples: &[f64], dim: usize, grid: &SpaceGrid, bw: &[f64]) -> Vec<f64> {
    let n = samples.len() / dim;
    let cut = 6.0;
    let norm = |h: f64| 1.0 / ((2.0 * PI).sqrt() * h);
    match grid.axes.as_slice() {
        [x] => {
            let mut s: Vec<f64> = samples.to_vec();
            s.sort_by(f64::total_cmp);
            let h = bw[0];
            (0..x.n)
                .into_par_iter()
                .map(|j| {
                    let p = x.point(j);
                    let lo = s.partition_point(|&v| v < p - cut * h);
                    let hi = s.partition_point(|&v| v <= p + cut * h);
                    s[lo..hi].iter().map(|v| (-0.5 * ((p - v) / h).powi(2)).exp()).sum::<f64>() * norm(h)
                        / n as f64
                })
                .collect()
        }
        [x, y] => {
            let mut out = vec![0.0; grid.len()];
            let (hx, hy) = (bw[0], bw[1]);
            for k in 0..n {
                let (px, py) = (samples[2 * k], samples[2 * k + 1]);
                let range = |a: &crate::params::Axis, p: f64, h: f64| {
                    let lo = (((p - cut * h) - a.min) / a.h()).ceil().max(0.0) as usize;
                    let hi = ((((p + cut * h) - a.min) / a.h()).floor()).min((a.n - 1) as f64);
                    (lo, hi)
                };
                let (ilo, ihi) = range(x, px, hx);
                let (jlo, jhi) = range(y, py, hy);
                if ihi < 0.0 || jhi < 0.0 {
                    continue;
                }
                for i in ilo..=ihi as usize {
                    let gx = (-0.5 * ((x.point(i) - px) / hx).powi(2)).exp();
                    for j in jlo..=jhi as usize {
                        out[i * y.n + j] += gx * (-0.5 * ((y.point(j) - py) / hy).powi(2)).exp();
                    }
                }
            }
            let c = norm(hx) * norm(hy) / n as f64;
            out.into_iter().map(|v| v * c).collect()
        }
        _ => unreachable!("grids are 1d or 2d"),
    }
}

/// Weights `int_cell hat_j(x) dx` of the nodal hat functions of `fine` over the
/// cells `[c - H/2, c + H/2]` of axis `coarse`.
fn hat_weights(fine: &crate::params::Axis, coarse: &crate::params::Axis) -> Vec<Vec<(usize, f64)>> {
    let h = fine.h();
    let hc = coarse.h();
    // integral of hat_j over [min, x]
    let hat_cdf = |j: usize, x: f64| -> f64 {
        let c = fine.point(j);
        let a = (x - c) / h;
        let left = j > 0;
        let right = j + 1 < fine.n;
        let part = |u: f64| -> f64 {
            // int_{-inf}^{u} max(0, 1-|s|) ds restricted to existing sides
            let u = u.clamp(-1.0, 1.0);
            let l = if left { if u < 0.0 { 0.5 * (1.0 + u).powi(2) } else { 0.5 } } else { 0.0 };
            let r = if right && u > 0.0 { u - 0.5 * u * u } else { 0.0 };
            l + r
        };
        h * part(a)
    };
    (0..coarse.n)
        .map(|c| {
            let (lo, hi) = (coarse.point(c) - 0.5 * hc, coarse.point(c) + 0.5 * hc);
            let j0 = (((lo - fine.min) / h).floor() - 1.0).max(0.0) as usize;
            let j1 = ((((hi - fine.min) / h).ceil() + 1.0).max(0.0) as usize).min(fine.n - 1);
            (j0..=j1)
                .map(|j| (j, hat_cdf(j, hi) - hat_cdf(j, lo)))
                .filter(|(_, w)| *w > 0.0)
                .collect()
        })
        .collect()
}

/// Cell averages over `coarse` of the piecewise-(bi)linear interpolant of a
/// nodal density on `fine`: the expected histogram of exact samples.
pub fn project_density(values: &[f64], fine: &SpaceGrid, coarse: &SpaceGrid) -> Result<Vec<f64>> {
    if values.len() != fine.len() || fine.dim() != coarse.dim() {
        return Err(Error::GridMismatch("projection between incompatible grids".into()));
    }
    let vol = coarse.cell_volume();
    match (fine.axes.as_slice(), coarse.axes.as_slice()) {
        ([f], [c]) => Ok(hat_weights(f, c)
            .iter()
            .map(|ws| ws.iter().map(|(j, w)| values[*j] * w).sum::<f64>() / vol)
            .collect()),
        ([fx, fy], [cx, cy]) => {
            let (wx, wy) = (hat_weights(fx, cx), hat_weights(fy, cy));
            let mut out = vec![0.0; coarse.len()];
            for (i, wxi) in wx.iter().enumerate() {
                for (j, wyj) in wy.iter().enumerate() {
                    let mut s = 0.0;
                    for (a, ua) in wxi {
                        for (b, vb) in wyj {
                            s += values[a * fy.n + b] * ua * vb;
                        }
                    }
                    out[i * cy.n + j] = s / vol;
                }
            }
            Ok(out)
        }
        _ => Err(Error::UnsupportedDim(fine.dim())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityComparison {
    /// `sum |a - b| dV`.
    pub l1: f64,
    /// `max |A - B|` of the cumulative cell masses (1d only).
    pub ks: Option<f64>,
    pub max_abs: f64,
}

/// Compares two cell densities on the same grid.
pub fn compare_density(a: &[f64], b: &[f64], grid_a: &SpaceGrid, grid_b: &SpaceGrid) -> Result<DensityComparison> {
    if grid_a != grid_b || a.len() != grid_a.len() || b.len() != grid_b.len() {
        return Err(Error::GridMismatch("densities live on different grids".into()));
    }
    let vol = grid_a.cell_volume();
    let l1 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * vol;
    let max_abs = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let ks = (grid_a.dim() == 1).then(|| {
        let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0f64);
        for (x, y) in a.iter().zip(b) {
            ca += x * vol;
            cb += y * vol;
            d = d.max((ca - cb).abs());
        }
        d
    });
    Ok(DensityComparison { l1, ks, max_abs })
}

/// One-sample KS statistic of ensemble component `i` at time `t` against a CDF.
pub fn ks_against(ens: &DriftEnsemble, t: f64, i: usize, cdf: impl Fn(f64) -> f64) -> Result<f64> {
    Ok(ks_against_cdf(&ens.component_at(t, i)?, cdf))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UncertaintyStats {
    pub sigma_x: f64,
    pub sigma_p: f64,
    pub product: f64,
    /// `(|alpha| hbar / 2)(1 + cos phi)`.
    pub bound: f64,
}

/// `sigma_x` from the Born density, `sigma_p` from `|FFT Psi|^2` with `p = hbar k`.
pub fn uncertainty_stats(field: &WaveField, snapshot: usize) -> Result<UncertaintyStats> {
    if field.grid.dim() != 1 {
        return Err(Error::UnsupportedDim(field.grid.dim()));
    }
    let spec = &field.spec;
    let slice = &field.values[snapshot];
    let rho = born_density_slice(slice, &field.grid, spec)?;
    let (_, var_x) = density_moments(&rho, &field.grid, 0);
    let n = slice.len();
    let h = field.grid.axes[0].h();
    let mut buf = slice.clone();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (j, v) in buf.iter().enumerate() {
        let f = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
        let k = 2.0 * PI * f / (n as f64 * h);
        let w = v.norm_sqr();
        z += w;
        m1 += w * k;
        m2 += w * k * k;
    }
    if !(z > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let var_k = (m2 / z - (m1 / z).powi(2)).max(0.0);
    let sigma_x = var_x.sqrt();
    let sigma_p = spec.hbar * var_k.sqrt();
    Ok(UncertaintyStats {
        sigma_x,
        sigma_p,
        product: sigma_x * sigma_p,
        bound: 0.5 * spec.alpha_mag * spec.hbar * (1.0 + spec.phi.cos()),
    })
}

/// Settings for [`two_sided_check`].
#[derive(Debug, Clone)]
pub struct TwoSidedOptions {
    pub n_paths: usize,
    pub seed: SeedSpec,
    /// Histogram grid used for the comparison.
    pub comparison_grid: SpaceGrid,
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoSidedReport {
    pub t_mid: f64,
    pub forward: DensityComparison,
    pub backward: DensityComparison,
    /// Ensemble means at the midpoint against the PDE density mean, per axis.
    pub forward_mean: Vec<f64>,
    pub backward_mean: Vec<f64>,
    pub pde_mean: Vec<f64>,
}

/// Forward ensemble from `rho(t0)` with `b+` and backward ensemble from
/// `rho(tf)` with `b-`, both compared with the PDE density at the midpoint.
pub fn two_sided_check(field: &WaveField, spec: &DiffusionSpec, options: &TwoSidedOptions) -> Result<TwoSidedReport> {
    let times = field.times;
    if times.n_steps % (2 * field.stride) != 0 {
        return Err(Error::InvalidGrid("midpoint time must be a snapshot".into()));
    }
    let t_mid = times.time(times.n_steps / 2);
    let rho = born_density(field)?;
    let sim_grid = times;
    let run = |dir: Direction, start: &[f64], seed: SeedSpec| -> Result<DriftEnsemble> {
        let b = fokker_planck_drift(field, spec, dir)?;
        drift_diffusion_simulate(
            &b,
            spec,
            &sim_grid,
            options.n_paths,
            &InitialCondition::Density {
                grid: field.grid.clone(),
                values: start.to_vec(),
            },
            seed,
            SimulationOptions {
                direction: dir,
                boundary: None,
                record_stride: times.n_steps / 2,
            },
        )
    };
    let fwd = run(Direction::Forward, &rho[0], options.seed.derive(1))?;
    let bwd = run(Direction::Backward, rho.last().expect("snapshots"), options.seed.derive(2))?;
    let mid = &rho[field.snapshot_index(t_mid)?];
    let target = project_density(mid, &field.grid, &options.comparison_grid)?;
    let cg = &options.comparison_grid;
    let hist = |e: &DriftEnsemble| density_estimate(e, t_mid, DensityMethod::Histogram, cg);
    let (hf, hb) = (hist(&fwd)?, hist(&bwd)?);
    let d = field.grid.dim();
    let pde_mean: Vec<f64> = (0..d).map(|i| density_moments(mid, &field.grid, i).0).collect();
    Ok(TwoSidedReport {
        t_mid,
        forward: compare_density(&hf.values, &target, cg, cg)?,
        backward: compare_density(&hb.values, &target, cg, cg)?,
        forward_mean: hf.sample_mean,
        backward_mean: hb.sample_mean,
        pde_mean,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FringeMatch {
    /// Index of each reference maximum on the comparison grid.
    pub reference: Vec<usize>,
    /// Argmax of the tested density inside the same lobe.
    pub measured: Vec<usize>,
    pub max_offset: usize,
}

/// Locates the lobes of `reference` (local maxima above `min_fraction` of the
/// global maximum, bounded by the neighbouring minima) and finds the argmax
/// of `measured` inside each lobe.
pub fn fringe_maxima(reference: &[f64], measured: &[f64], min_fraction: f64) -> Result<FringeMatch> {
    if reference.len() != measured.len() || reference.len() < 3 {
        return Err(Error::GridMismatch("fringe comparison needs equal 1d grids".into()));
    }
    let n = reference.len();
    let top = reference.iter().cloned().fold(0.0f64, f64::max);
    let peaks: Vec<usize> = (1..n - 1)
        .filter(|&j| reference[j] > reference[j - 1] && reference[j] >= reference[j + 1] && reference[j] >= min_fraction * top)
        .collect();
    let mut out = FringeMatch {
        reference: peaks.clone(),
        measured: Vec::new(),
        max_offset: 0,
    };
    for (p, &j) in peaks.iter().enumerate() {
        let argmin = |a: usize, b: usize| (a..=b).min_by(|&x, &y| reference[x].total_cmp(&reference[y])).unwrap_or(a);
        let lo = if p == 0 { 0 } else { argmin(peaks[p - 1], j) };
        let hi = if p + 1 == peaks.len() { n - 1 } else { argmin(j, peaks[p + 1]) };
        let m = (lo..=hi).max_by(|&x, &y| measured[x].total_cmp(&measured[y])).unwrap_or(j);
        out.max_offset = out.max_offset.max(m.abs_diff(j));
        out.measured.push(m);
    }
    Ok(out)
}
