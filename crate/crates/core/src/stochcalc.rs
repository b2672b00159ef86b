//! Discrete stochastic integrals along sampled paths and action functionals.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom2::{christoffel_from_metric, riemann_lowered, ChartedManifold};
use crate::noise::{rotated_wiener_stream, ComplexPathEnsemble, PathSource};
use crate::params::{DiffusionSpec, SeedSpec, TimeGrid};
use crate::potential::PotentialSpec;
use crate::stats::{self, chunked_reduce, Moments};

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);

/// One path sampled on a uniform grid, `(n_steps + 1) * dim` values, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<C>,
}

impl Path {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<C>) -> Result<Self> {
        let p = Path { grid, dim, values };
        p.check()?;
        Ok(p)
    }

    pub fn from_real(grid: TimeGrid, dim: usize, values: &[f64]) -> Result<Self> {
        Path::new(grid, dim, values.iter().map(|&v| C::new(v, 0.0)).collect())
    }

    fn check(&self) -> Result<()> {
        let want = (self.grid.n_steps + 1) * self.dim;
        if self.values.len() != want {
            return Err(Error::GridMismatch(format!(
                "path holds {} values, grid needs {want}",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn point(&self, k: usize) -> &[C] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Path `k` of an ensemble.
    pub fn from_ensemble(ens: &ComplexPathEnsemble, k: usize) -> Self {
        Path {
            grid: ens.grid,
            dim: ens.dim,
            values: ens.path(k),
        }
    }

    /// Path `k` of any source, rebuilt from its ray increments.
    pub fn from_source<S: PathSource + ?Sized>(src: &S, k: usize) -> Self {
        let d = src.dim();
        let n = src.grid().n_steps;
        let mut buf = vec![0.0; src.buffer_len()];
        src.fill_increments(k, &mut buf);
        let rays = src.rays();
        let mut w = vec![0.0; d];
        let mut values = vec![ZERO; d];
        for s in 0..n {
            for a in 0..d {
                w[a] += buf[s * d + a];
                values.push(rays[a] * w[a]);
            }
        }
        Path {
            grid: *src.grid(),
            dim: d,
            values,
        }
    }

    /// Every `factor`-th point.
    pub fn coarsen(&self, factor: usize) -> Result<Path> {
        let grid = self.grid.coarsen(factor)?;
        let mut values = Vec::with_capacity((grid.n_steps + 1) * self.dim);
        for k in 0..=grid.n_steps {
            values.extend_from_slice(self.point(k * factor));
        }
        Ok(Path {
            grid,
            dim: self.dim,
            values,
        })
    }
}

pub type FormFn = Arc<dyn Fn(&[C], f64, &mut [C]) + Send + Sync>;

/// A covector-valued integrand `f_i(x, t)` with optional Jacobian
/// `out[i * d + j] = d_j f_i`. Positions are complex so that holomorphic
/// integrands act on complex paths directly; real paths have zero imaginary part.
#[derive(Clone)]
pub struct IntegrandSpec {
    pub dim: usize,
    pub form: FormFn,
    pub derivative: Option<FormFn>,
}

impl fmt::Debug for IntegrandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegrandSpec")
            .field("dim", &self.dim)
            .field("derivative", &self.derivative.is_some())
            .finish()
    }
}

impl IntegrandSpec {
    pub fn new(dim: usize, form: impl Fn(&[C], f64, &mut [C]) + Send + Sync + 'static) -> Self {
        IntegrandSpec {
            dim,
            form: Arc::new(form),
            derivative: None,
        }
    }

    pub fn with_derivative(mut self, d: impl Fn(&[C], f64, &mut [C]) + Send + Sync + 'static) -> Self {
        self.derivative = Some(Arc::new(d));
        self
    }

    /// `f_i = c_i`.
    pub fn constant(c: Vec<C>) -> Self {
        let d = c.len();
        IntegrandSpec::new(d, move |_, _, out| out.copy_from_slice(&c))
            .with_derivative(move |_, _, out| out[..d * d].fill(ZERO))
    }

    /// `f_i = x_i`.
    pub fn identity(dim: usize) -> Self {
        IntegrandSpec::new(dim, |x, _, out| out.copy_from_slice(x)).with_derivative(move |_, _, out| {
            out[..dim * dim].fill(ZERO);
            for i in 0..dim {
                out[i * dim + i] = C::new(1.0, 0.0);
            }
        })
    }

    /// `f_i = x_i^2`.
    pub fn square(dim: usize) -> Self {
        IntegrandSpec::new(dim, |x, _, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = v * v;
            }
        })
        .with_derivative(move |x, _, out| {
            out[..dim * dim].fill(ZERO);
            for i in 0..dim {
                out[i * dim + i] = 2.0 * x[i];
            }
        })
    }

    pub fn eval(&self, x: &[C], t: f64, out: &mut [C]) {
        (self.form)(x, t, out)
    }

    /// Largest relative deviation between the supplied Jacobian and a central
    /// finite difference, over `n_points` random real points in `[-1, 1]^d`.
    pub fn check_derivative(&self, n_points: usize, rng: &mut impl Rng) -> Result<f64> {
        let der = self.derivative.as_ref().ok_or(Error::MissingDerivative)?;
        let d = self.dim;
        let mut worst: f64 = 0.0;
        let mut jac = vec![ZERO; d * d];
        let (mut fp, mut fm) = (vec![ZERO; d], vec![ZERO; d]);
        for _ in 0..n_points {
            let x: Vec<C> = (0..d).map(|_| C::new(2.0 * rng.random::<f64>() - 1.0, 0.0)).collect();
            let t = rng.random::<f64>();
            der(&x, t, &mut jac);
            for j in 0..d {
                let h = 1e-5 * (1.0 + x[j].norm());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                self.eval(&xp, t, &mut fp);
                self.eval(&xm, t, &mut fm);
                for i in 0..d {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let rel = (fd - jac[i * d + j]).norm() / (1.0 + jac[i * d + j].norm());
                    worst = worst.max(rel);
                }
            }
        }
        Ok(worst)
    }
}

fn check_dims(f_dim: usize, path: &Path) -> Result<()> {
    path.check()?;
    if f_dim != path.dim {
        return Err(Error::GridMismatch(format!(
            "integrand has dimension {f_dim}, path has {}",
            path.dim
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Rule {
    Left,
    Right,
    Mid,
}

fn riemann_sum(f: &IntegrandSpec, path: &Path, rule: Rule) -> Result<Vec<C>> {
    check_dims(f.dim, path)?;
    let d = path.dim;
    let n = path.grid.n_steps;
    let mut out = Vec::with_capacity(n + 1);
    out.push(ZERO);
    let mut fl = vec![ZERO; d];
    let mut fr = vec![ZERO; d];
    let mut acc = ZERO;
    for k in 0..n {
        let (x0, x1) = (path.point(k), path.point(k + 1));
        let (t0, t1) = (path.grid.time(k), path.grid.time(k + 1));
        match rule {
            Rule::Left => f.eval(x0, t0, &mut fl),
            Rule::Right => f.eval(x1, t1, &mut fl),
            Rule::Mid => {
                f.eval(x0, t0, &mut fl);
                f.eval(x1, t1, &mut fr);
                for (a, b) in fl.iter_mut().zip(&fr) {
                    *a = 0.5 * (*a + b);
                }
            }
        }
        for i in 0..d {
            acc += fl[i] * (x1[i] - x0[i]);
        }
        out.push(acc);
    }
    Ok(out)
}

/// `sum_k f(X_k) . (X_{k+1} - X_k)`, cumulative.
pub fn ito_forward_integral(f: &IntegrandSpec, path: &Path) -> Result<Vec<C>> {
    riemann_sum(f, path, Rule::Left)
}

/// `sum_k f(X_{k+1}) . (X_{k+1} - X_k)`, cumulative.
pub fn ito_backward_integral(f: &IntegrandSpec, path: &Path) -> Result<Vec<C>> {
    riemann_sum(f, path, Rule::Right)
}

/// `sum_k (f(X_k) + f(X_{k+1}))/2 . (X_{k+1} - X_k)`, cumulative.
pub fn stratonovich_integral(f: &IntegrandSpec, path: &Path) -> Result<Vec<C>> {
    riemann_sum(f, path, Rule::Mid)
}

/// `sum_k F_ij(X_k) dX^i dX^j` (second factor optionally conjugated),
/// where `weight` writes the `d x d` matrix `F_ij`.
pub fn qv_integral(
    weight: &(dyn Fn(&[C], f64, &mut [C]) + Sync),
    path: &Path,
    conjugate_second: bool,
) -> Result<Vec<C>> {
    path.check()?;
    let d = path.dim;
    let n = path.grid.n_steps;
    let mut w = vec![ZERO; d * d];
    let mut out = Vec::with_capacity(n + 1);
    out.push(ZERO);
    let mut acc = ZERO;
    for k in 0..n {
        let (x0, x1) = (path.point(k), path.point(k + 1));
        weight(x0, path.grid.time(k), &mut w);
        for i in 0..d {
            let di = x1[i] - x0[i];
            for j in 0..d {
                let dj = x1[j] - x0[j];
                acc += w[i * d + j] * di * if conjugate_second { dj.conj() } else { dj };
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// QV integral with a constant bilinear form.
pub fn qv_integral_const(form: &[C], path: &Path, conjugate_second: bool) -> Result<Vec<C>> {
    if form.len() != path.dim * path.dim {
        return Err(Error::GridMismatch("bilinear form does not match the path dimension".into()));
    }
    let f = form.to_vec();
    qv_integral(&move |_: &[C], _: f64, out: &mut [C]| out.copy_from_slice(&f), path, conjugate_second)
}

/// Terminal residuals of `S = I+ + (1/2) int df d[X,X]` and `S = I- - (1/2) int df d[X,X]`.
pub fn conversion_residuals(f: &IntegrandSpec, path: &Path) -> Result<(C, C)> {
    let der = f.derivative.as_ref().ok_or(Error::MissingDerivative)?;
    let s = *stratonovich_integral(f, path)?.last().unwrap();
    let fw = *ito_forward_integral(f, path)?.last().unwrap();
    let bw = *ito_backward_integral(f, path)?.last().unwrap();
    let q = *qv_integral(der.as_ref(), path, false)?.last().unwrap();
    Ok((s - fw - 0.5 * q, s - bw + 0.5 * q))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConversionReport {
    pub n_paths: usize,
    pub max_forward: f64,
    pub max_backward: f64,
    pub rms_forward: f64,
    pub rms_backward: f64,
}

fn conversion_over<S: PathSource + ?Sized>(f: &IntegrandSpec, src: &S, coarsen: usize) -> Result<ConversionReport> {
    if f.derivative.is_none() {
        return Err(Error::MissingDerivative);
    }
    if f.dim != src.dim() {
        return Err(Error::GridMismatch("integrand and ensemble dimensions differ".into()));
    }
    let res = chunked_reduce(
        src.n_paths(),
        || Ok((0.0f64, 0.0f64, 0.0f64, 0.0f64)),
        |acc: &mut Result<(f64, f64, f64, f64)>, k| {
            if let Ok(a) = acc {
                let p = Path::from_source(src, k);
                let r = if coarsen == 1 { Ok(p) } else { p.coarsen(coarsen) }
                    .and_then(|p| conversion_residuals(f, &p));
                match r {
                    Ok((rf, rb)) => {
                        a.0 = a.0.max(rf.norm());
                        a.1 = a.1.max(rb.norm());
                        a.2 += rf.norm_sqr();
                        a.3 += rb.norm_sqr();
                    }
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok(x), Ok(y)) => {
                x.0 = x.0.max(y.0);
                x.1 = x.1.max(y.1);
                x.2 += y.2;
                x.3 += y.3;
            }
            (Ok(_), Err(e)) => *a = Err(e),
            _ => {}
        },
    )?;
    let n = src.n_paths() as f64;
    Ok(ConversionReport {
        n_paths: src.n_paths(),
        max_forward: res.0,
        max_backward: res.1,
        rms_forward: (res.2 / n).sqrt(),
        rms_backward: (res.3 / n).sqrt(),
    })
}

/// Per-path conversion residuals over an ensemble.
pub fn conversion_check<S: PathSource + ?Sized>(f: &IntegrandSpec, ens: &S) -> Result<ConversionReport> {
    conversion_over(f, ens, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderStudy {
    pub dts: Vec<f64>,
    pub reports: Vec<ConversionReport>,
    /// Fitted slope of `log rms` against `log dt`.
    pub order_forward: f64,
    pub order_backward: f64,
}

/// Convergence study of the conversion residual: one fine ensemble with
/// `grid.n_steps` steps, evaluated at each coarsening factor.
pub fn conversion_order_study(
    f: &IntegrandSpec,
    spec: &DiffusionSpec,
    grid: TimeGrid,
    factors: &[usize],
    n_paths: usize,
    seed: SeedSpec,
) -> Result<OrderStudy> {
    let src = rotated_wiener_stream(spec, grid, f.dim, n_paths, seed)?;
    let mut dts = Vec::new();
    let mut reports = Vec::new();
    for &c in factors {
        dts.push(grid.coarsen(c)?.dt());
        reports.push(conversion_over(f, &src, c)?);
    }
    let lx: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let lf: Vec<f64> = reports.iter().map(|r| r.rms_forward.ln()).collect();
    let lb: Vec<f64> = reports.iter().map(|r| r.rms_backward.ln()).collect();
    Ok(OrderStudy {
        order_forward: stats::slope(&lx, &lf),
        order_backward: stats::slope(&lx, &lb),
        dts,
        reports,
    })
}

/// Ensemble of real position paths, `(n_steps + 1) * dim` per path.
#[derive(Debug, Clone, PartialEq)]
pub struct RealPathSet {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub values: Vec<f64>,
    velocities: bool,
}

impl RealPathSet {
    pub fn new(grid: TimeGrid, dim: usize, n_paths: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (grid.n_steps + 1) * dim * n_paths {
            return Err(Error::GridMismatch("path data does not match the grid".into()));
        }
        Ok(RealPathSet {
            grid,
            dim,
            n_paths,
            values,
            velocities: false,
        })
    }

    /// Real projection `Re M` of an ensemble shifted by `x0`.
    pub fn from_real_part(ens: &ComplexPathEnsemble, x0: &[f64]) -> Result<Self> {
        if x0.len() != ens.dim {
            return Err(Error::DimMismatch {
                expected: ens.dim,
                got: x0.len(),
            });
        }
        let mut v = Vec::with_capacity((ens.grid.n_steps + 1) * ens.dim * ens.n_paths);
        for k in 0..ens.n_paths {
            for (i, m) in ens.path(k).iter().enumerate() {
                v.push(x0[i % ens.dim] + m.re);
            }
        }
        RealPathSet::new(ens.grid, ens.dim, ens.n_paths, v)
    }

    /// Attaches the difference-quotient velocity estimates: `V+` forward,
    /// `V-` backward, `V o` across each step and `v2 = dX dX / dt`.
    pub fn with_difference_velocities(mut self) -> Self {
        self.velocities = true;
        self
    }

    pub fn has_velocities(&self) -> bool {
        self.velocities
    }

    pub fn path(&self, k: usize) -> &[f64] {
        let per = (self.grid.n_steps + 1) * self.dim;
        &self.values[k * per..(k + 1) * per]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LagrangianKind {
    Stratonovich,
    ItoForward,
    ItoBackward,
}

#[derive(Debug, Clone)]
pub enum MetricContext {
    Flat,
    Manifold(Arc<ChartedManifold>),
}

#[derive(Debug, Clone)]
pub struct LagrangianSpec {
    pub kind: LagrangianKind,
    pub potential: PotentialSpec,
    pub metric: MetricContext,
}

impl LagrangianSpec {
    pub fn flat(kind: LagrangianKind, potential: PotentialSpec) -> Self {
        LagrangianSpec {
            kind,
            potential,
            metric: MetricContext::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let MetricContext::Manifold(m) = &self.metric {
            if m.metric_d2.is_none() {
                return Err(Error::MissingGeometry(
                    "manifold Lagrangian needs second metric derivatives for the Riemann term".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Monte-Carlo action estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionEstimate {
    pub mean: f64,
    pub se: f64,
    /// Fixed-step estimator of the divergent part, `(m/2) sum g dX (dX_k - dX_{k-1})/dt`;
    /// never included in `mean`.
    pub divergent_mean: f64,
    pub divergent_se: f64,
}

struct Geometry {
    g: Vec<f64>,
    gamma: Vec<f64>,
    riemann: Vec<f64>,
    ginv: Vec<f64>,
}

fn geometry_at(metric: &MetricContext, x: &[f64]) -> Result<Option<Geometry>> {
    match metric {
        MetricContext::Flat => Ok(None),
        MetricContext::Manifold(m) => {
            if !m.in_domain(x) {
                return Err(Error::MissingGeometry(format!("point {x:?} lies outside the chart")));
            }
            Ok(Some(Geometry {
                g: m.metric_at(x),
                gamma: christoffel_from_metric(m, x)?,
                riemann: riemann_lowered(m, x)?,
                ginv: m.inverse_metric(x)?,
            }))
        }
    }
}

fn metric_dot(geo: &Option<Geometry>, a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    match geo {
        None => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Some(g) => {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += g.g[i * d + j] * a[i] * b[j];
                }
            }
            s
        }
    }
}

fn path_action(
    x: &[f64],
    grid: &TimeGrid,
    d: usize,
    lag: &LagrangianSpec,
    spec: &DiffusionSpec,
) -> Result<(f64, f64)> {
    let n = grid.n_steps;
    let dt = grid.dt();
    let (m, q) = (spec.mass, spec.charge);
    let pt = |k: usize| &x[k * d..(k + 1) * d];
    let pot = &lag.potential;
    let mut a0 = vec![0.0; d];
    let mut a1 = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut dx = vec![0.0; d];
    let mut dx_prev = vec![0.0; d];
    let mut action = 0.0;
    let mut divergent = 0.0;
    for k in 0..n {
        let (x0, x1) = (pt(k), pt(k + 1));
        let (t0, t1) = (grid.time(k), grid.time(k + 1));
        for i in 0..d {
            dx[i] = x1[i] - x0[i];
        }
        let v: Vec<f64> = dx.iter().map(|a| a / dt).collect();
        let step = match lag.kind {
            LagrangianKind::Stratonovich => {
                let mid: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| 0.5 * (a + b)).collect();
                let geo = geometry_at(&lag.metric, &mid)?;
                pot.vector_at(x0, t0, &mut a0);
                pot.vector_at(x1, t1, &mut a1);
                let av: f64 = (0..d).map(|i| 0.5 * (a0[i] + a1[i]) * v[i]).sum();
                let u = 0.5 * (pot.scalar_at(x0, t0) + pot.scalar_at(x1, t1));
                0.5 * m * metric_dot(&geo, &v, &v) + q * av - u
            }
            LagrangianKind::ItoForward | LagrangianKind::ItoBackward => {
                let fwd = lag.kind == LagrangianKind::ItoForward;
                let sign = if fwd { 1.0 } else { -1.0 };
                let (xe, te) = if fwd { (x0, t0) } else { (x1, t1) };
                let geo = geometry_at(&lag.metric, xe)?;
                // realized v2 = dX dX / dt
                let v2: Vec<f64> = (0..d * d).map(|ij| dx[ij / d] * dx[ij % d] / dt).collect();
                let mut w = v.clone();
                if let Some(g) = &geo {
                    for (i, wi) in w.iter_mut().enumerate() {
                        let corr: f64 = (0..d * d).map(|kl| g.gamma[i * d * d + kl] * v2[kl]).sum();
                        *wi += sign * 0.5 * corr;
                    }
                }
                pot.vector_at(xe, te, &mut a0);
                pot.jacobian_at(xe, te, &mut jac)?;
                let mut lin: f64 = (0..d).map(|i| q * a0[i] * w[i]).sum();
                // (q/2) v2^ij nabla_j A_i
                for i in 0..d {
                    for j in 0..d {
                        let mut na = jac[i * d + j];
                        if let Some(g) = &geo {
                            na -= (0..d).map(|l| g.gamma[(l * d + j) * d + i] * a0[l]).sum::<f64>();
                        }
                        lin += sign * 0.5 * q * v2[i * d + j] * na;
                    }
                }
                let mut curv = 0.0;
                if let Some(g) = &geo {
                    // Rank-one realized v2 annihilates the Riemann contraction, so the
                    // expected QV rate s g^ij enters this term.
                    let s = spec.real_noise_rate();
                    let rv = |a: usize, b: usize| s * g.ginv[a * d + b];
                    for i in 0..d {
                        for j in 0..d {
                            for kk in 0..d {
                                for l in 0..d {
                                    curv += g.riemann[((i * d + j) * d + kk) * d + l] * rv(i, kk) * rv(j, l);
                                }
                            }
                        }
                    }
                    curv *= m / 12.0;
                }
                0.5 * m * metric_dot(&geo, &w, &w) + curv + lin - pot.scalar_at(xe, te)
            }
        };
        action += step * dt;
        if k > 0 {
            let geo = geometry_at(&lag.metric, x0)?;
            let dv: Vec<f64> = dx.iter().zip(&dx_prev).map(|(a, b)| a - b).collect();
            divergent += 0.5 * m * metric_dot(&geo, &dx, &dv) / dt;
        }
        dx_prev.copy_from_slice(&dx);
    }
    Ok((action, divergent))
}

fn action_estimate(paths: &RealPathSet, lag: &LagrangianSpec, spec: &DiffusionSpec) -> Result<ActionEstimate> {
    if !paths.has_velocities() {
        return Err(Error::MissingVelocity("path set carries no velocity estimates".into()));
    }
    lag.validate()?;
    let spec = spec.validate()?;
    let res = chunked_reduce(
        paths.n_paths,
        || Ok((Moments::default(), Moments::default())),
        |acc: &mut Result<(Moments, Moments)>, k| {
            if let Ok((a, b)) = acc {
                match path_action(paths.path(k), &paths.grid, paths.dim, lag, &spec) {
                    Ok((s, dv)) => {
                        a.push(s);
                        b.push(dv);
                    }
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok(x), Ok(y)) => {
                x.0.merge(y.0);
                x.1.merge(y.1);
            }
            (Ok(_), Err(e)) => *a = Err(e),
            _ => {}
        },
    )?;
    Ok(ActionEstimate {
        mean: res.0.mean(),
        se: res.0.std_error(),
        divergent_mean: res.1.mean(),
        divergent_se: res.1.std_error(),
    })
}

/// `E[int L o(X, V o, t) dt]` with trapezoid evaluation of `A` and `U`.
pub fn stratonovich_action(paths: &RealPathSet, lag: &LagrangianSpec, spec: &DiffusionSpec) -> Result<ActionEstimate> {
    if lag.kind != LagrangianKind::Stratonovich {
        return Err(Error::UnsupportedRegime(format!("{:?} Lagrangian passed to the Stratonovich action", lag.kind)));
    }
    action_estimate(paths, lag, spec)
}

/// `E[int L0(X, V+-, v2, t) dt]`, the finite part of the Itô action.
pub fn ito_action_finite(paths: &RealPathSet, lag: &LagrangianSpec, spec: &DiffusionSpec) -> Result<ActionEstimate> {
    if lag.kind == LagrangianKind::Stratonovich {
        return Err(Error::UnsupportedRegime("Stratonovich Lagrangian passed to the Itô action".into()));
    }
    action_estimate(paths, lag, spec)
}

/// Paired comparison of `int A o dX` with `int A d+X + (1/2) int dA d[X,X]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearTermCheck {
    pub stratonovich: f64,
    pub ito_corrected: f64,
    /// Mean and standard error of the per-path difference.
    pub diff_mean: f64,
    pub diff_se: f64,
}

pub fn linear_term_equivalence(paths: &RealPathSet, potential: &PotentialSpec) -> Result<LinearTermCheck> {
    let d = paths.dim;
    let a = potential.clone();
    let form = IntegrandSpec::new(d, move |x, t, out| {
        let xr: Vec<f64> = x.iter().map(|v| v.re).collect();
        let mut buf = vec![0.0; xr.len()];
        a.vector_at(&xr, t, &mut buf);
        for (o, b) in out.iter_mut().zip(buf) {
            *o = C::new(b, 0.0);
        }
    });
    let pj = potential.clone();
    let jac = move |x: &[C], t: f64, out: &mut [C]| {
        let xr: Vec<f64> = x.iter().map(|v| v.re).collect();
        let mut buf = vec![0.0; out.len()];
        let _ = pj.jacobian_at(&xr, t, &mut buf);
        for (o, b) in out.iter_mut().zip(buf) {
            *o = C::new(b, 0.0);
        }
    };
    if potential.has_vector() && potential.vector_jacobian.is_none() {
        return Err(Error::MissingDerivative);
    }
    let mut s = Moments::default();
    let mut i = Moments::default();
    let mut diff = Moments::default();
    for k in 0..paths.n_paths {
        let p = Path::from_real(paths.grid, d, paths.path(k))?;
        let sv = stratonovich_integral(&form, &p)?.last().unwrap().re;
        let fv = ito_forward_integral(&form, &p)?.last().unwrap().re;
        let qv = qv_integral(&jac, &p, false)?.last().unwrap().re;
        let iv = fv + 0.5 * qv;
        s.push(sv);
        i.push(iv);
        diff.push(sv - iv);
    }
    Ok(LinearTermCheck {
        stratonovich: s.mean(),
        ito_corrected: i.mean(),
        diff_mean: diff.mean(),
        diff_se: diff.std_error(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_rotated_wiener;

    fn brownian_path(n: usize, seed: u64) -> Path {
        let e = sample_rotated_wiener(
            &DiffusionSpec::brownian(),
            TimeGrid::new(0.0, 1.0, n).unwrap(),
            1,
            1,
            SeedSpec::new(seed),
        )
        .unwrap();
        Path::from_ensemble(&e, 0)
    }

    #[test]
    fn telescoping_identities() {
        let p = brownian_path(500, 4);
        let f = IntegrandSpec::identity(1);
        let w = p.values.last().unwrap().re;
        let qv = qv_integral_const(&[C::new(1.0, 0.0)], &p, false).unwrap().last().unwrap().re;
        let fwd = ito_forward_integral(&f, &p).unwrap().last().unwrap().re;
        let bwd = ito_backward_integral(&f, &p).unwrap().last().unwrap().re;
        let st = stratonovich_integral(&f, &p).unwrap().last().unwrap().re;
        assert!((fwd - 0.5 * (w * w - qv)).abs() < 1e-12);
        assert!((bwd - 0.5 * (w * w + qv)).abs() < 1e-12);
        assert!((st - 0.5 * w * w).abs() < 1e-12);
        assert!((bwd - fwd - qv).abs() < 1e-12);
        let one = IntegrandSpec::constant(vec![C::new(1.0, 0.0)]);
        assert!((ito_forward_integral(&one, &p).unwrap().last().unwrap().re - w).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = brownian_path(10, 1);
        let f = IntegrandSpec::identity(2);
        assert!(matches!(ito_forward_integral(&f, &p), Err(Error::GridMismatch(_))));
        let g = IntegrandSpec::new(1, |x, _, o| o.copy_from_slice(x));
        assert_eq!(conversion_residuals(&g, &p).unwrap_err(), Error::MissingDerivative);
    }

    #[test]
    fn derivative_spot_check() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(IntegrandSpec::square(2).check_derivative(20, &mut rng).unwrap() < 1e-5);
        let bad = IntegrandSpec::new(1, |x, _, o| o[0] = x[0] * x[0]).with_derivative(|_, _, o| o[0] = C::new(1.0, 0.0));
        assert!(bad.check_derivative(20, &mut rng).unwrap() > 1e-2);
    }

    #[test]
    fn deterministic_straight_line_action() {
        // x(t) = t, U = x, no noise: int (m/2 - t) dt over [0, 1] = m/2 - 1/2
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let xs: Vec<f64> = grid.times();
        let set = RealPathSet::new(grid, 1, 1, xs).unwrap().with_difference_velocities();
        let lag = LagrangianSpec::flat(LagrangianKind::Stratonovich, PotentialSpec::zero().with_scalar(|x, _| x[0]));
        let spec = DiffusionSpec::new(0.0, 0.0).with_mass(3.0);
        let a = stratonovich_action(&set, &lag, &spec).unwrap();
        assert!((a.mean - (1.5 - 0.5)).abs() < 1e-12);
        let unset = RealPathSet::new(grid, 1, 1, grid.times()).unwrap();
        assert!(matches!(stratonovich_action(&unset, &lag, &spec), Err(Error::MissingVelocity(_))));
    }
}
