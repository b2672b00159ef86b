//! Relativistic noise, causality statistics and charted-manifold steppers.
//!
//! The Lorentzian structure relation `d[M^a, M^b] = alpha hbar eps eta^{ab} dlambda`
//! is realized with one real Gaussian per frame component along the ray
//! `e^{i theta_a/2}`: `theta = phi` for spatial components and `phi + pi` for
//! the time component, which carries `eta^{00} = -1`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom2::{christoffel_from_metric, ChartedManifold, DomainFn, Signature};
use crate::noise::{half_angle_ray, realized_qv, RealizedQV, WienerStream};
use crate::params::{DiffusionSpec, SeedSpec, TimeGrid};
use crate::stats::{chi2_sf, chunked_reduce};

type C = Complex64;

/// How the affine parameter is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Gauge {
    /// `eps = 1/|m|`, `lambda` is proper time (`m^2 > 0`).
    ProperTime,
    /// `eps = 1/(c |m|)`, `lambda` is proper length (`m^2 < 0`).
    ProperLength,
    /// `eps = 1/E` for a massless particle of energy `E`.
    Energy { energy: f64 },
    /// `eps = 1` (massless).
    Unit,
}

impl Gauge {
    pub fn label(&self) -> &'static str {
        match self {
            Gauge::ProperTime => "proper_time",
            Gauge::ProperLength => "proper_length",
            Gauge::Energy { .. } => "energy",
            Gauge::Unit => "unit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativisticSpec {
    pub diffusion: DiffusionSpec,
    pub mass_sq: f64,
    pub epsilon: f64,
    pub gauge: Gauge,
    pub c: f64,
    /// What one unit of `lambda` measures.
    pub affine: &'static str,
}

impl RelativisticSpec {
    /// `|alpha| hbar eps`, the variance rate of each ray coordinate.
    pub fn noise_rate(&self) -> f64 {
        self.diffusion.alpha_mag * self.diffusion.hbar * self.epsilon
    }

    /// Variance rate of the real part of a spatial component, `rate (1 + cos phi)/2`.
    pub fn real_noise_rate(&self) -> f64 {
        0.5 * self.noise_rate() * (1.0 + self.diffusion.phi.cos())
    }

    /// `alpha hbar eps`.
    pub fn structure_constant(&self) -> C {
        self.diffusion.alpha() * self.diffusion.hbar * self.epsilon
    }

    /// Ray of frame component `a` for the given signature.
    pub fn ray(&self, a: usize, signature: Signature) -> C {
        let timelike = a == 0 && signature == Signature::Lorentzian;
        half_angle_ray(self.diffusion.phi + if timelike { std::f64::consts::PI } else { 0.0 })
    }
}

/// Fixes `eps` from `m^2` and the chosen convention.
pub fn gauge_fix(diffusion: &DiffusionSpec, mass_sq: f64, gauge: Gauge, c: f64) -> Result<RelativisticSpec> {
    let diffusion = diffusion.validate()?;
    if !(mass_sq.is_finite()) {
        return Err(Error::NonFiniteField("mass_sq"));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::NonFiniteField("speed of light"));
    }
    let bad = || Error::IncompatibleGauge {
        gauge: gauge.label().into(),
        mass_sq,
    };
    let m = mass_sq.abs().sqrt();
    let (epsilon, affine) = match gauge {
        Gauge::ProperTime if mass_sq > 0.0 => (1.0 / m, "proper time"),
        Gauge::ProperLength if mass_sq < 0.0 => (1.0 / (c * m), "proper length"),
        Gauge::Energy { energy } if mass_sq == 0.0 && energy > 0.0 && energy.is_finite() => {
            (1.0 / energy, "energy-scaled affine parameter")
        }
        Gauge::Unit if mass_sq == 0.0 => (1.0, "unit-scaled affine parameter"),
        _ => return Err(bad()),
    };
    Ok(RelativisticSpec {
        diffusion,
        mass_sq,
        epsilon,
        gauge,
        c,
        affine,
    })
}

/// Lazy ensemble of the `1 + d` component martingale on flat Minkowski space.
#[derive(Debug, Clone)]
pub struct RelPathEnsemble {
    pub spec: RelativisticSpec,
    /// Component 0 is the time component.
    pub noise: WienerStream,
}

impl RelPathEnsemble {
    /// Realized `[M^a, M^b]` averaged over paths.
    pub fn qv(&self, a: usize, b: usize) -> Result<RealizedQV> {
        realized_qv(&self.noise, a, b, false)
    }

    /// Expected `[M^a, M^b]` at the end of the grid.
    pub fn expected_qv(&self, a: usize, b: usize) -> C {
        if a != b {
            return C::new(0.0, 0.0);
        }
        let eta = if a == 0 { -1.0 } else { 1.0 };
        let span = self.noise.grid.tf - self.noise.grid.t0;
        eta * self.spec.structure_constant() * span
    }
}

/// Noise for `d` spatial dimensions plus time over the affine grid.
pub fn sample_relativistic_noise(
    spec: &RelativisticSpec,
    grid: TimeGrid,
    d: usize,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<RelPathEnsemble> {
    if d == 0 {
        return Err(Error::UnsupportedDim(0));
    }
    let rays = (0..=d).map(|a| spec.ray(a, Signature::Lorentzian)).collect();
    Ok(RelPathEnsemble {
        spec: *spec,
        noise: WienerStream::new(grid, rays, spec.noise_rate(), n_paths, seed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CausalityPoint {
    pub delta_tau: f64,
    pub p_mc: f64,
    /// Binomial standard error at the exact probability.
    pub se: f64,
    pub p_exact: f64,
}

impl CausalityPoint {
    /// `(p_mc - p_exact) / se`; zero when both are degenerate.
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            (self.p_mc - self.p_exact) / self.se
        } else if self.p_mc == self.p_exact {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalityReport {
    pub dim: usize,
    pub n_samples: usize,
    /// `d s / c^2`, where the mean squared displacement equals `c^2 dtau^2`.
    pub crossover: f64,
    pub points: Vec<CausalityPoint>,
    pub monotone: bool,
}

/// Probability that a rest-frame step of proper time `dtau` leaves the light cone,
/// `P[sum_i dX_i^2 >= c^2 dtau^2]` with `dX_i ~ N(0, s dtau)`.
///
/// All `dtau` share the same samples, so the estimates are monotone by construction.
pub fn causality_stats(
    spec: &RelativisticSpec,
    d: usize,
    delta_tau: &[f64],
    n_samples: usize,
    seed: SeedSpec,
) -> Result<CausalityReport> {
    if !(spec.mass_sq > 0.0) {
        return Err(Error::NonPositiveMassSq(spec.mass_sq));
    }
    if d == 0 {
        return Err(Error::UnsupportedDim(0));
    }
    if n_samples == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if delta_tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidGrid("proper-time steps must be positive".into()));
    }
    let s = spec.real_noise_rate();
    let c2 = spec.c * spec.c;
    // violation iff Q = sum z_i^2 >= c^2 dtau / s
    let thresholds: Vec<f64> = delta_tau
        .iter()
        .map(|t| if s > 0.0 { c2 * t / s } else { f64::INFINITY })
        .collect();
    let counts = chunked_reduce(
        n_samples,
        || vec![0u64; thresholds.len()],
        |acc, k| {
            let mut rng = seed.stream(k as u64);
            let q: f64 = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
            for (c, th) in acc.iter_mut().zip(&thresholds) {
                if q >= *th {
                    *c += 1;
                }
            }
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    );
    let n = n_samples as f64;
    let points: Vec<CausalityPoint> = delta_tau
        .iter()
        .zip(&thresholds)
        .zip(&counts)
        .map(|((&t, &th), &cnt)| {
            let p_exact = if th.is_infinite() { 0.0 } else { chi2_sf(d, th) };
            CausalityPoint {
                delta_tau: t,
                p_mc: cnt as f64 / n,
                se: (p_exact * (1.0 - p_exact) / n).sqrt(),
                p_exact,
            }
        })
        .collect();
    let mut order: Vec<&CausalityPoint> = points.iter().collect();
    order.sort_by(|a, b| a.delta_tau.total_cmp(&b.delta_tau));
    let monotone = order.windows(2).all(|w| w[1].p_mc <= w[0].p_mc);
    Ok(CausalityReport {
        dim: d,
        n_samples,
        crossover: d as f64 * s / c2,
        points,
        monotone,
    })
}

/// Real hat-velocity `w^mu(x, lambda)` of the drift.
pub type HatVelocity<'a> = &'a (dyn Fn(&[f64], f64, &mut [f64]) + Sync);

pub struct ManifoldOptions {
    pub record_stride: usize,
    /// Largest tolerated fraction of paths that leave the chart.
    pub exit_threshold: f64,
    /// Steps starting inside this region enter the QV statistics; all steps if `None`.
    pub qv_region: Option<DomainFn>,
}

impl Default for ManifoldOptions {
    fn default() -> Self {
        ManifoldOptions {
            record_stride: 1,
            exit_threshold: 0.01,
            qv_region: None,
        }
    }
}

/// Paths of the real part `X` of a manifold diffusion.
#[derive(Debug, Clone)]
pub struct ManifoldEnsemble {
    pub grid: TimeGrid,
    pub n: usize,
    pub n_paths: usize,
    pub record_stride: usize,
    /// `positions[r][k * n + mu]`; absorbed paths keep their last in-chart point.
    pub positions: Vec<Vec<f64>>,
    pub absorbed: Vec<bool>,
    pub absorbed_fraction: f64,
    /// `sum dX^mu dX^nu` over counted steps, all paths.
    pub qv_realized: Vec<f64>,
    /// `sum Q^{mu nu}(X) dlambda` over the same steps.
    pub qv_expected: Vec<f64>,
    pub counted_steps: u64,
}

impl ManifoldEnsemble {
    /// Realized over expected chart QV for a diagonal component.
    pub fn qv_ratio(&self, mu: usize) -> f64 {
        let i = mu * self.n + mu;
        self.qv_realized[i] / self.qv_expected[i]
    }

    /// Off-diagonal realized QV normalized by the diagonal expectations.
    pub fn qv_correlation(&self, mu: usize, nu: usize) -> f64 {
        let n = self.n;
        self.qv_realized[mu * n + nu] / (self.qv_expected[mu * n + mu] * self.qv_expected[nu * n + nu]).sqrt()
    }
}

/// Real QV rate `Q^{mu nu} = sum_a c_a^2 rate e^mu_a e^nu_a`, `c_a = Re ray_a`.
fn real_qv_rate(e: &[f64], coef: &[f64], n: usize, out: &mut [f64]) {
    for mu in 0..n {
        for nu in 0..n {
            out[mu * n + nu] = (0..n).map(|a| coef[a] * coef[a] * e[mu * n + a] * e[nu * n + a]).sum();
        }
    }
}

/// Euler–Maruyama for `dX^mu = (w^mu - (1/2) Gamma^mu_{nu rho} Q^{nu rho}) dlambda + e^mu_a Re dM^a`.
///
/// `Q dlambda` is the real QV of one step, so the correction is the Itô term of
/// the real chart process. Paths leaving the chart are absorbed; more than
/// `exit_threshold` of them is an error.
pub fn manifold_step_simulate(
    man: &ChartedManifold,
    drift: HatVelocity<'_>,
    spec: &RelativisticSpec,
    grid: &TimeGrid,
    n_paths: usize,
    x0: &[f64],
    seed: SeedSpec,
    options: &ManifoldOptions,
) -> Result<ManifoldEnsemble> {
    let grid = grid.validate()?;
    let n = man.n;
    if x0.len() != n {
        return Err(Error::DimMismatch { expected: n, got: x0.len() });
    }
    if n_paths == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if !man.in_domain(x0) {
        return Err(Error::ChartExit {
            fraction: 1.0,
            threshold: options.exit_threshold,
        });
    }
    let n_steps = grid.n_steps;
    let stride = options.record_stride;
    if stride == 0 || n_steps % stride != 0 {
        return Err(Error::InvalidGrid(format!("record stride {stride} does not divide {n_steps} steps")));
    }
    let n_rec = n_steps / stride + 1;
    let cap = crate::noise::MAX_ENSEMBLE_VALUES;
    if n_rec.saturating_mul(n_paths).saturating_mul(n) > cap {
        return Err(Error::OverflowingEnsembleSize {
            requested: n_rec * n_paths * n,
            cap,
        });
    }
    let sd = (spec.noise_rate() * grid.dt()).sqrt();
    let coef: Vec<f64> = (0..n).map(|a| spec.ray(a, man.signature).re).collect();
    let rate = spec.noise_rate();
    let dt = grid.dt();
    let nn = n * n;

    struct PathOut {
        traj: Vec<f64>,
        absorbed: bool,
        num: Vec<f64>,
        den: Vec<f64>,
        counted: u64,
    }
    let run = |k: usize| -> Result<PathOut> {
        let mut rng = seed.stream(k as u64);
        let mut x = x0.to_vec();
        let mut traj = vec![0.0; n_rec * n];
        traj[..n].copy_from_slice(&x);
        let mut num = vec![0.0; nn];
        let mut den = vec![0.0; nn];
        let mut q = vec![0.0; nn];
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut dx = vec![0.0; n];
        let mut counted = 0;
        let mut absorbed = false;
        for s in 0..n_steps {
            let t = grid.time(s);
            let e = man.vielbein_at(&x)?;
            let gamma = christoffel_from_metric(man, &x)?;
            real_qv_rate(&e, &coef, n, &mut q);
            q.iter_mut().for_each(|v| *v *= rate);
            drift(&x, t, &mut w);
            for zi in z.iter_mut() {
                *zi = sd * rng.sample::<f64, _>(StandardNormal);
            }
            for mu in 0..n {
                let mut corr = 0.0;
                for nu in 0..n {
                    for rho in 0..n {
                        corr += gamma[(mu * n + nu) * n + rho] * q[nu * n + rho];
                    }
                }
                let noise: f64 = (0..n).map(|a| e[mu * n + a] * coef[a] * z[a]).sum();
                dx[mu] = (w[mu] - 0.5 * corr) * dt + noise;
            }
            if options.qv_region.as_ref().is_none_or(|f| f(&x)) {
                counted += 1;
                for i in 0..nn {
                    num[i] += dx[i / n] * dx[i % n];
                    den[i] += q[i] * dt;
                }
            }
            let next: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            if !man.in_domain(&next) {
                absorbed = true;
                for r in (s + 1).div_ceil(stride)..n_rec {
                    traj[r * n..(r + 1) * n].copy_from_slice(&x);
                }
                break;
            }
            x = next;
            if (s + 1) % stride == 0 {
                let r = (s + 1) / stride;
                traj[r * n..(r + 1) * n].copy_from_slice(&x);
            }
        }
        Ok(PathOut {
            traj,
            absorbed,
            num,
            den,
            counted,
        })
    };
    let outs: Vec<PathOut> = (0..n_paths).into_par_iter().map(run).collect::<Result<_>>()?;
    let mut positions = vec![vec![0.0; n_paths * n]; n_rec];
    let mut qv_realized = vec![0.0; nn];
    let mut qv_expected = vec![0.0; nn];
    let mut counted_steps = 0;
    let mut absorbed = Vec::with_capacity(n_paths);
    for (k, o) in outs.iter().enumerate() {
        for (r, pos) in positions.iter_mut().enumerate() {
            pos[k * n..(k + 1) * n].copy_from_slice(&o.traj[r * n..(r + 1) * n]);
        }
        for i in 0..nn {
            qv_realized[i] += o.num[i];
            qv_expected[i] += o.den[i];
        }
        counted_steps += o.counted;
        absorbed.push(o.absorbed);
    }
    let absorbed_fraction = absorbed.iter().filter(|a| **a).count() as f64 / n_paths as f64;
    if absorbed_fraction > options.exit_threshold {
        return Err(Error::ChartExit {
            fraction: absorbed_fraction,
            threshold: options.exit_threshold,
        });
    }
    Ok(ManifoldEnsemble {
        grid,
        n,
        n_paths,
        record_stride: stride,
        positions,
        absorbed,
        absorbed_fraction,
        qv_realized,
        qv_expected,
        counted_steps,
    })
}

/// `e^{i k.x}` with `k.x = -k^0 x^0 + sum_i k^i x^i`.
pub fn plane_wave(k: &[f64]) -> impl Fn(&[f64]) -> C + '_ {
    move |x| {
        let phase = -k[0] * x[0] + k[1..].iter().zip(&x[1..]).map(|(a, b)| a * b).sum::<f64>();
        C::from_polar(1.0, phase)
    }
}

/// `eta^{mu nu} d_mu S d_nu S + m^2` at `x` for `S = hbar arg Phi`, by centred
/// differences of `ln Phi` with spacing `h` (units with `c = 1`).
pub fn onshell_check(phi: &dyn Fn(&[f64]) -> C, x: &[f64], mass_sq: f64, hbar: f64, h: f64) -> f64 {
    let n = x.len();
    let mut total = mass_sq;
    let mut y = x.to_vec();
    for mu in 0..n {
        y[mu] = x[mu] + h;
        let fp = phi(&y);
        y[mu] = x[mu] - h;
        let fm = phi(&y);
        y[mu] = x[mu];
        let ds = hbar * crate::params::wrap_angle(fp.arg() - fm.arg()) / (2.0 * h);
        let eta = if mu == 0 { -1.0 } else { 1.0 };
        total += eta * ds * ds;
    }
    total
}
