//! Closed-form solutions used as oracles.
//!
//! With `D = alpha hbar / 2m`, `y = x - x0`, `a = sigma0^2`, `b = a + D t`:
//!
//! * heat kernel: `(4 pi D tau)^{-1/2} exp(-y^2 / (4 D tau))`, `tau = t + tau0`.
//! * free packet: `N e^{i k x0} sqrt(a/b) exp(i p y - y^2/(4b) + a k^2 (a/b - 1))`,
//!   `p = a k / b`, `N = (2 pi a)^{-1/4}`.
//! * harmonic ground state, `U = m w^2 x^2 / 2`: `(2 Re B / pi)^{1/4} e^{-B x^2} e^{-i w t/2}`
//!   with `B = i m w / (2 alpha hbar)`; needs `0 < phi < pi`.
//! * coherent state (`alpha = i`): `(m w / pi hbar)^{1/4}
//!   exp(-(m w / 2 hbar)(x - xc)^2 + i pc x / hbar - i w t / 2 - i pc xc / (2 hbar))`,
//!   `xc = x0 cos wt`, `pc = -m w x0 sin wt`.
//! * double slit: two free packets at `+-sep/2` with zero momentum, normalised
//!   by `(2 + 2 exp(-sep^2 / (8 sigma0^2)))^{-1/2}`.
//!
//! Multi-dimensional fields are products over axes. Times are the elapsed time
//! since `t_start` (forward) or until `t_start` (backward).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Boundary, Direction, WaveField};
use crate::error::{Error, Result};
use crate::params::{DiffusionSpec, Regime, SpaceGrid, TimeGrid};
use crate::potential::PotentialSpec;

type C = Complex64;

pub const FAMILY_NAMES: [&str; 5] = [
    "heat_kernel",
    "free_gaussian_packet",
    "harmonic_ground",
    "harmonic_coherent",
    "double_slit_superposition",
];

/// Loose parameter record; each family reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyParams {
    /// Centre (`x0`); empty means the origin.
    pub center: Vec<f64>,
    pub sigma0: f64,
    /// Wavenumber `k` per axis; empty means zero.
    pub wavenumber: Vec<f64>,
    pub omega: f64,
    pub tau0: f64,
    pub separation: f64,
    /// Reference time; defaults to `t0` (forward) or `tf` (backward).
    pub t_start: Option<f64>,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            center: Vec::new(),
            sigma0: 1.0,
            wavenumber: Vec::new(),
            omega: 1.0,
            tau0: 0.0,
            separation: 4.0,
            t_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticFamily {
    HeatKernel { center: Vec<f64>, tau0: f64 },
    FreeGaussianPacket { center: Vec<f64>, sigma0: f64, wavenumber: Vec<f64> },
    HarmonicGround { omega: f64 },
    HarmonicCoherent { omega: f64, x0: Vec<f64> },
    DoubleSlit { center: f64, sigma0: f64, separation: f64 },
}

fn pad(v: &[f64], dim: usize) -> Result<Vec<f64>> {
    match v.len() {
        0 => Ok(vec![0.0; dim]),
        n if n == dim => Ok(v.to_vec()),
        n => Err(Error::DimMismatch { expected: dim, got: n }),
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")))
    }
}

impl AnalyticFamily {
    pub fn from_name(name: &str, p: &FamilyParams, dim: usize) -> Result<Self> {
        match name {
            "heat_kernel" => Ok(AnalyticFamily::HeatKernel {
                center: pad(&p.center, dim)?,
                tau0: p.tau0,
            }),
            "free_gaussian_packet" => Ok(AnalyticFamily::FreeGaussianPacket {
                center: pad(&p.center, dim)?,
                sigma0: positive("sigma0", p.sigma0)?,
                wavenumber: pad(&p.wavenumber, dim)?,
            }),
            "harmonic_ground" => Ok(AnalyticFamily::HarmonicGround {
                omega: positive("omega", p.omega)?,
            }),
            "harmonic_coherent" => Ok(AnalyticFamily::HarmonicCoherent {
                omega: positive("omega", p.omega)?,
                x0: pad(&p.center, dim)?,
            }),
            "double_slit_superposition" | "double_slit" => {
                if dim != 1 {
                    return Err(Error::UnsupportedDim(dim));
                }
                Ok(AnalyticFamily::DoubleSlit {
                    center: pad(&p.center, 1)?[0],
                    sigma0: positive("sigma0", p.sigma0)?,
                    separation: positive("separation", p.separation)?,
                })
            }
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticFamily::HeatKernel { .. } => FAMILY_NAMES[0],
            AnalyticFamily::FreeGaussianPacket { .. } => FAMILY_NAMES[1],
            AnalyticFamily::HarmonicGround { .. } => FAMILY_NAMES[2],
            AnalyticFamily::HarmonicCoherent { .. } => FAMILY_NAMES[3],
            AnalyticFamily::DoubleSlit { .. } => FAMILY_NAMES[4],
        }
    }

    /// Potential under which the family solves the equation.
    pub fn potential(&self, spec: &DiffusionSpec) -> PotentialSpec {
        match self {
            AnalyticFamily::HarmonicGround { omega } | AnalyticFamily::HarmonicCoherent { omega, .. } => {
                PotentialSpec::harmonic(spec.mass, *omega)
            }
            _ => PotentialSpec::zero(),
        }
    }

    /// Rejects combinations the closed forms do not cover.
    pub fn check(&self, spec: &DiffusionSpec, dim: usize) -> Result<()> {
        spec.validate()?;
        if spec.alpha_mag == 0.0 {
            return Err(Error::UnstableParameters("alpha = 0".into()));
        }
        match self {
            AnalyticFamily::HarmonicGround { .. } => {
                let phi = crate::params::wrap_angle(spec.phi);
                if !(phi > 0.0 && phi < PI) {
                    return Err(Error::UnsupportedRegime(format!(
                        "harmonic ground state is normalisable only for 0 < phi < pi, got {phi}"
                    )));
                }
            }
            AnalyticFamily::HarmonicCoherent { x0, .. } => {
                if spec.regime() != Regime::Quantum || spec.phi < 0.0 || (spec.alpha_mag - 1.0).abs() > 1e-12 {
                    return Err(Error::UnsupportedRegime("coherent state needs alpha = i".into()));
                }
                if x0.len() != dim {
                    return Err(Error::DimMismatch { expected: dim, got: x0.len() });
                }
            }
            AnalyticFamily::HeatKernel { center, .. } | AnalyticFamily::FreeGaussianPacket { center, .. } => {
                if center.len() != dim {
                    return Err(Error::DimMismatch { expected: dim, got: center.len() });
                }
            }
            AnalyticFamily::DoubleSlit { .. } => {
                if dim != 1 {
                    return Err(Error::UnsupportedDim(dim));
                }
            }
        }
        Ok(())
    }

    /// Value at `x` after elapsed time `s`.
    pub fn value(&self, spec: &DiffusionSpec, x: &[f64], s: f64) -> C {
        let alpha = spec.alpha();
        let hbar = spec.hbar;
        let m = spec.mass;
        let diff = alpha * hbar / (2.0 * m);
        match self {
            AnalyticFamily::HeatKernel { center, tau0 } => {
                let dt = diff * (s + tau0);
                x.iter()
                    .zip(center)
                    .map(|(xi, ci)| {
                        let y = xi - ci;
                        (4.0 * PI * dt).sqrt().inv() * (-(y * y) / (4.0 * dt)).exp()
                    })
                    .product()
            }
            AnalyticFamily::FreeGaussianPacket {
                center,
                sigma0,
                wavenumber,
            } => (0..x.len())
                .map(|i| free_packet(diff, x[i] - center[i], center[i], *sigma0, wavenumber[i], s))
                .product(),
            AnalyticFamily::HarmonicGround { omega } => {
                let beta = C::i() * m * omega / (2.0 * alpha * hbar);
                let norm = (2.0 * beta.re / PI).powf(0.25);
                let phase = (C::new(0.0, -0.5 * omega * s)).exp();
                x.iter()
                    .map(|xi| norm * (-beta * xi * xi).exp() * phase)
                    .product()
            }
            AnalyticFamily::HarmonicCoherent { omega, x0 } => {
                let w = *omega;
                let k = m * w / hbar;
                x.iter()
                    .zip(x0)
                    .map(|(xi, a)| {
                        let xc = a * (w * s).cos();
                        let pc = -m * w * a * (w * s).sin();
                        let re = -0.5 * k * (xi - xc).powi(2);
                        let im = pc * xi / hbar - 0.5 * w * s - 0.5 * pc * xc / hbar;
                        (k / PI).powf(0.25) * C::new(re, im).exp()
                    })
                    .product()
            }
            AnalyticFamily::DoubleSlit {
                center,
                sigma0,
                separation,
            } => {
                let half = 0.5 * separation;
                let n = (2.0 + 2.0 * (-(separation * separation) / (8.0 * sigma0 * sigma0)).exp())
                    .sqrt()
                    .recip();
                let x = x[0];
                let p1 = free_packet(diff, x - (center - half), center - half, *sigma0, 0.0, s);
                let p2 = free_packet(diff, x - (center + half), center + half, *sigma0, 0.0, s);
                n * (p1 + p2)
            }
        }
    }
}

/// One axis of a free Gaussian packet; `y = x - x0`.
fn free_packet(diff: C, y: f64, x0: f64, sigma0: f64, k: f64, s: f64) -> C {
    let a = sigma0 * sigma0;
    let b = a + diff * s;
    let ratio = C::new(a, 0.0) / b;
    let p = ratio * k;
    let n = (2.0 * PI * a).powf(-0.25);
    let expo = C::i() * p * y - y * y / (4.0 * b) + a * k * k * (ratio - 1.0) + C::new(0.0, k * x0);
    n * ratio.sqrt() * expo.exp()
}

/// Samples a family onto a grid and time grid as a [`WaveField`].
pub fn analytic_reference(
    family: &AnalyticFamily,
    params: &FamilyParams,
    spec: &DiffusionSpec,
    grid: &SpaceGrid,
    times: &TimeGrid,
    direction: Direction,
    stride: usize,
) -> Result<WaveField> {
    let spec = spec.validate()?;
    let grid = grid.validate()?;
    let times = times.validate()?;
    family.check(&spec, grid.dim())?;
    if stride == 0 || times.n_steps % stride != 0 {
        return Err(Error::InvalidGrid(format!(
            "stride {stride} does not divide {} steps",
            times.n_steps
        )));
    }
    let t_start = params.t_start.unwrap_or(match direction {
        Direction::Forward => times.t0,
        Direction::Backward => times.tf,
    });
    let n_snap = times.n_steps / stride + 1;
    let snapshot_times: Vec<f64> = (0..n_snap).map(|k| times.time(k * stride)).collect();
    let coords: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.coords(i)).collect();
    let mut values = Vec::with_capacity(n_snap);
    for &t in &snapshot_times {
        let s = match direction {
            Direction::Forward => t - t_start,
            Direction::Backward => t_start - t,
        };
        if let AnalyticFamily::HeatKernel { tau0, .. } = family {
            if !(s + tau0 > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "heat kernel needs positive elapsed time, got {}",
                    s + tau0
                )));
            }
        }
        let slice: Vec<C> = coords.iter().map(|x| family.value(&spec, x, s)).collect();
        if slice.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFiniteField("analytic reference"));
        }
        values.push(slice);
    }
    Ok(WaveField {
        grid,
        times,
        stride,
        snapshot_times,
        values,
        spec,
        potential: family.potential(&spec),
        direction,
        boundary: Boundary::Dirichlet,
    })
}
