//! Parameter blocks, grids and the per-path randomness contract shared by
//! every other module.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of points of a [`SpaceGrid`].
pub const MAX_GRID_POINTS: usize = 1 << 22;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(phi: f64) -> f64 {
    let mut w = phi.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; only guard the upper seam.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Which limit of the theory a parameter block describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `|alpha| = 0`: no noise at all.
    Classical,
    /// `alpha` real (`phi` = 0 or `pi`).
    Brownian,
    /// `alpha` purely imaginary (`phi = +-pi/2`).
    Quantum,
    /// Anything in between.
    Intermediate,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Classical => "classical",
            Regime::Brownian => "Brownian",
            Regime::Quantum => "quantum",
            Regime::Intermediate => "intermediate",
        }
    }
}

/// The physical parameter block: `alpha = |alpha| e^{i phi}`, mass, hbar and charge.
///
/// `phi` is kept apart from `|alpha|` so that `phi = pi` with `|alpha| > 0`
/// (the real projection of the noise vanishes) stays representable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub alpha_mag: f64,
    pub phi: f64,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(default)]
    pub charge: f64,
}

fn one() -> f64 {
    1.0
}

/// Angular tolerance used when classifying regimes.
const REGIME_TOL: f64 = 1e-12;

impl DiffusionSpec {
    /// Natural units (`m = hbar = 1`), neutral particle.
    pub fn new(alpha_mag: f64, phi: f64) -> Self {
        DiffusionSpec {
            alpha_mag,
            phi,
            mass: 1.0,
            hbar: 1.0,
            charge: 0.0,
        }
    }

    pub fn brownian() -> Self {
        Self::new(1.0, 0.0)
    }

    pub fn quantum() -> Self {
        Self::new(1.0, PI / 2.0)
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        self.mass = mass;
        self
    }

    pub fn with_hbar(mut self, hbar: f64) -> Self {
        self.hbar = hbar;
        self
    }

    pub fn with_charge(mut self, charge: f64) -> Self {
        self.charge = charge;
        self
    }

    /// Checks the invariants and returns `self` with `phi` wrapped into `(-pi, pi]`.
    pub fn validate(&self) -> Result<DiffusionSpec> {
        let fields = [
            ("alpha_mag", self.alpha_mag),
            ("phi", self.phi),
            ("mass", self.mass),
            ("hbar", self.hbar),
            ("charge", self.charge),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(Error::NonFiniteField(name));
            }
        }
        if self.mass <= 0.0 {
            return Err(Error::NonPositiveMass(self.mass));
        }
        if self.alpha_mag < 0.0 {
            return Err(Error::NegativeAlphaMag(self.alpha_mag));
        }
        if self.hbar <= 0.0 {
            return Err(Error::UnstableParameters(format!(
                "hbar must be positive, got {}",
                self.hbar
            )));
        }
        Ok(DiffusionSpec {
            phi: wrap_angle(self.phi),
            ..*self
        })
    }

    pub fn regime(&self) -> Regime {
        if self.alpha_mag == 0.0 {
            return Regime::Classical;
        }
        let phi = wrap_angle(self.phi);
        if phi.abs() < REGIME_TOL || (PI - phi.abs()) < REGIME_TOL {
            Regime::Brownian
        } else if (phi.abs() - PI / 2.0).abs() < REGIME_TOL {
            Regime::Quantum
        } else {
            Regime::Intermediate
        }
    }

    /// `alpha = |alpha| (cos phi + i sin phi)`.
    pub fn alpha(&self) -> Complex64 {
        Complex64::from_polar(self.alpha_mag, self.phi)
    }

    /// Time reversal `alpha -> -alpha`, i.e. `phi -> phi - pi` wrapped.
    pub fn time_reverse(&self) -> DiffusionSpec {
        DiffusionSpec {
            phi: wrap_angle(self.phi - PI),
            ..*self
        }
    }

    /// The ray `e^{i phi/2}` on which martingale increments live.
    pub fn ray(&self) -> Complex64 {
        Complex64::from_polar(1.0, 0.5 * self.phi)
    }

    /// Variance rate `|alpha| hbar / m` of the underlying real Wiener process.
    pub fn noise_rate(&self) -> f64 {
        self.alpha_mag * self.hbar / self.mass
    }

    /// Variance rate of `Re M`: `|alpha| hbar (1 + cos phi) / (2m)`.
    pub fn real_noise_rate(&self) -> f64 {
        0.5 * self.noise_rate() * (1.0 + self.phi.cos())
    }

    /// Variance rate of `Im M`: `|alpha| hbar (1 - cos phi) / (2m)`.
    pub fn imag_noise_rate(&self) -> f64 {
        0.5 * self.noise_rate() * (1.0 - self.phi.cos())
    }

    /// Covariance rate of `Re M` and `Im M`: `|alpha| hbar sin phi / (2m)`.
    pub fn cross_noise_rate(&self) -> f64 {
        0.5 * self.noise_rate() * self.phi.sin()
    }
}

/// Uniform discretisation of `[t0, tf]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub tf: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::ZeroStepGrid);
        }
        if !(t0.is_finite() && tf.is_finite()) {
            return Err(Error::NonFiniteField("time grid"));
        }
        if tf <= t0 {
            return Err(Error::InvalidGrid(format!("tf = {tf} must exceed t0 = {t0}")));
        }
        Ok(TimeGrid { t0, tf, n_steps })
    }

    pub fn validate(&self) -> Result<Self> {
        TimeGrid::new(self.t0, self.tf, self.n_steps)
    }

    pub fn dt(&self) -> f64 {
        (self.tf - self.t0) / self.n_steps as f64
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.tf
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of `t` on the grid, accepting round-off of a few ulps of `dt`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t0) / self.dt();
        let k = x.round();
        if (x - k).abs() > 1e-6 || k < 0.0 || k > self.n_steps as f64 {
            return Err(Error::TimeNotOnGrid(t));
        }
        Ok(k as usize)
    }

    /// Grid with every `factor`-th point of this one.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::GridMismatch(format!(
                "{} steps are not divisible by {factor}",
                self.n_steps
            )));
        }
        TimeGrid::new(self.t0, self.tf, self.n_steps / factor)
    }
}

/// One axis of a [`SpaceGrid`]: `n` points from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::NonFiniteField("axis bounds"));
        }
        if max <= min {
            return Err(Error::InvalidGrid(format!("axis max {max} must exceed min {min}")));
        }
        if n < 8 {
            return Err(Error::InvalidGrid(format!("axis needs at least 8 points, got {n}")));
        }
        Ok(Axis { min, max, n })
    }

    pub fn h(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.min + i as f64 * self.h()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    /// Period of the axis when it is treated as periodic: `n h`.
    pub fn period(&self) -> f64 {
        self.n as f64 * self.h()
    }
}

/// Uniform grid in one or two dimensions, stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceGrid {
    pub axes: Vec<Axis>,
}

impl SpaceGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::UnsupportedDim(axes.len()));
        }
        for a in &axes {
            Axis::new(a.min, a.max, a.n)?;
        }
        let total: usize = axes.iter().map(|a| a.n).product();
        if total > MAX_GRID_POINTS {
            return Err(Error::InvalidGrid(format!(
                "{total} points exceed the cap of {MAX_GRID_POINTS}"
            )));
        }
        Ok(SpaceGrid { axes })
    }

    pub fn line(min: f64, max: f64, n: usize) -> Result<Self> {
        SpaceGrid::new(vec![Axis::new(min, max, n)?])
    }

    pub fn plane(x: Axis, y: Axis) -> Result<Self> {
        SpaceGrid::new(vec![x, y])
    }

    pub fn validate(&self) -> Result<Self> {
        SpaceGrid::new(self.axes.clone())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume element of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.h()).product()
    }

    /// Coordinates of the flat index `idx`.
    pub fn coords(&self, idx: usize) -> Vec<f64> {
        match self.axes.as_slice() {
            [x] => vec![x.point(idx)],
            [x, y] => vec![x.point(idx / y.n), y.point(idx % y.n)],
            _ => unreachable!("grids are 1d or 2d"),
        }
    }

    /// Trapezoid quadrature of samples laid out on this grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        match self.axes.as_slice() {
            [x] => trapezoid(values, x.h()),
            [x, y] => {
                let rows: Vec<f64> = values.chunks(y.n).map(|r| trapezoid(r, y.h())).collect();
                trapezoid(&rows, x.h())
            }
            _ => unreachable!("grids are 1d or 2d"),
        }
    }
}

/// Composite trapezoid rule with uniform spacing.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => 0.0,
        n => h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

/// Name of the generator recorded in output metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8 (key = seed_from_u64(master_seed), stream = path index)";

/// Master seed plus the substream rule: path `k` draws from stream `(master_seed, k)`.
///
/// ChaCha is counter based, so every substream is addressable without
/// generating the ones before it; output for path `k` is independent of the
/// ensemble size and of the thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        SeedSpec { master_seed }
    }

    /// Generator for path `k`.
    pub fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(k);
        rng
    }

    /// Independent seed for a different experiment sharing this master seed.
    pub fn derive(&self, tag: u64) -> SeedSpec {
        SeedSpec {
            master_seed: splitmix64(self.master_seed ^ splitmix64(tag.wrapping_add(0x9e37_79b9))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
