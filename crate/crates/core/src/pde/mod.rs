//! Complex diffusion equations on flat 1d/2d grids.
//!
//! The forward field `Psi_-` obeys `d_t Psi = L Psi` with
//!
//! ```text
//! L = (alpha hbar / 2m) d^2 + (q / 2m)(d A + A d) + q^2 A^2 / (2 m alpha hbar) + U / (alpha hbar)
//! ```
//!
//! and the backward field `Psi_+` obeys `-d_t Psi = L' Psi` where `L'` is `L`
//! with `q -> -q`; it is integrated from `tf` down to `t0`.

mod analytic;
mod hj;
mod solver;
pub mod tridiag;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{DiffusionSpec, Regime, SpaceGrid, TimeGrid};
use crate::potential::PotentialSpec;

pub use analytic::{analytic_reference, AnalyticFamily, FamilyParams, FAMILY_NAMES};
pub use hj::{hamilton_jacobi_residual, log_derivatives, HjResidual, LogDerivatives, NODE_THRESHOLD};
pub use solver::{solve_complex_diffusion, SolveOptions};

type C = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `Psi_-`, initial data at `t0`.
    Forward,
    /// `Psi_+`, terminal data at `tf`.
    Backward,
}

impl Direction {
    /// `-1` for `Psi_-` (`S = -alpha hbar ln Psi`), `+1` for `Psi_+`.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Backward => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Period `n h` along every axis.
    Periodic,
    /// Zero outside the grid.
    Dirichlet,
}

/// Solution snapshots, stored in increasing time order.
#[derive(Debug, Clone)]
pub struct WaveField {
    pub grid: SpaceGrid,
    pub times: TimeGrid,
    /// Steps between stored snapshots.
    pub stride: usize,
    pub snapshot_times: Vec<f64>,
    pub values: Vec<Vec<C>>,
    pub spec: DiffusionSpec,
    pub potential: PotentialSpec,
    pub direction: Direction,
    pub boundary: Boundary,
}

impl WaveField {
    pub fn n_snapshots(&self) -> usize {
        self.values.len()
    }

    /// Index of the snapshot at time `t` (must lie on the snapshot grid).
    pub fn snapshot_index(&self, t: f64) -> Result<usize> {
        let k = self.times.index_of(t)?;
        if k % self.stride != 0 {
            return Err(Error::TimeNotOnGrid(t));
        }
        Ok(k / self.stride)
    }

    /// Snapshot closest to `t`.
    pub fn nearest_snapshot(&self, t: f64) -> usize {
        let dt = self.times.dt() * self.stride as f64;
        let k = ((t - self.times.t0) / dt).round();
        (k.max(0.0) as usize).min(self.n_snapshots() - 1)
    }

    pub fn slice(&self, t: f64) -> Result<&[C]> {
        Ok(&self.values[self.snapshot_index(t)?])
    }

    /// Discrete norm `sum |Psi|^2 dV`, the quantity the scheme conserves at `phi = pi/2`.
    pub fn l2_norm_sq(&self, snapshot: usize) -> f64 {
        self.values[snapshot].iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    /// `(t, sum |Psi|^2 dV)` for every snapshot.
    pub fn norm_trace(&self) -> Vec<(f64, f64)> {
        (0..self.n_snapshots())
            .map(|k| (self.snapshot_times[k], self.l2_norm_sq(k)))
            .collect()
    }

    /// Copy of the field with every value multiplied by `c`.
    pub fn scaled(&self, c: C) -> WaveField {
        let mut out = self.clone();
        for s in &mut out.values {
            for v in s.iter_mut() {
                *v *= c;
            }
        }
        out
    }
}

/// Density associated with one slice.
///
/// Brownian regime (`phi` in `{0, pi}`): `|Psi| / int |Psi|`; otherwise
/// `|Psi|^2 / int |Psi|^2`. Integrals use the trapezoid rule.
pub fn born_density_slice(values: &[C], grid: &SpaceGrid, spec: &DiffusionSpec) -> Result<Vec<f64>> {
    if values.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} values on a grid of {} points",
            values.len(),
            grid.len()
        )));
    }
    let raw: Vec<f64> = match spec.regime() {
        Regime::Brownian => values.iter().map(|v| v.norm()).collect(),
        _ => values.iter().map(|v| v.norm_sqr()).collect(),
    };
    let z = grid.integrate(&raw);
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(raw.into_iter().map(|r| r / z).collect())
}

/// Born density of every snapshot.
pub fn born_density(field: &WaveField) -> Result<Vec<Vec<f64>>> {
    field
        .values
        .iter()
        .map(|s| born_density_slice(s, &field.grid, &field.spec))
        .collect()
}

/// Mean and variance of a 1d density along axis `axis` (trapezoid rule).
pub fn density_moments(rho: &[f64], grid: &SpaceGrid, axis: usize) -> (f64, f64) {
    let coord = |i: usize| grid.coords(i)[axis];
    let w: Vec<f64> = (0..grid.len()).map(|i| rho[i] * coord(i)).collect();
    let mean = grid.integrate(&w) / grid.integrate(rho);
    let w2: Vec<f64> = (0..grid.len()).map(|i| rho[i] * (coord(i) - mean).powi(2)).collect();
    (mean, grid.integrate(&w2) / grid.integrate(rho))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_has_uniform_density() {
        let g = SpaceGrid::line(-1.0, 1.0, 21).unwrap();
        let v = vec![C::new(0.3, -0.4); 21];
        for spec in [DiffusionSpec::brownian(), DiffusionSpec::quantum()] {
            let rho = born_density_slice(&v, &g, &spec).unwrap();
            for r in &rho {
                assert!((r - 0.5).abs() < 1e-12);
            }
            assert!((g.integrate(&rho) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_has_no_density() {
        let g = SpaceGrid::line(-1.0, 1.0, 9).unwrap();
        let v = vec![C::new(0.0, 0.0); 9];
        assert_eq!(born_density_slice(&v, &g, &DiffusionSpec::quantum()), Err(Error::ZeroNorm));
    }
}
