//! Log-derivatives of wave functions and the Hamilton–Jacobi residual.
//!
//! Differences of `ln Psi` between neighbouring nodes take the phase
//! difference wrapped into `(-pi, pi]`, which is the same as differencing the
//! phase after unwrapping along each grid line.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use super::{Boundary, WaveField};
use crate::error::{Error, Result};
use crate::params::{wrap_angle, SpaceGrid};

type C = Complex64;

/// Nodes with `|Psi| <= NODE_THRESHOLD * max |Psi|` are masked.
pub const NODE_THRESHOLD: f64 = 1e-8;

/// Largest masked fraction of a slice before log-based quantities are refused.
const MAX_MASKED_FRACTION: f64 = 0.95;

/// `ln Psi_j - ln Psi_i` on the continuous branch.
fn log_diff(pj: C, pi: C) -> C {
    C::new((pj.norm() / pi.norm()).ln(), wrap_angle(pj.arg() - pi.arg()))
}

/// `d_i ln Psi` and the Laplacian of `ln Psi` on one slice.
#[derive(Debug, Clone)]
pub struct LogDerivatives {
    pub dim: usize,
    /// `grad[idx * dim + i] = d_i ln Psi`.
    pub grad: Vec<C>,
    pub laplacian: Vec<C>,
    /// `|Psi|` above the node threshold.
    pub unmasked: Vec<bool>,
    /// Unmasked with every centred-stencil neighbour unmasked and in the grid.
    pub interior: Vec<bool>,
}

/// Neighbour of `idx` along `axis` shifted by `step`, honouring the boundary.
fn neighbour(grid: &SpaceGrid, boundary: Boundary, idx: usize, axis: usize, step: isize) -> Option<usize> {
    let (pos, n, stride) = match (grid.dim(), axis) {
        (1, _) => (idx, grid.axes[0].n, 1),
        (2, 0) => (idx / grid.axes[1].n, grid.axes[0].n, grid.axes[1].n),
        (2, _) => (idx % grid.axes[1].n, grid.axes[1].n, 1),
        _ => unreachable!("grids are 1d or 2d"),
    };
    let p = pos as isize + step;
    let q = if p >= 0 && (p as usize) < n {
        p as usize
    } else if boundary == Boundary::Periodic {
        p.rem_euclid(n as isize) as usize
    } else {
        return None;
    };
    Some((idx as isize + (q as isize - pos as isize) * stride as isize) as usize)
}

fn node_mask(values: &[C]) -> Vec<bool> {
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.norm()));
    values.iter().map(|v| v.norm() > NODE_THRESHOLD * max && max > 0.0).collect()
}

/// Computes log-derivatives of a slice.
///
/// Dirichlet edges use one-sided second-order stencils and are not interior.
/// Errors with `NodeRegionTooLarge` when too much of the slice is masked or
/// when an unmasked plaquette carries a phase vortex.
pub fn log_derivatives(values: &[C], grid: &SpaceGrid, boundary: Boundary) -> Result<LogDerivatives> {
    let len = grid.len();
    if values.len() != len {
        return Err(Error::GridMismatch(format!("{} values on {} points", values.len(), len)));
    }
    let d = grid.dim();
    let unmasked = node_mask(values);
    let masked = unmasked.iter().filter(|u| !**u).count();
    if masked as f64 > MAX_MASKED_FRACTION * len as f64 {
        return Err(Error::NodeRegionTooLarge(format!("{masked} of {len} nodes below threshold")));
    }
    check_loop_residues(values, grid, boundary, &unmasked)?;

    let mut grad = vec![C::new(0.0, 0.0); len * d];
    let mut laplacian = vec![C::new(0.0, 0.0); len];
    let mut interior = unmasked.clone();
    let ok = |i: Option<usize>| i.filter(|&j| unmasked[j]);
    for idx in 0..len {
        if !unmasked[idx] {
            interior[idx] = false;
            continue;
        }
        for axis in 0..d {
            let h = grid.axes[axis].h();
            let nb = |s: isize| ok(neighbour(grid, boundary, idx, axis, s));
            match (nb(-1), nb(1)) {
                (Some(l), Some(r)) => {
                    let dr = log_diff(values[r], values[idx]);
                    let dl = log_diff(values[idx], values[l]);
                    grad[idx * d + axis] = (dr + dl) / (2.0 * h);
                    laplacian[idx] += (dr - dl) / (h * h);
                }
                (None, Some(r)) => {
                    interior[idx] = false;
                    if let (Some(r2), Some(r3)) = (nb(2), nb(3)) {
                        let g1 = log_diff(values[r], values[idx]);
                        let g2 = g1 + log_diff(values[r2], values[r]);
                        let g3 = g2 + log_diff(values[r3], values[r2]);
                        grad[idx * d + axis] = (4.0 * g1 - g2) / (2.0 * h);
                        laplacian[idx] += (-5.0 * g1 + 4.0 * g2 - g3) / (h * h);
                    }
                }
                (Some(l), None) => {
                    interior[idx] = false;
                    if let (Some(l2), Some(l3)) = (nb(-2), nb(-3)) {
                        let g1 = log_diff(values[l], values[idx]);
                        let g2 = g1 + log_diff(values[l2], values[l]);
                        let g3 = g2 + log_diff(values[l3], values[l2]);
                        grad[idx * d + axis] = -(4.0 * g1 - g2) / (2.0 * h);
                        laplacian[idx] += (-5.0 * g1 + 4.0 * g2 - g3) / (h * h);
                    }
                }
                (None, None) => interior[idx] = false,
            }
        }
    }
    Ok(LogDerivatives {
        dim: d,
        grad,
        laplacian,
        unmasked,
        interior,
    })
}

/// Every unmasked plaquette must have zero winding.
fn check_loop_residues(values: &[C], grid: &SpaceGrid, boundary: Boundary, unmasked: &[bool]) -> Result<()> {
    if grid.dim() != 2 {
        return Ok(());
    }
    for idx in 0..grid.len() {
        let (Some(a), Some(b)) = (
            neighbour(grid, boundary, idx, 0, 1),
            neighbour(grid, boundary, idx, 1, 1),
        ) else {
            continue;
        };
        let Some(c) = neighbour(grid, boundary, a, 1, 1) else {
            continue;
        };
        if ![idx, a, b, c].iter().all(|&j| unmasked[j]) {
            continue;
        }
        let w = wrap_angle(values[a].arg() - values[idx].arg())
            + wrap_angle(values[c].arg() - values[a].arg())
            + wrap_angle(values[b].arg() - values[c].arg())
            + wrap_angle(values[idx].arg() - values[b].arg());
        if w.abs() > PI {
            return Err(Error::NodeRegionTooLarge(format!(
                "phase vortex in plaquette at node {idx}"
            )));
        }
    }
    Ok(())
}

/// Pointwise residual of the combined Hamilton–Jacobi equation.
#[derive(Debug, Clone, Serialize)]
pub struct HjResidual {
    /// Snapshot indices at which the residual was evaluated.
    pub snapshots: Vec<usize>,
    /// Residual per evaluated snapshot; zero outside the evaluation region.
    #[serde(skip)]
    pub residual: Vec<Vec<C>>,
    #[serde(skip)]
    pub region: Vec<Vec<bool>>,
    pub max_abs: f64,
    /// `sqrt` of the snapshot average of `int |R|^2 dV` over the region.
    pub l2: f64,
    pub n_points: usize,
}

/// Residual `R` of
///
/// ```text
/// 2m d_t S + (dS)^2 + s alpha hbar d^2 S - 2q A.dS - s alpha hbar q div A + q^2 A^2 + 2m U = 0
/// ```
///
/// with `S = s alpha hbar ln Psi`, `s = -1` for `Psi_-` and `+1` for `Psi_+`.
/// Centred differences in space and between consecutive snapshots in time.
pub fn hamilton_jacobi_residual(field: &WaveField) -> Result<HjResidual> {
    let n_snap = field.n_snapshots();
    if n_snap < 3 {
        return Err(Error::InvalidGrid("residual needs at least three snapshots".into()));
    }
    let grid = &field.grid;
    let d = grid.dim();
    let len = grid.len();
    let spec = &field.spec;
    let sigma = field.direction.sign();
    let ah = spec.alpha() * spec.hbar;
    let big_s = sigma * ah;
    let (m, q) = (spec.mass, spec.charge);
    let dt = field.times.dt() * field.stride as f64;
    let coords: Vec<Vec<f64>> = (0..len).map(|i| grid.coords(i)).collect();

    let derivs: Vec<LogDerivatives> = field
        .values
        .iter()
        .map(|s| log_derivatives(s, grid, field.boundary))
        .collect::<Result<_>>()?;

    let mut a = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut out = HjResidual {
        snapshots: Vec::new(),
        residual: Vec::new(),
        region: Vec::new(),
        max_abs: 0.0,
        l2: 0.0,
        n_points: 0,
    };
    let mut sum_sq = 0.0;
    for k in 1..n_snap - 1 {
        let t = field.snapshot_times[k];
        let (prev, cur, next) = (&field.values[k - 1], &field.values[k], &field.values[k + 1]);
        let der = &derivs[k];
        let mut res = vec![C::new(0.0, 0.0); len];
        let mut region = vec![false; len];
        let mut slice_sq = 0.0;
        for idx in 0..len {
            if !(der.interior[idx] && derivs[k - 1].unmasked[idx] && derivs[k + 1].unmasked[idx]) {
                continue;
            }
            let lt = (log_diff(next[idx], cur[idx]) + log_diff(cur[idx], prev[idx])) / (2.0 * dt);
            let x = &coords[idx];
            field.potential.vector_at(x, t, &mut a);
            field.potential.jacobian_at(x, t, &mut jac)?;
            let div_a: f64 = (0..d).map(|i| jac[i * d + i]).sum();
            let a2: f64 = a.iter().map(|v| v * v).sum();
            let mut r = 2.0 * m * big_s * lt + big_s * sigma * ah * der.laplacian[idx];
            for i in 0..d {
                let ds = big_s * der.grad[idx * d + i];
                r += ds * ds - 2.0 * q * a[i] * ds;
            }
            r += -sigma * ah * q * div_a + q * q * a2 + 2.0 * m * field.potential.scalar_at(x, t);
            res[idx] = r;
            region[idx] = true;
            out.max_abs = out.max_abs.max(r.norm());
            slice_sq += r.norm_sqr();
            out.n_points += 1;
        }
        sum_sq += slice_sq * grid.cell_volume();
        out.snapshots.push(k);
        out.residual.push(res);
        out.region.push(region);
    }
    if out.n_points == 0 {
        return Err(Error::NodeRegionTooLarge("empty evaluation region".into()));
    }
    out.l2 = (sum_sq / out.snapshots.len() as f64).sqrt();
    Ok(out)
}
