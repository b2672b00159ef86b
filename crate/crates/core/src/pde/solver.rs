//! Crank–Nicolson time stepping with Strang splitting of the diagonal part.
//!
//! One step of length `dt` is `exp(dt/2 V) . CN(dt) . exp(dt/2 V)`, where `V`
//! is the pointwise part of the generator and `CN` handles the kinetic and
//! `A`-cross terms. In 2d the CN factor is itself split as
//! `CN_x(dt/2) CN_y(dt) CN_x(dt/2)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::tridiag::{Tridiag, TridiagLu};
use super::{Boundary, Direction, WaveField};
use crate::error::{Error, Result};
use crate::params::{DiffusionSpec, SpaceGrid, TimeGrid};
use crate::potential::PotentialSpec;

type C = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    pub boundary: Boundary,
    /// Store every `stride`-th step; must divide the number of steps.
    pub stride: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            boundary: Boundary::Dirichlet,
            stride: 1,
        }
    }
}

/// Coefficients of the generator that do not depend on position.
#[derive(Debug, Clone, Copy)]
struct Coeffs {
    /// `alpha hbar / 2m`.
    a: C,
    /// `q / 4m` (divide by `h` per axis); sign flipped for `Psi_+`.
    q4m: f64,
    /// `2 m alpha hbar`.
    two_m_alpha_hbar: C,
    alpha_hbar: C,
    charge: f64,
}

/// Integrates one direction of the complex diffusion equation.
///
/// `psi0` is the slice at `t0` for [`Direction::Forward`] and at `tf` for
/// [`Direction::Backward`].
pub fn solve_complex_diffusion(
    psi0: &[C],
    spec: &DiffusionSpec,
    potential: &PotentialSpec,
    grid: &SpaceGrid,
    times: &TimeGrid,
    direction: Direction,
    options: SolveOptions,
) -> Result<WaveField> {
    let spec = spec.validate()?;
    let grid = grid.validate()?;
    let times = times.validate()?;
    if psi0.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "initial slice has {} values, grid has {}",
            psi0.len(),
            grid.len()
        )));
    }
    if psi0.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::NonFiniteField("initial wave function"));
    }
    let alpha = spec.alpha();
    if spec.alpha_mag == 0.0 {
        return Err(Error::UnstableParameters("alpha = 0 has no diffusion equation".into()));
    }
    if alpha.re < -1e-12 * spec.alpha_mag {
        return Err(Error::UnstableParameters(format!(
            "Re alpha = {} < 0 makes the evolution anti-diffusive",
            alpha.re
        )));
    }
    if options.stride == 0 || times.n_steps % options.stride != 0 {
        return Err(Error::InvalidGrid(format!(
            "stride {} does not divide {} steps",
            options.stride, times.n_steps
        )));
    }
    potential.validate_on(&grid, &times)?;

    let ah = alpha * spec.hbar;
    let charge = match direction {
        Direction::Forward => spec.charge,
        Direction::Backward => -spec.charge,
    };
    let co = Coeffs {
        a: ah / (2.0 * spec.mass),
        q4m: charge / (4.0 * spec.mass),
        two_m_alpha_hbar: 2.0 * spec.mass * ah,
        alpha_hbar: ah,
        charge,
    };

    let n_steps = times.n_steps;
    let dt = times.dt();
    let mut stepper = Stepper::new(&grid, options.boundary, co, potential);
    let mut psi = psi0.to_vec();
    let n_snap = n_steps / options.stride + 1;
    let mut snaps: Vec<Vec<C>> = Vec::with_capacity(n_snap);
    snaps.push(psi.clone());
    let rebuild = potential.time_dependent;
    let time_at = |k: usize| match direction {
        Direction::Forward => times.time(k),
        Direction::Backward => times.time(n_steps - k),
    };
    for k in 0..n_steps {
        let t_mid = 0.5 * (time_at(k) + time_at(k + 1));
        if rebuild || k == 0 {
            stepper.prepare(t_mid, dt, potential)?;
        }
        stepper.step(&mut psi)?;
        if (k + 1) % options.stride == 0 {
            if psi.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
                return Err(Error::SolverDivergence(format!("non-finite values after step {}", k + 1)));
            }
            snaps.push(psi.clone());
        }
    }
    if direction == Direction::Backward {
        snaps.reverse();
    }
    let snapshot_times = (0..n_snap).map(|s| times.time(s * options.stride)).collect();
    Ok(WaveField {
        grid,
        times,
        stride: options.stride,
        snapshot_times,
        values: snaps,
        spec,
        potential: potential.clone(),
        direction,
        boundary: options.boundary,
    })
}

/// Factorized `(I - theta K)` and explicit `(I + theta K)` along one grid line.
struct LineSystem {
    explicit: Tridiag,
    implicit: TridiagLu,
}

impl LineSystem {
    /// `K` from the kinetic coefficient and the `A` component along the line.
    fn new(n: usize, h: f64, co: &Coeffs, a_line: &[f64], boundary: Boundary, theta: f64) -> Result<Self> {
        let cyclic = boundary == Boundary::Periodic;
        let kin = co.a / (h * h);
        let c = co.q4m / h;
        let at = |j: isize| -> f64 {
            if j < 0 {
                if cyclic {
                    a_line[n - 1]
                } else {
                    0.0
                }
            } else if j as usize >= n {
                if cyclic {
                    a_line[0]
                } else {
                    0.0
                }
            } else {
                a_line[j as usize]
            }
        };
        let mut lower = vec![C::new(0.0, 0.0); n];
        let mut diag = vec![C::new(0.0, 0.0); n];
        let mut upper = vec![C::new(0.0, 0.0); n];
        for j in 0..n {
            let aj = a_line[j];
            diag[j] = -2.0 * kin;
            upper[j] = kin + c * (aj + at(j as isize + 1));
            lower[j] = kin - c * (aj + at(j as isize - 1));
        }
        let scaled = |s: f64| Tridiag {
            lower: lower.iter().map(|v| s * v).collect(),
            diag: diag.iter().map(|v| 1.0 + s * v).collect(),
            upper: upper.iter().map(|v| s * v).collect(),
            cyclic,
        };
        let explicit = scaled(theta);
        let implicit = scaled(-theta).factor()?;
        Ok(LineSystem { explicit, implicit })
    }

    fn apply(&self, line: &mut [C], scratch: &mut [C]) -> Result<()> {
        self.explicit.apply(line, scratch);
        line.copy_from_slice(scratch);
        self.implicit.solve(line)
    }
}

struct Stepper {
    grid: SpaceGrid,
    boundary: Boundary,
    co: Coeffs,
    /// `exp(dt/2 V)` per grid point.
    half_diag: Vec<C>,
    /// Lines along the last axis (contiguous), then along the first axis in 2d.
    fast: Vec<LineSystem>,
    slow: Vec<LineSystem>,
    uses_vector: bool,
}

impl Stepper {
    fn new(grid: &SpaceGrid, boundary: Boundary, co: Coeffs, potential: &PotentialSpec) -> Self {
        Stepper {
            grid: grid.clone(),
            boundary,
            co,
            half_diag: Vec::new(),
            fast: Vec::new(),
            slow: Vec::new(),
            uses_vector: potential.has_vector() && co.charge != 0.0,
        }
    }

    fn prepare(&mut self, t: f64, dt: f64, potential: &PotentialSpec) -> Result<()> {
        let d = self.grid.dim();
        let len = self.grid.len();
        let mut avec = vec![0.0; d];
        let mut a_field = vec![0.0; len * d];
        self.half_diag = (0..len)
            .map(|idx| {
                let x = self.grid.coords(idx);
                potential.vector_at(&x, t, &mut avec);
                a_field[idx * d..(idx + 1) * d].copy_from_slice(&avec);
                let a2: f64 = avec.iter().map(|v| v * v).sum();
                let mut v = potential.scalar_at(&x, t) / self.co.alpha_hbar;
                if self.co.charge != 0.0 {
                    v += self.co.charge * self.co.charge * a2 / self.co.two_m_alpha_hbar;
                }
                (0.5 * dt * v).exp()
            })
            .collect();
        if self.half_diag.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::SolverDivergence("potential factor overflows".into()));
        }
        self.fast.clear();
        self.slow.clear();
        let axes = self.grid.axes.clone();
        match axes.as_slice() {
            [x] => {
                let a_line: Vec<f64> = (0..x.n).map(|j| a_field[j]).collect();
                self.fast.push(LineSystem::new(x.n, x.h(), &self.co, &a_line, self.boundary, 0.5 * dt)?);
            }
            [x, y] => {
                // y lines: full step; x lines: two half steps.
                let n_fast = if self.uses_vector { x.n } else { 1 };
                for i in 0..n_fast {
                    let a_line: Vec<f64> = (0..y.n).map(|j| a_field[(i * y.n + j) * 2 + 1]).collect();
                    self.fast.push(LineSystem::new(y.n, y.h(), &self.co, &a_line, self.boundary, 0.5 * dt)?);
                }
                let n_slow = if self.uses_vector { y.n } else { 1 };
                for j in 0..n_slow {
                    let a_line: Vec<f64> = (0..x.n).map(|i| a_field[(i * y.n + j) * 2]).collect();
                    self.slow.push(LineSystem::new(x.n, x.h(), &self.co, &a_line, self.boundary, 0.25 * dt)?);
                }
            }
            _ => return Err(Error::UnsupportedDim(d)),
        }
        Ok(())
    }

    fn step(&self, psi: &mut [C]) -> Result<()> {
        for (v, f) in psi.iter_mut().zip(&self.half_diag) {
            *v *= f;
        }
        match self.grid.axes.as_slice() {
            [x] => {
                let mut scratch = vec![C::new(0.0, 0.0); x.n];
                self.fast[0].apply(psi, &mut scratch)?;
            }
            [x, y] => {
                self.sweep_slow(psi, x.n, y.n)?;
                let mut scratch = vec![C::new(0.0, 0.0); y.n];
                for (i, row) in psi.chunks_mut(y.n).enumerate() {
                    let sys = &self.fast[if self.fast.len() == 1 { 0 } else { i }];
                    sys.apply(row, &mut scratch)?;
                }
                self.sweep_slow(psi, x.n, y.n)?;
            }
            _ => unreachable!("checked in prepare"),
        }
        for (v, f) in psi.iter_mut().zip(&self.half_diag) {
            *v *= f;
        }
        Ok(())
    }

    fn sweep_slow(&self, psi: &mut [C], nx: usize, ny: usize) -> Result<()> {
        let mut col = vec![C::new(0.0, 0.0); nx];
        let mut scratch = vec![C::new(0.0, 0.0); nx];
        for j in 0..ny {
            for i in 0..nx {
                col[i] = psi[i * ny + j];
            }
            let sys = &self.slow[if self.slow.len() == 1 { 0 } else { j }];
            sys.apply(&mut col, &mut scratch)?;
            for i in 0..nx {
                psi[i * ny + j] = col[i];
            }
        }
        Ok(())
    }
}
