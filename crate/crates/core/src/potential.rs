//! Scalar and vector potentials `U(x, t)` and `A_i(x, t)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{SpaceGrid, TimeGrid};

pub type ScalarFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
/// Writes a vector (or a row-major matrix) into the output slice.
pub type VectorFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// Potential data. Missing callbacks mean "identically zero".
#[derive(Clone, Default)]
pub struct PotentialSpec {
    pub scalar: Option<ScalarFn>,
    pub vector: Option<VectorFn>,
    /// `out[i * d + j] = d_j A_i`.
    pub vector_jacobian: Option<VectorFn>,
    /// Whether either callback depends on `t` (solvers then rebuild per step).
    pub time_dependent: bool,
}

impl fmt::Debug for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialSpec")
            .field("scalar", &self.scalar.is_some())
            .field("vector", &self.vector.is_some())
            .field("vector_jacobian", &self.vector_jacobian.is_some())
            .field("time_dependent", &self.time_dependent)
            .finish()
    }
}

impl PotentialSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_scalar(mut self, f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.scalar = Some(Arc::new(f));
        self
    }

    pub fn with_vector(
        mut self,
        a: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
        jacobian: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.vector = Some(Arc::new(a));
        self.vector_jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn time_dependent(mut self, yes: bool) -> Self {
        self.time_dependent = yes;
        self
    }

    /// `U = m omega^2 |x|^2 / 2`.
    pub fn harmonic(mass: f64, omega: f64) -> Self {
        Self::zero().with_scalar(move |x, _| 0.5 * mass * omega * omega * x.iter().map(|v| v * v).sum::<f64>())
    }

    /// Constant scalar potential `U = c`.
    pub fn constant(c: f64) -> Self {
        Self::zero().with_scalar(move |_, _| c)
    }

    /// Uniform vector potential `A = a`.
    pub fn uniform_vector(a: Vec<f64>) -> Self {
        let d = a.len();
        Self::zero().with_vector(
            move |_, _, out| out.copy_from_slice(&a),
            move |_, _, out| out[..d * d].fill(0.0),
        )
    }

    /// `A_i = c x_i`, with Jacobian `c delta_ij`.
    pub fn linear_vector(c: f64) -> Self {
        Self::zero().with_vector(
            move |x, _, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = c * v;
                }
            },
            move |x, _, out| {
                let d = x.len();
                out[..d * d].fill(0.0);
                for i in 0..d {
                    out[i * d + i] = c;
                }
            },
        )
    }

    pub fn has_vector(&self) -> bool {
        self.vector.is_some()
    }

    pub fn scalar_at(&self, x: &[f64], t: f64) -> f64 {
        self.scalar.as_ref().map_or(0.0, |f| f(x, t))
    }

    pub fn vector_at(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match &self.vector {
            Some(a) => a(x, t, out),
            None => out.fill(0.0),
        }
    }

    /// `d_j A_i`; errors when `A` is present without its Jacobian.
    pub fn jacobian_at(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match (&self.vector, &self.vector_jacobian) {
            (None, _) => {
                out.fill(0.0);
                Ok(())
            }
            (Some(_), Some(j)) => {
                j(x, t, out);
                Ok(())
            }
            (Some(_), None) => Err(Error::MissingDerivative),
        }
    }

    /// Checks that the callbacks are finite at every grid point and snapshot time.
    pub fn validate_on(&self, grid: &SpaceGrid, times: &TimeGrid) -> Result<()> {
        let d = grid.dim();
        let mut a = vec![0.0; d];
        let ts: Vec<f64> = if self.time_dependent {
            times.times()
        } else {
            vec![times.t0]
        };
        for &t in &ts {
            for idx in 0..grid.len() {
                let x = grid.coords(idx);
                if !self.scalar_at(&x, t).is_finite() {
                    return Err(Error::NonFiniteField("scalar potential"));
                }
                self.vector_at(&x, t, &mut a);
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteField("vector potential"));
                }
            }
        }
        if self.vector.is_some() && self.vector_jacobian.is_none() {
            return Err(Error::MissingDerivative);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_zero() {
        let p = PotentialSpec::zero();
        assert_eq!(p.scalar_at(&[1.0], 0.0), 0.0);
        let mut a = [1.0];
        p.vector_at(&[1.0], 0.0, &mut a);
        assert_eq!(a, [0.0]);
    }

    #[test]
    fn linear_vector_jacobian() {
        let p = PotentialSpec::linear_vector(2.0);
        let mut j = [0.0; 4];
        p.jacobian_at(&[1.0, 3.0], 0.0, &mut j).unwrap();
        assert_eq!(j, [2.0, 0.0, 0.0, 2.0]);
        let mut a = [0.0; 2];
        p.vector_at(&[1.0, 3.0], 0.0, &mut a);
        assert_eq!(a, [2.0, 6.0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let p = PotentialSpec::zero().with_scalar(|x, _| 1.0 / x[0]);
        let g = SpaceGrid::line(0.0, 1.0, 9).unwrap();
        let t = TimeGrid::new(0.0, 1.0, 1).unwrap();
        assert_eq!(p.validate_on(&g, &t), Err(Error::NonFiniteField("scalar potential")));
    }
}
