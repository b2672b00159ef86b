//! Complex tridiagonal and cyclic tridiagonal solvers.

use num_complex::Complex64;

use crate::error::{Error, Result};

type C = Complex64;

/// Tridiagonal matrix: `lower[j] = a_{j, j-1}`, `upper[j] = a_{j, j+1}`.
/// In cyclic mode `lower[0]` couples row 0 to column `n-1` and `upper[n-1]`
/// couples row `n-1` to column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    pub lower: Vec<C>,
    pub diag: Vec<C>,
    pub upper: Vec<C>,
    pub cyclic: bool,
}

impl Tridiag {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `y = A x` (in place into `out`).
    pub fn apply(&self, x: &[C], out: &mut [C]) {
        let n = self.len();
        for j in 0..n {
            let mut s = self.diag[j] * x[j];
            if j > 0 {
                s += self.lower[j] * x[j - 1];
            } else if self.cyclic {
                s += self.lower[0] * x[n - 1];
            }
            if j + 1 < n {
                s += self.upper[j] * x[j + 1];
            } else if self.cyclic {
                s += self.upper[n - 1] * x[0];
            }
            out[j] = s;
        }
    }

    pub fn factor(&self) -> Result<TridiagLu> {
        if self.cyclic {
            TridiagLu::cyclic(self)
        } else {
            TridiagLu::plain(&self.lower, &self.diag, &self.upper).map(|lu| TridiagLu { cyc: None, ..lu })
        }
    }
}

#[derive(Debug, Clone)]
struct Cyclic {
    /// `T'^{-1} u`.
    z: Vec<C>,
    v_last: C,
    denom: C,
}

/// Factorized tridiagonal system, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct TridiagLu {
    lower: Vec<C>,
    inv_pivot: Vec<C>,
    c_prime: Vec<C>,
    cyc: Option<Cyclic>,
}

fn pivot_ok(p: C, scale: f64) -> Result<C> {
    if !(p.norm() > 1e-300 * scale.max(1.0)) || !p.re.is_finite() || !p.im.is_finite() {
        return Err(Error::SolverDivergence("zero pivot in tridiagonal solve".into()));
    }
    Ok(1.0 / p)
}

impl TridiagLu {
    fn plain(lower: &[C], diag: &[C], upper: &[C]) -> Result<TridiagLu> {
        let n = diag.len();
        let scale = diag.iter().fold(0.0f64, |a, d| a.max(d.norm()));
        let mut inv_pivot = vec![C::new(0.0, 0.0); n];
        let mut c_prime = vec![C::new(0.0, 0.0); n];
        let mut prev_c = C::new(0.0, 0.0);
        for j in 0..n {
            let l = if j > 0 { lower[j] } else { C::new(0.0, 0.0) };
            let p = diag[j] - l * prev_c;
            let ip = pivot_ok(p, scale)?;
            inv_pivot[j] = ip;
            c_prime[j] = if j + 1 < n { upper[j] * ip } else { C::new(0.0, 0.0) };
            prev_c = c_prime[j];
        }
        Ok(TridiagLu {
            lower: lower.to_vec(),
            inv_pivot,
            c_prime,
            cyc: None,
        })
    }

    fn cyclic(a: &Tridiag) -> Result<TridiagLu> {
        let n = a.len();
        if n < 3 {
            return Err(Error::InvalidGrid("cyclic system needs at least 3 unknowns".into()));
        }
        let beta = a.lower[0];
        let alpha = a.upper[n - 1];
        let gamma = -a.diag[0];
        let mut diag = a.diag.clone();
        diag[0] -= gamma;
        diag[n - 1] -= alpha * beta / gamma;
        let mut lu = TridiagLu::plain(&a.lower, &diag, &a.upper)?;
        let mut u = vec![C::new(0.0, 0.0); n];
        u[0] = gamma;
        u[n - 1] = alpha;
        lu.solve_plain(&mut u);
        let v_last = beta / gamma;
        let denom = 1.0 + u[0] + v_last * u[n - 1];
        if denom.norm() < 1e-300 {
            return Err(Error::SolverDivergence("singular cyclic correction".into()));
        }
        lu.cyc = Some(Cyclic { z: u, v_last, denom });
        Ok(lu)
    }

    fn solve_plain(&self, rhs: &mut [C]) {
        let n = rhs.len();
        rhs[0] *= self.inv_pivot[0];
        for j in 1..n {
            rhs[j] = (rhs[j] - self.lower[j] * rhs[j - 1]) * self.inv_pivot[j];
        }
        for j in (0..n - 1).rev() {
            let next = rhs[j + 1];
            rhs[j] -= self.c_prime[j] * next;
        }
    }

    /// Solves in place.
    pub fn solve(&self, rhs: &mut [C]) -> Result<()> {
        self.solve_plain(rhs);
        if let Some(c) = &self.cyc {
            let n = rhs.len();
            let f = (rhs[0] + c.v_last * rhs[n - 1]) / c.denom;
            for (r, z) in rhs.iter_mut().zip(&c.z) {
                *r -= f * z;
            }
        }
        if rhs.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::SolverDivergence("non-finite tridiagonal solution".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, cyclic: bool) -> Tridiag {
        let c = |a: f64, b: f64| C::new(a, b);
        Tridiag {
            lower: (0..n).map(|j| c(-1.0 + 0.1 * j as f64, 0.3)).collect(),
            diag: (0..n).map(|j| c(4.0 + 0.05 * j as f64, -0.7)).collect(),
            upper: (0..n).map(|j| c(-0.5, 0.2 * j as f64)).collect(),
            cyclic,
        }
    }

    #[test]
    fn solves_plain_and_cyclic() {
        for cyclic in [false, true] {
            let a = sample(12, cyclic);
            let x: Vec<C> = (0..12).map(|j| C::new(j as f64 - 3.0, 0.5 * j as f64)).collect();
            let mut b = vec![C::new(0.0, 0.0); 12];
            a.apply(&x, &mut b);
            a.factor().unwrap().solve(&mut b).unwrap();
            for (u, v) in b.iter().zip(&x) {
                assert!((u - v).norm() < 1e-12, "cyclic={cyclic}");
            }
        }
    }

    #[test]
    fn zero_pivot_is_an_error() {
        let z = C::new(0.0, 0.0);
        let a = Tridiag {
            lower: vec![z; 3],
            diag: vec![z; 3],
            upper: vec![z; 3],
            cyclic: false,
        };
        assert!(matches!(a.factor(), Err(Error::SolverDivergence(_))));
    }
}
