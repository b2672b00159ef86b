//! Second-order geometry in a single coordinate chart.
//!
//! Index layout: vectors are `[i]`, matrices `[i * n + j]`, rank-3 arrays
//! `[(i * n + j) * n + k]`. Second-order vectors represent
//! `v^i d_i + (1/2) v^{jk} d_{jk}` and forms `w_i d2x^i + (1/2) w_{ij} d[x^i, x^j]`.
//! Nothing here differentiates numerically: callers supply derivative data.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

fn sym(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
        }
    }
    out
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

/// Integer square root for matrix lengths.
fn side(len: usize) -> usize {
    (len as f64).sqrt().round() as usize
}

/// `(v^i, v^{ij})` with `v^{ij}` symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderVector {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl SecondOrderVector {
    pub fn new(first: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        let n = first.len();
        check_len(second.len(), n * n)?;
        Ok(SecondOrderVector {
            second: sym(&second, n),
            first,
        })
    }

    /// A first-order vector embedded with zero second part.
    pub fn first_order(first: Vec<f64>) -> Self {
        let n = first.len();
        SecondOrderVector {
            first,
            second: vec![0.0; n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Basis element `d_i`.
    pub fn basis_first(n: usize, i: usize) -> Self {
        let mut f = vec![0.0; n];
        f[i] = 1.0;
        Self::first_order(f)
    }

    /// Basis element `d_{kl}`, i.e. `v^{kl} = v^{lk} = 1` so that `(1/2)(v^{kl} d_kl + v^{lk} d_lk) = d_kl`.
    pub fn basis_second(n: usize, k: usize, l: usize) -> Self {
        let mut s = vec![0.0; n * n];
        s[k * n + l] += 1.0;
        s[l * n + k] += 1.0;
        SecondOrderVector {
            first: vec![0.0; n],
            second: s,
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        SecondOrderVector {
            first: self.first.iter().zip(&o.first).map(|(a, b)| a - b).collect(),
            second: self.second.iter().zip(&o.second).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        SecondOrderVector {
            first: self.first.iter().zip(&o.first).map(|(a, b)| a + b).collect(),
            second: self.second.iter().zip(&o.second).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        SecondOrderVector {
            first: self.first.iter().map(|a| c * a).collect(),
            second: self.second.iter().map(|a| c * a).collect(),
        }
    }

    /// Action on a function: `V f = v^i d_i f + (1/2) v^{ij} d_ij f`.
    pub fn apply(&self, grad: &[f64], hess: &[f64]) -> f64 {
        let n = self.dim();
        let mut s: f64 = self.first.iter().zip(grad).map(|(a, b)| a * b).sum();
        for i in 0..n * n {
            s += 0.5 * self.second[i] * hess[i];
        }
        s
    }
}

/// `(w_i, w_{ij})` with `w_{ij}` symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderForm {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl SecondOrderForm {
    pub fn new(first: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        let n = first.len();
        check_len(second.len(), n * n)?;
        Ok(SecondOrderForm {
            second: sym(&second, n),
            first,
        })
    }

    pub fn first_order(first: Vec<f64>) -> Self {
        let n = first.len();
        SecondOrderForm {
            first,
            second: vec![0.0; n * n],
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::first_order(vec![0.0; n])
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Basis form `d2x^i`.
    pub fn basis_first(n: usize, i: usize) -> Self {
        let mut f = vec![0.0; n];
        f[i] = 1.0;
        Self::first_order(f)
    }

    /// Basis form `d[x^i, x^j]`: `(1/2) w_{kl} d[x^k,x^l]` with `w_ij = w_ji = 1`.
    pub fn basis_qv(n: usize, i: usize, j: usize) -> Self {
        let mut s = vec![0.0; n * n];
        s[i * n + j] += 1.0;
        s[j * n + i] += 1.0;
        SecondOrderForm {
            first: vec![0.0; n],
            second: s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        SecondOrderForm {
            first: self.first.iter().zip(&o.first).map(|(a, b)| a + b).collect(),
            second: self.second.iter().zip(&o.second).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        SecondOrderForm {
            first: self.first.iter().map(|a| c * a).collect(),
            second: self.second.iter().map(|a| c * a).collect(),
        }
    }

    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        self.first
            .iter()
            .zip(&o.first)
            .chain(self.second.iter().zip(&o.second))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A first-order field evaluated at a point together with its Jacobian,
/// `jacobian[i * n + j] = d_j A^i` (or `d_j alpha_i` for forms).
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderField {
    pub value: Vec<f64>,
    pub jacobian: Vec<f64>,
}

impl FirstOrderField {
    pub fn new(value: Vec<f64>, jacobian: Vec<f64>) -> Result<Self> {
        check_len(jacobian.len(), value.len() * value.len())?;
        Ok(FirstOrderField { value, jacobian })
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let n = value.len();
        FirstOrderField {
            value,
            jacobian: vec![0.0; n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

/// `<w, v> = w_i v^i + (1/2) w_ij v^ij`.
pub fn pair(w: &SecondOrderForm, v: &SecondOrderVector) -> Result<f64> {
    check_len(v.dim(), w.dim())?;
    let a: f64 = w.first.iter().zip(&v.first).map(|(x, y)| x * y).sum();
    let b: f64 = w.second.iter().zip(&v.second).map(|(x, y)| x * y).sum();
    Ok(a + 0.5 * b)
}

/// First-order pairing `alpha_i v^i`.
pub fn pair_first(alpha: &[f64], v: &[f64]) -> f64 {
    alpha.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `AB = (A^i d_i B^j) d_j + A^i B^j d_ij`.
pub fn vector_product(a: &FirstOrderField, b: &FirstOrderField) -> Result<SecondOrderVector> {
    let n = a.dim();
    check_len(b.dim(), n)?;
    let mut first = vec![0.0; n];
    for (j, f) in first.iter_mut().enumerate() {
        *f = (0..n).map(|i| a.value[i] * b.jacobian[j * n + i]).sum();
    }
    let mut second = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            second[i * n + j] = a.value[i] * b.value[j] + a.value[j] * b.value[i];
        }
    }
    SecondOrderVector::new(first, second)
}

/// Lie bracket `[A, B]^j = A^i d_i B^j - B^i d_i A^j`.
pub fn lie_bracket(a: &FirstOrderField, b: &FirstOrderField) -> Result<Vec<f64>> {
    let n = a.dim();
    check_len(b.dim(), n)?;
    Ok((0..n)
        .map(|j| {
            (0..n)
                .map(|i| a.value[i] * b.jacobian[j * n + i] - b.value[i] * a.jacobian[j * n + i])
                .sum()
        })
        .collect())
}

/// Projection to the first-order part.
pub fn map_p(w: &SecondOrderForm) -> Vec<f64> {
    w.first.clone()
}

/// `d(alpha) = alpha_i d2x^i + (1/2) d_j alpha_i d[x^i, x^j]`.
pub fn map_underline_d(alpha: &FirstOrderField) -> SecondOrderForm {
    SecondOrderForm {
        first: alpha.value.clone(),
        second: sym(&alpha.jacobian, alpha.dim()),
    }
}

/// `H(b) = (1/2) b_ij d[x^i, x^j]` for a bilinear form `b`.
pub fn map_h(b: &[f64]) -> SecondOrderForm {
    let n = side(b.len());
    SecondOrderForm {
        first: vec![0.0; n],
        second: sym(b, n),
    }
}

/// `H(alpha (x) beta)`, the symmetric product `alpha . beta`.
pub fn map_h_product(alpha: &[f64], beta: &[f64]) -> Result<SecondOrderForm> {
    let n = alpha.len();
    check_len(beta.len(), n)?;
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = alpha[i] * beta[j];
        }
    }
    Ok(map_h(&b))
}

/// `G(alpha) = alpha_i (d2x^i + (1/2) Gamma^i_kl d[x^k, x^l])`.
pub fn map_g(alpha: &[f64], gamma: &[f64]) -> Result<SecondOrderForm> {
    let n = alpha.len();
    check_len(gamma.len(), n * n * n)?;
    let mut second = vec![0.0; n * n];
    for (i, a) in alpha.iter().enumerate() {
        for kl in 0..n * n {
            second[kl] += a * gamma[i * n * n + kl];
        }
    }
    SecondOrderForm::new(alpha.to_vec(), second)
}

/// `F(V) = (V^i + (1/2) Gamma^i_kl V^kl) d_i`.
pub fn map_f(v: &SecondOrderVector, gamma: &[f64]) -> Result<Vec<f64>> {
    let n = v.dim();
    check_len(gamma.len(), n * n * n)?;
    Ok((0..n)
        .map(|i| {
            v.first[i]
                + 0.5
                    * (0..n * n)
                        .map(|kl| gamma[i * n * n + kl] * v.second[kl])
                        .sum::<f64>()
        })
        .collect())
}

/// Covariant velocity `w^i + (1/2) Gamma^i_kl w2^kl`.
pub fn hat_velocity(w: &[f64], w2: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    map_f(&SecondOrderVector::new(w.to_vec(), w2.to_vec())?, gamma)
}

/// Second-order differential `d2 f = d_i f d2x^i + (1/2) d_ij f d[x^i, x^j]`.
pub fn d2(grad: &[f64], hess: &[f64]) -> Result<SecondOrderForm> {
    SecondOrderForm::new(grad.to_vec(), hess.to_vec())
}

/// `d[f, g] = d_i f d_j g d[x^i, x^j]`.
pub fn qv_form(df: &[f64], dg: &[f64]) -> Result<SecondOrderForm> {
    Ok(map_h_product(df, dg)?.scale(2.0))
}

/// A chart diffeomorphism `x -> y` with exact derivative data.
pub trait Diffeo: Send + Sync {
    fn dim(&self) -> usize;
    fn map(&self, x: &[f64]) -> Vec<f64>;
    /// `J^i_k = dy^i / dx^k`.
    fn jacobian(&self, x: &[f64]) -> Vec<f64>;
    /// `H^i_kl = d^2 y^i / dx^k dx^l`.
    fn hessian(&self, x: &[f64]) -> Vec<f64>;
    /// Solves `map(x) = y`.
    fn inverse(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// Derivative data of a diffeomorphism at one point, including the inverse
/// Jacobian `K` and inverse Hessian `L^k_ij = d^2 x^k / dy^i dy^j`.
#[derive(Debug, Clone)]
pub struct DiffeoData {
    pub n: usize,
    pub j: Vec<f64>,
    pub h: Vec<f64>,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
}

pub fn invert_matrix(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let mat = DMatrix::from_row_slice(n, n, m);
    let scale = m.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if scale == 0.0 || mat.determinant().abs() <= 1e-14 * scale.powi(n as i32) {
        return None;
    }
    let inv = mat.try_inverse()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[(i, j)];
        }
    }
    Some(out)
}

pub fn diffeo_data(d: &dyn Diffeo, x: &[f64]) -> Result<DiffeoData> {
    let n = d.dim();
    check_len(x.len(), n)?;
    let j = d.jacobian(x);
    let h = d.hessian(x);
    let k = invert_matrix(&j, n).ok_or(Error::SingularJacobian)?;
    let mut l = vec![0.0; n * n * n];
    for kk in 0..n {
        for i in 0..n {
            for jj in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            s += k[kk * n + a] * h[(a * n + b) * n + c] * k[b * n + i] * k[c * n + jj];
                        }
                    }
                }
                l[(kk * n + i) * n + jj] = -s;
            }
        }
    }
    Ok(DiffeoData { n, j, h, k, l })
}

/// `v~^i = J^i_k v^k + (1/2) H^i_kl v^kl`, `v~^ij = J^i_k J^j_l v^kl`.
pub fn transform_vector(v: &SecondOrderVector, d: &dyn Diffeo, x: &[f64]) -> Result<SecondOrderVector> {
    let n = v.dim();
    check_len(d.dim(), n)?;
    let dd = diffeo_data(d, x)?;
    let mut first = vec![0.0; n];
    for (i, f) in first.iter_mut().enumerate() {
        let mut s: f64 = (0..n).map(|k| dd.j[i * n + k] * v.first[k]).sum();
        for kl in 0..n * n {
            s += 0.5 * dd.h[i * n * n + kl] * v.second[kl];
        }
        *f = s;
    }
    let mut second = vec![0.0; n * n];
    for i in 0..n {
        for jj in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                for l in 0..n {
                    s += dd.j[i * n + k] * dd.j[jj * n + l] * v.second[k * n + l];
                }
            }
            second[i * n + jj] = s;
        }
    }
    SecondOrderVector::new(first, second)
}

/// `w~_i = w_k K^k_i`, `w~_ij = w_k L^k_ij + w_kl K^k_i K^l_j`.
pub fn transform_form(w: &SecondOrderForm, d: &dyn Diffeo, x: &[f64]) -> Result<SecondOrderForm> {
    let n = w.dim();
    check_len(d.dim(), n)?;
    let dd = diffeo_data(d, x)?;
    let first: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|k| w.first[k] * dd.k[k * n + i]).sum())
        .collect();
    let mut second = vec![0.0; n * n];
    for i in 0..n {
        for jj in 0..n {
            let mut s: f64 = (0..n).map(|k| w.first[k] * dd.l[(k * n + i) * n + jj]).sum();
            for k in 0..n {
                for l in 0..n {
                    s += w.second[k * n + l] * dd.k[k * n + i] * dd.k[l * n + jj];
                }
            }
            second[i * n + jj] = s;
        }
    }
    SecondOrderForm::new(first, second)
}

/// Connection coefficients in the image chart: `(J Gamma - H)(K, K)`.
pub fn transform_christoffel(gamma: &[f64], d: &dyn Diffeo, x: &[f64]) -> Result<Vec<f64>> {
    let n = d.dim();
    check_len(gamma.len(), n * n * n)?;
    let dd = diffeo_data(d, x)?;
    // T^i_bc = J^i_a Gamma^a_bc - H^i_bc
    let mut t = vec![0.0; n * n * n];
    for i in 0..n {
        for bc in 0..n * n {
            let s: f64 = (0..n).map(|a| dd.j[i * n + a] * gamma[a * n * n + bc]).sum();
            t[i * n * n + bc] = s - dd.h[i * n * n + bc];
        }
    }
    let mut out = vec![0.0; n * n * n];
    for i in 0..n {
        for jj in 0..n {
            for k in 0..n {
                let mut s = 0.0;
                for b in 0..n {
                    for c in 0..n {
                        s += t[(i * n + b) * n + c] * dd.k[b * n + jj] * dd.k[c * n + k];
                    }
                }
                out[(i * n + jj) * n + k] = s;
            }
        }
    }
    Ok(out)
}

/// `y = shift + A x + B(x, x) + C(x, x, x)` with symmetric `B`, `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialDiffeo {
    pub n: usize,
    pub shift: Vec<f64>,
    pub lin: Vec<f64>,
    pub quad: Vec<f64>,
    pub cubic: Vec<f64>,
}

impl PolynomialDiffeo {
    pub fn identity(n: usize) -> Self {
        let mut lin = vec![0.0; n * n];
        for i in 0..n {
            lin[i * n + i] = 1.0;
        }
        PolynomialDiffeo {
            n,
            shift: vec![0.0; n],
            lin,
            quad: vec![0.0; n * n * n],
            cubic: vec![0.0; n * n * n * n],
        }
    }

    /// Random near-identity cubic map; coefficients of size `scale`.
    pub fn random(n: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut d = Self::identity(n);
        let mut u = || scale * (2.0 * rng.random::<f64>() - 1.0);
        for s in d.shift.iter_mut() {
            *s = u();
        }
        for l in d.lin.iter_mut() {
            *l += u();
        }
        for i in 0..n {
            for a in 0..n {
                for b in a..n {
                    let v = u();
                    d.quad[(i * n + a) * n + b] = v;
                    d.quad[(i * n + b) * n + a] = v;
                }
            }
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let mut idx = [a, b, c];
                        idx.sort();
                        if idx == [a, b, c] {
                            let v = u();
                            for p in permutations3(a, b, c) {
                                d.cubic[((i * n + p[0]) * n + p[1]) * n + p[2]] = v;
                            }
                        }
                    }
                }
            }
        }
        d
    }
}

fn permutations3(a: usize, b: usize, c: usize) -> [[usize; 3]; 6] {
    [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

impl Diffeo for PolynomialDiffeo {
    fn dim(&self) -> usize {
        self.n
    }

    fn map(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut s = self.shift[i];
                for a in 0..n {
                    s += self.lin[i * n + a] * x[a];
                    for b in 0..n {
                        s += self.quad[(i * n + a) * n + b] * x[a] * x[b];
                        for c in 0..n {
                            s += self.cubic[((i * n + a) * n + b) * n + c] * x[a] * x[b] * x[c];
                        }
                    }
                }
                s
            })
            .collect()
    }

    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut j = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let mut s = self.lin[i * n + k];
                for a in 0..n {
                    s += 2.0 * self.quad[(i * n + k) * n + a] * x[a];
                    for b in 0..n {
                        s += 3.0 * self.cubic[((i * n + k) * n + a) * n + b] * x[a] * x[b];
                    }
                }
                j[i * n + k] = s;
            }
        }
        j
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut h = vec![0.0; n * n * n];
        for i in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let mut s = 2.0 * self.quad[(i * n + k) * n + l];
                    for a in 0..n {
                        s += 6.0 * self.cubic[((i * n + k) * n + l) * n + a] * x[a];
                    }
                    h[(i * n + k) * n + l] = s;
                }
            }
        }
        h
    }

    fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let lin_inv = invert_matrix(&self.lin, n).ok_or(Error::SingularJacobian)?;
        let mut x: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| lin_inv[i * n + k] * (y[k] - self.shift[k])).sum())
            .collect();
        for _ in 0..100 {
            let r: Vec<f64> = self.map(&x).iter().zip(y).map(|(a, b)| a - b).collect();
            let rn = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if rn < 1e-15 {
                break;
            }
            let k = invert_matrix(&self.jacobian(&x), n).ok_or(Error::SingularJacobian)?;
            for i in 0..n {
                x[i] -= (0..n).map(|j| k[i * n + j] * r[j]).sum::<f64>();
            }
        }
        Ok(x)
    }
}

fn uniform(rng: &mut impl Rng, scale: f64) -> f64 {
    scale * (2.0 * rng.random::<f64>() - 1.0)
}

/// Quadratic field `F^i(x) = c^i + L^i_j x^j + Q^i_jk x^j x^k`, usable as a
/// vector field or (reading `i` as a lower index) as a first-order form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticField {
    pub n: usize,
    pub c: Vec<f64>,
    pub lin: Vec<f64>,
    pub quad: Vec<f64>,
}

impl QuadraticField {
    /// Coefficients uniform in `[-scale, scale]`, `Q` symmetric.
    pub fn random(n: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let c = (0..n).map(|_| uniform(rng, scale)).collect();
        let lin = (0..n * n).map(|_| uniform(rng, scale)).collect();
        let mut quad = vec![0.0; n * n * n];
        for i in 0..n {
            for j in 0..n {
                for k in j..n {
                    let v = uniform(rng, scale);
                    quad[(i * n + j) * n + k] = v;
                    quad[(i * n + k) * n + j] = v;
                }
            }
        }
        QuadraticField { n, c, lin, quad }
    }

    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut s = self.c[i];
                for j in 0..n {
                    s += self.lin[i * n + j] * x[j];
                    for k in 0..n {
                        s += self.quad[(i * n + j) * n + k] * x[j] * x[k];
                    }
                }
                s
            })
            .collect()
    }

    /// `out[i * n + j] = d_j F^i`.
    pub fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.lin[i * n + j] + 2.0 * (0..n).map(|k| self.quad[(i * n + j) * n + k] * x[k]).sum::<f64>();
            }
        }
        out
    }

    pub fn at(&self, x: &[f64]) -> FirstOrderField {
        FirstOrderField {
            value: self.value(x),
            jacobian: self.jacobian(x),
        }
    }
}

/// Cubic scalar `f(x) = c + g_i x^i + (1/2) H_ij x^i x^j + (1/6) T_ijk x^i x^j x^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicScalar {
    pub n: usize,
    pub c: f64,
    pub grad0: Vec<f64>,
    pub hess0: Vec<f64>,
    pub third: Vec<f64>,
}

impl CubicScalar {
    pub fn random(n: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let c = uniform(rng, scale);
        let grad0 = (0..n).map(|_| uniform(rng, scale)).collect();
        let mut hess0 = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = uniform(rng, scale);
                hess0[i * n + j] = v;
                hess0[j * n + i] = v;
            }
        }
        let mut third = vec![0.0; n * n * n];
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let v = uniform(rng, scale);
                    for p in permutations3(i, j, k) {
                        third[(p[0] * n + p[1]) * n + p[2]] = v;
                    }
                }
            }
        }
        CubicScalar { n, c, grad0, hess0, third }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut s = self.c;
        for i in 0..n {
            s += self.grad0[i] * x[i];
            for j in 0..n {
                s += 0.5 * self.hess0[i * n + j] * x[i] * x[j];
                for k in 0..n {
                    s += self.third[(i * n + j) * n + k] * x[i] * x[j] * x[k] / 6.0;
                }
            }
        }
        s
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut s = self.grad0[i];
                for j in 0..n {
                    s += self.hess0[i * n + j] * x[j];
                    for k in 0..n {
                        s += 0.5 * self.third[(i * n + j) * n + k] * x[j] * x[k];
                    }
                }
                s
            })
            .collect()
    }

    pub fn hess(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.hess0[i * n + j] + (0..n).map(|k| self.third[(i * n + j) * n + k] * x[k]).sum::<f64>();
            }
        }
        out
    }
}

/// Random connection coefficients, symmetric in the lower indices.
pub fn random_christoffel(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut g = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in j..n {
                let v = uniform(rng, scale);
                g[(i * n + j) * n + k] = v;
                g[(i * n + k) * n + j] = v;
            }
        }
    }
    g
}

/// Element `(g, kappa)` of the Itô group; `kappa^i_ab` symmetric in `a, b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoGroupElement {
    pub n: usize,
    pub g: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl ItoGroupElement {
    pub fn new(g: Vec<f64>, kappa: Vec<f64>) -> Result<Self> {
        let n = side(g.len());
        check_len(g.len(), n * n)?;
        check_len(kappa.len(), n * n * n)?;
        if invert_matrix(&g, n).is_none() {
            return Err(Error::SingularJacobian);
        }
        let mut k = kappa;
        for i in 0..n {
            let s = sym(&k[i * n * n..(i + 1) * n * n], n);
            k[i * n * n..(i + 1) * n * n].copy_from_slice(&s);
        }
        Ok(ItoGroupElement { n, g, kappa: k })
    }

    /// `g = I + U` and `kappa = V` with entries of `U`, `V` uniform in `[-scale, scale]`.
    pub fn random(n: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut g: Vec<f64> = (0..n * n).map(|_| uniform(rng, scale)).collect();
        for i in 0..n {
            g[i * n + i] += 1.0;
        }
        let kappa = (0..n * n * n).map(|_| uniform(rng, scale)).collect();
        ItoGroupElement::new(g, kappa)
    }

    pub fn identity(n: usize) -> Self {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            g[i * n + i] = 1.0;
        }
        ItoGroupElement {
            n,
            g,
            kappa: vec![0.0; n * n * n],
        }
    }

    /// `(g', k')(g, k) = (g' g, g' k + k' (g (x) g))`.
    pub fn mul(&self, o: &ItoGroupElement) -> Result<ItoGroupElement> {
        let n = self.n;
        check_len(o.n, n)?;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = (0..n).map(|c| self.g[i * n + c] * o.g[c * n + j]).sum();
            }
        }
        let mut kappa = vec![0.0; n * n * n];
        for i in 0..n {
            for a in 0..n {
                for b in 0..n {
                    let mut s: f64 = (0..n).map(|c| self.g[i * n + c] * o.kappa[(c * n + a) * n + b]).sum();
                    for c in 0..n {
                        for d in 0..n {
                            s += self.kappa[(i * n + c) * n + d] * o.g[c * n + a] * o.g[d * n + b];
                        }
                    }
                    kappa[(i * n + a) * n + b] = s;
                }
            }
        }
        Ok(ItoGroupElement { n, g, kappa })
    }

    /// `(g^-1, -g^-1 k (g^-1 (x) g^-1))`.
    pub fn inverse(&self) -> Result<ItoGroupElement> {
        let n = self.n;
        let gi = invert_matrix(&self.g, n).ok_or(Error::SingularJacobian)?;
        let mut kappa = vec![0.0; n * n * n];
        for i in 0..n {
            for a in 0..n {
                for b in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        for d in 0..n {
                            for e in 0..n {
                                s += gi[i * n + c] * self.kappa[(c * n + d) * n + e] * gi[d * n + a] * gi[e * n + b];
                            }
                        }
                    }
                    kappa[(i * n + a) * n + b] = -s;
                }
            }
        }
        Ok(ItoGroupElement { n, g: gi, kappa })
    }

    /// `(g, k)(x, x2) = (g x + k x2, (g (x) g) x2)`.
    pub fn act(&self, x: &[f64], x2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        check_len(x.len(), n)?;
        check_len(x2.len(), n * n)?;
        let x2 = sym(x2, n);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let lin: f64 = (0..n).map(|a| self.g[i * n + a] * x[a]).sum();
                let quad: f64 = (0..n * n).map(|ab| self.kappa[i * n * n + ab] * x2[ab]).sum();
                lin + quad
            })
            .collect();
        let mut y2 = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        s += self.g[i * n + a] * self.g[j * n + b] * x2[a * n + b];
                    }
                }
                y2[i * n + j] = s;
            }
        }
        Ok((y, y2))
    }

    pub fn max_abs_diff(&self, o: &ItoGroupElement) -> f64 {
        self.g
            .iter()
            .zip(&o.g)
            .chain(self.kappa.iter().zip(&o.kappa))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signature {
    Riemannian,
    /// `eta = diag(-1, +1, ..., +1)`.
    Lorentzian,
}

/// Callback writing a flat array for the point `x`.
pub type ChartFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type DomainFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Metric data of one coordinate chart.
#[derive(Clone)]
pub struct ChartedManifold {
    pub n: usize,
    /// `g_{mu nu}`.
    pub metric: ChartFn,
    /// `d_k g_{mu nu}` at `(k * n + mu) * n + nu`.
    pub metric_d1: ChartFn,
    /// `d_k d_l g_{mu nu}` at `((k * n + l) * n + mu) * n + nu`; needed for curvature.
    pub metric_d2: Option<ChartFn>,
    /// `e^mu_alpha` at `mu * n + alpha`.
    pub vielbein: Option<ChartFn>,
    pub signature: Signature,
    pub domain: Option<DomainFn>,
}

impl fmt::Debug for ChartedManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChartedManifold")
            .field("n", &self.n)
            .field("signature", &self.signature)
            .field("metric_d2", &self.metric_d2.is_some())
            .field("vielbein", &self.vielbein.is_some())
            .finish()
    }
}

impl ChartedManifold {
    pub fn euclidean(n: usize) -> Self {
        ChartedManifold {
            n,
            metric: Arc::new(move |_, g| {
                g.fill(0.0);
                for i in 0..n {
                    g[i * n + i] = 1.0;
                }
            }),
            metric_d1: Arc::new(|_, d| d.fill(0.0)),
            metric_d2: Some(Arc::new(|_, d| d.fill(0.0))),
            vielbein: Some(Arc::new(move |_, e| {
                e.fill(0.0);
                for i in 0..n {
                    e[i * n + i] = 1.0;
                }
            })),
            signature: Signature::Riemannian,
            domain: None,
        }
    }

    /// Flat `1 + d` dimensional Minkowski space with `eta = diag(-1, 1, ..., 1)`.
    pub fn minkowski(d: usize) -> Self {
        let n = d + 1;
        let mut m = Self::euclidean(n);
        m.metric = Arc::new(move |_, g| {
            g.fill(0.0);
            g[0] = -1.0;
            for i in 1..n {
                g[i * n + i] = 1.0;
            }
        });
        m.signature = Signature::Lorentzian;
        m
    }

    /// Round 2-sphere of radius `r` in `(theta, phi)` coordinates.
    pub fn sphere(r: f64) -> Self {
        let r2 = r * r;
        ChartedManifold {
            n: 2,
            metric: Arc::new(move |x, g| {
                let s = x[0].sin();
                g.copy_from_slice(&[r2, 0.0, 0.0, r2 * s * s]);
            }),
            metric_d1: Arc::new(move |x, d| {
                d.fill(0.0);
                // only d_theta g_phiphi survives
                d[3] = r2 * (2.0 * x[0]).sin();
            }),
            metric_d2: Some(Arc::new(move |x, d| {
                d.fill(0.0);
                // d_theta d_theta g_phiphi
                d[3] = 2.0 * r2 * (2.0 * x[0]).cos();
            })),
            vielbein: Some(Arc::new(move |x, e| {
                e.copy_from_slice(&[1.0 / r, 0.0, 0.0, 1.0 / (r * x[0].sin())]);
            })),
            signature: Signature::Riemannian,
            domain: Some(Arc::new(|x| x[0] > 0.0 && x[0] < std::f64::consts::PI)),
        }
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite()) && self.domain.as_ref().is_none_or(|f| f(x))
    }

    pub fn metric_at(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n * self.n];
        (self.metric)(x, &mut g);
        g
    }

    pub fn inverse_metric(&self, x: &[f64]) -> Result<Vec<f64>> {
        invert_matrix(&self.metric_at(x), self.n).ok_or(Error::SingularMetric)
    }

    /// Flat-space signature matrix `eta`.
    pub fn eta(&self) -> Vec<f64> {
        let n = self.n;
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            e[i * n + i] = 1.0;
        }
        if self.signature == Signature::Lorentzian {
            e[0] = -1.0;
        }
        e
    }

    /// Vielbein, supplied or built from the inverse metric (Cholesky, or the
    /// diagonal for Lorentzian charts).
    pub fn vielbein_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if let Some(v) = &self.vielbein {
            let mut e = vec![0.0; n * n];
            v(x, &mut e);
            return Ok(e);
        }
        let gi = self.inverse_metric(x)?;
        match self.signature {
            Signature::Riemannian => {
                let m = DMatrix::from_row_slice(n, n, &gi);
                let l = m.cholesky().ok_or(Error::SingularMetric)?.l();
                let mut e = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        e[i * n + j] = l[(i, j)];
                    }
                }
                Ok(e)
            }
            Signature::Lorentzian => {
                let g = self.metric_at(x);
                let off = (0..n * n).filter(|k| k / n != k % n).any(|k| g[k] != 0.0);
                if off {
                    return Err(Error::MissingGeometry(
                        "non-diagonal Lorentzian chart needs a supplied vielbein".into(),
                    ));
                }
                let mut e = vec![0.0; n * n];
                for i in 0..n {
                    e[i * n + i] = 1.0 / g[i * n + i].abs().sqrt();
                }
                Ok(e)
            }
        }
    }

    /// Largest entry of `g(e_a, e_b) - eta_ab`.
    pub fn vielbein_residual(&self, x: &[f64]) -> Result<f64> {
        let n = self.n;
        let g = self.metric_at(x);
        let e = self.vielbein_at(x)?;
        let eta = self.eta();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for mu in 0..n {
                    for nu in 0..n {
                        s += g[mu * n + nu] * e[mu * n + a] * e[nu * n + b];
                    }
                }
                worst = worst.max((s - eta[a * n + b]).abs());
            }
        }
        Ok(worst)
    }
}

/// Levi-Civita symbols `Gamma^mu_{nu rho}` at `(mu * n + nu) * n + rho`.
pub fn christoffel_from_metric(man: &ChartedManifold, x: &[f64]) -> Result<Vec<f64>> {
    let n = man.n;
    check_len(x.len(), n)?;
    let gi = man.inverse_metric(x)?;
    let mut dg = vec![0.0; n * n * n];
    (man.metric_d1)(x, &mut dg);
    Ok(gamma_from(&gi, &dg, n))
}

fn gamma_from(gi: &[f64], dg: &[f64], n: usize) -> Vec<f64> {
    let d = |k: usize, a: usize, b: usize| dg[(k * n + a) * n + b];
    let mut gam = vec![0.0; n * n * n];
    for mu in 0..n {
        for nu in 0..n {
            for rho in 0..n {
                let s: f64 = (0..n)
                    .map(|sg| gi[mu * n + sg] * (d(nu, sg, rho) + d(rho, sg, nu) - d(sg, nu, rho)))
                    .sum();
                gam[(mu * n + nu) * n + rho] = 0.5 * s;
            }
        }
    }
    gam
}

/// `d_lambda Gamma^mu_{nu rho}` at `((lambda * n + mu) * n + nu) * n + rho`, exact from `dg`, `ddg`.
pub fn christoffel_derivative(man: &ChartedManifold, x: &[f64]) -> Result<Vec<f64>> {
    let n = man.n;
    let d2fn = man
        .metric_d2
        .as_ref()
        .ok_or_else(|| Error::MissingGeometry("second metric derivatives".into()))?;
    let gi = man.inverse_metric(x)?;
    let mut dg = vec![0.0; n * n * n];
    (man.metric_d1)(x, &mut dg);
    let mut ddg = vec![0.0; n * n * n * n];
    d2fn(x, &mut ddg);
    let d = |k: usize, a: usize, b: usize| dg[(k * n + a) * n + b];
    let dd = |l: usize, k: usize, a: usize, b: usize| ddg[((l * n + k) * n + a) * n + b];
    let mut out = vec![0.0; n * n * n * n];
    for lam in 0..n {
        // d_lam g^{-1} = -g^{-1} (d_lam g) g^{-1}
        let mut dgi = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    for e in 0..n {
                        s += gi[a * n + c] * d(lam, c, e) * gi[e * n + b];
                    }
                }
                dgi[a * n + b] = -s;
            }
        }
        for mu in 0..n {
            for nu in 0..n {
                for rho in 0..n {
                    let mut s = 0.0;
                    for sg in 0..n {
                        let bracket = d(nu, sg, rho) + d(rho, sg, nu) - d(sg, nu, rho);
                        let dbracket = dd(lam, nu, sg, rho) + dd(lam, rho, sg, nu) - dd(lam, sg, nu, rho);
                        s += dgi[mu * n + sg] * bracket + gi[mu * n + sg] * dbracket;
                    }
                    out[((lam * n + mu) * n + nu) * n + rho] = 0.5 * s;
                }
            }
        }
    }
    Ok(out)
}

/// `R^rho_{sigma mu nu} = d_mu Gamma^rho_{nu sigma} - d_nu Gamma^rho_{mu sigma}
/// + Gamma^rho_{mu l} Gamma^l_{nu sigma} - Gamma^rho_{nu l} Gamma^l_{mu sigma}`,
/// at `((rho * n + sigma) * n + mu) * n + nu`.
pub fn riemann_from_christoffel(man: &ChartedManifold, x: &[f64]) -> Result<Vec<f64>> {
    let n = man.n;
    let g = christoffel_from_metric(man, x)?;
    let dg = christoffel_derivative(man, x)?;
    let gm = |a: usize, b: usize, c: usize| g[(a * n + b) * n + c];
    let dgm = |l: usize, a: usize, b: usize, c: usize| dg[((l * n + a) * n + b) * n + c];
    let mut r = vec![0.0; n * n * n * n];
    for rho in 0..n {
        for sg in 0..n {
            for mu in 0..n {
                for nu in 0..n {
                    let mut s = dgm(mu, rho, nu, sg) - dgm(nu, rho, mu, sg);
                    for l in 0..n {
                        s += gm(rho, mu, l) * gm(l, nu, sg) - gm(rho, nu, l) * gm(l, mu, sg);
                    }
                    r[((rho * n + sg) * n + mu) * n + nu] = s;
                }
            }
        }
    }
    Ok(r)
}

/// `R_{rho sigma mu nu} = g_{rho l} R^l_{sigma mu nu}`.
pub fn riemann_lowered(man: &ChartedManifold, x: &[f64]) -> Result<Vec<f64>> {
    let n = man.n;
    let r = riemann_from_christoffel(man, x)?;
    let g = man.metric_at(x);
    let mut out = vec![0.0; n * n * n * n];
    for rho in 0..n {
        for rest in 0..n * n * n {
            out[rho * n * n * n + rest] = (0..n).map(|l| g[rho * n + l] * r[l * n * n * n + rest]).sum();
        }
    }
    Ok(out)
}

/// Scalar curvature `g^{sigma nu} R^rho_{sigma rho nu}`.
pub fn ricci_scalar(man: &ChartedManifold, x: &[f64]) -> Result<f64> {
    let n = man.n;
    let r = riemann_from_christoffel(man, x)?;
    let gi = man.inverse_metric(x)?;
    let mut s = 0.0;
    for sg in 0..n {
        for nu in 0..n {
            let ric: f64 = (0..n).map(|rho| r[((rho * n + sg) * n + rho) * n + nu]).sum();
            s += gi[sg * n + nu] * ric;
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn quadratic_map_example() {
        // y = x + x^2 in one dimension
        let mut d = PolynomialDiffeo::identity(1);
        d.quad[0] = 1.0;
        let x = [0.3];
        let v = SecondOrderVector::new(vec![2.0], vec![5.0]).unwrap();
        let t = transform_vector(&v, &d, &x).unwrap();
        assert!((t.first[0] - (2.0 * 1.6 + 5.0)).abs() < 1e-14);
        assert!((t.second[0] - 5.0 * 1.6 * 1.6).abs() < 1e-14);
        let w = transform_form(&SecondOrderForm::first_order(vec![1.0]), &d, &x).unwrap();
        assert!(w.second[0].abs() > 0.1);
    }

    #[test]
    fn ito_group_hand_example() {
        let a = ItoGroupElement::new(vec![2.0], vec![3.0]).unwrap();
        let b = ItoGroupElement::new(vec![5.0], vec![7.0]).unwrap();
        let c = a.mul(&b).unwrap();
        assert_eq!((c.g[0], c.kappa[0]), (10.0, 89.0));
        assert!(ItoGroupElement::new(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn sphere_christoffel_and_curvature() {
        let r = 1.7;
        let s = ChartedManifold::sphere(r);
        let th = 0.9;
        let g = christoffel_from_metric(&s, &[th, 0.2]).unwrap();
        // Gamma^theta_{phi phi} and Gamma^phi_{theta phi}
        assert!((g[3] + th.sin() * th.cos()).abs() < 1e-14);
        assert!((g[(1 * 2 + 0) * 2 + 1] - th.cos() / th.sin()).abs() < 1e-14);
        assert!((g[(1 * 2 + 1) * 2 + 0] - th.cos() / th.sin()).abs() < 1e-14);
        let rs = ricci_scalar(&s, &[th, 0.2]).unwrap();
        assert!((rs - 2.0 / (r * r)).abs() < 1e-12);
        assert!(s.vielbein_residual(&[th, 0.0]).unwrap() < 1e-12);
        let flat = ChartedManifold::minkowski(3);
        assert!(riemann_from_christoffel(&flat, &[0.0; 4]).unwrap().iter().all(|v| *v == 0.0));
        assert!(flat.vielbein_residual(&[0.0; 4]).unwrap() == 0.0);
        let _ = PI;
    }

    #[test]
    fn cholesky_vielbein() {
        let mut s = ChartedManifold::sphere(2.0);
        s.vielbein = None;
        assert!(s.vielbein_residual(&[1.1, 0.0]).unwrap() < 1e-12);
    }

    #[test]
    fn polynomial_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = PolynomialDiffeo::random(3, 0.1, &mut rng);
        let x = [0.2, -0.3, 0.1];
        let y = d.map(&x);
        let back = d.inverse(&y).unwrap();
        for i in 0..3 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_pairings() {
        let n = 3;
        for i in 0..n {
            for j in 0..n {
                let p = pair(&SecondOrderForm::basis_first(n, i), &SecondOrderVector::basis_first(n, j)).unwrap();
                assert_eq!(p, if i == j { 1.0 } else { 0.0 });
                for k in 0..n {
                    for l in 0..n {
                        let q = pair(&SecondOrderForm::basis_qv(n, i, j), &SecondOrderVector::basis_second(n, k, l))
                            .unwrap();
                        let want = (i == k && j == l) as u8 as f64 + (i == l && j == k) as u8 as f64;
                        assert_eq!(q, want, "{i}{j}{k}{l}");
                    }
                }
            }
        }
        assert!(matches!(
            pair(&SecondOrderForm::zero(2), &SecondOrderVector::basis_first(3, 0)),
            Err(Error::DimMismatch { .. })
        ));
    }
}
