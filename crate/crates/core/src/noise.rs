//! Complex-rotated Wiener ensembles and their realized statistics.
//!
//! Increments are `dM = e^{i phi/2} dW` with `dW` real Gaussian of
//! variance `(|alpha| hbar / m) dt`. Paths are stored through the real ray
//! coordinate `dW`, which makes the degenerate complex structure exact.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{DiffusionSpec, SeedSpec, TimeGrid, RNG_ALGORITHM};
use crate::stats::{self, chunked_reduce, Moments};

/// Largest number of stored real increments in a materialized ensemble.
pub const MAX_ENSEMBLE_VALUES: usize = 1 << 25;

/// Default per-test significance of the Lévy diagnostics.
pub const DEFAULT_SIGNIFICANCE: f64 = 1e-3;

/// Unit complex number `e^{i theta/2}` with components below 1e-15 snapped to zero,
/// so that `theta = pi` gives exactly `i`.
pub fn half_angle_ray(theta: f64) -> Complex64 {
    let snap = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
    Complex64::new(snap((0.5 * theta).cos()), snap((0.5 * theta).sin()))
}

/// Rejects the jump extension of the structure relation.
pub fn check_no_jumps(beta: f64) -> Result<()> {
    if beta != 0.0 {
        return Err(Error::JumpsUnsupported(beta));
    }
    Ok(())
}

/// Anything that can hand out the real ray increments of path `k`.
pub trait PathSource: Sync {
    fn n_paths(&self) -> usize;
    fn dim(&self) -> usize;
    fn grid(&self) -> &TimeGrid;
    /// Ray `e^{i theta_a / 2}` of each component.
    fn rays(&self) -> &[Complex64];
    /// Writes the `n_steps * dim` real increments of path `k`, step-major.
    fn fill_increments(&self, k: usize, buf: &mut [f64]);

    fn buffer_len(&self) -> usize {
        self.grid().n_steps * self.dim()
    }
}

/// Lazily generated ensemble; nothing is stored, path `k` is regenerated on demand.
#[derive(Debug, Clone)]
pub struct WienerStream {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub rays: Vec<Complex64>,
    /// Variance rate of the real ray coordinate.
    pub rate: f64,
    pub seed: SeedSpec,
}

impl WienerStream {
    pub fn new(
        grid: TimeGrid,
        rays: Vec<Complex64>,
        rate: f64,
        n_paths: usize,
        seed: SeedSpec,
    ) -> Result<Self> {
        let grid = grid.validate()?;
        if rays.is_empty() {
            return Err(Error::UnsupportedDim(0));
        }
        if n_paths == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(Error::NonFiniteField("noise rate"));
        }
        Ok(WienerStream {
            grid,
            dim: rays.len(),
            n_paths,
            rays,
            rate,
            seed,
        })
    }

    /// Materializes the stream, subject to [`MAX_ENSEMBLE_VALUES`].
    pub fn collect(&self, spec: DiffusionSpec) -> Result<ComplexPathEnsemble> {
        let per = self.buffer_len();
        let total = per
            .checked_mul(self.n_paths)
            .ok_or(Error::OverflowingEnsembleSize {
                requested: usize::MAX,
                cap: MAX_ENSEMBLE_VALUES,
            })?;
        if total > MAX_ENSEMBLE_VALUES {
            return Err(Error::OverflowingEnsembleSize {
                requested: total,
                cap: MAX_ENSEMBLE_VALUES,
            });
        }
        let mut inc = vec![0.0; total];
        inc.par_chunks_mut(per)
            .enumerate()
            .for_each(|(k, buf)| self.fill_increments(k, buf));
        Ok(ComplexPathEnsemble {
            spec,
            grid: self.grid,
            dim: self.dim,
            n_paths: self.n_paths,
            seed: self.seed,
            rays: self.rays.clone(),
            increments: inc,
        })
    }
}

impl PathSource for WienerStream {
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn rays(&self) -> &[Complex64] {
        &self.rays
    }
    fn fill_increments(&self, k: usize, buf: &mut [f64]) {
        let scale = (self.rate * self.grid.dt()).sqrt();
        let mut rng = self.seed.stream(k as u64);
        for b in buf.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *b = scale * z;
        }
    }
}

/// Generation parameters written next to serialized ensembles.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleMeta {
    pub spec: DiffusionSpec,
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub master_seed: u64,
    pub rng: &'static str,
}

/// `N` stored paths of the complex martingale `M`.
#[derive(Debug, Clone)]
pub struct ComplexPathEnsemble {
    pub spec: DiffusionSpec,
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: SeedSpec,
    rays: Vec<Complex64>,
    /// Real ray increments, path-major then step-major.
    increments: Vec<f64>,
}

impl ComplexPathEnsemble {
    /// Wraps externally built ray increments (used for injected-defect studies).
    pub fn from_ray_increments(
        spec: DiffusionSpec,
        grid: TimeGrid,
        rays: Vec<Complex64>,
        n_paths: usize,
        seed: SeedSpec,
        increments: Vec<f64>,
    ) -> Result<Self> {
        let dim = rays.len();
        let want = grid.n_steps * dim * n_paths;
        if increments.len() != want {
            return Err(Error::GridMismatch(format!(
                "expected {want} increments, got {}",
                increments.len()
            )));
        }
        Ok(ComplexPathEnsemble {
            spec,
            grid,
            dim,
            n_paths,
            seed,
            rays,
            increments,
        })
    }

    pub fn meta(&self) -> EnsembleMeta {
        EnsembleMeta {
            spec: self.spec,
            grid: self.grid,
            dim: self.dim,
            n_paths: self.n_paths,
            master_seed: self.seed.master_seed,
            rng: RNG_ALGORITHM,
        }
    }

    pub fn ray(&self, a: usize) -> Complex64 {
        self.rays[a]
    }

    fn offset(&self, k: usize, step: usize, a: usize) -> usize {
        (k * self.grid.n_steps + step) * self.dim + a
    }

    /// Real ray coordinate of the increment over `[t_step, t_step+1]`.
    pub fn ray_increment(&self, k: usize, step: usize, a: usize) -> f64 {
        self.increments[self.offset(k, step, a)]
    }

    /// Complex increment `dM`.
    pub fn increment(&self, k: usize, step: usize, a: usize) -> Complex64 {
        self.rays[a] * self.ray_increment(k, step, a)
    }

    /// Path `k` as `(n_steps + 1) * dim` complex values, step-major, starting at 0.
    pub fn path(&self, k: usize) -> Vec<Complex64> {
        let d = self.dim;
        let mut w = vec![0.0; d];
        let mut out = Vec::with_capacity((self.grid.n_steps + 1) * d);
        out.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), d));
        for s in 0..self.grid.n_steps {
            for (a, wa) in w.iter_mut().enumerate() {
                *wa += self.ray_increment(k, s, a);
                out.push(self.rays[a] * *wa);
            }
        }
        out
    }

    /// `M^a` of path `k` at grid index `step`.
    pub fn value(&self, k: usize, step: usize, a: usize) -> Complex64 {
        let w: f64 = (0..step).map(|s| self.ray_increment(k, s, a)).sum();
        self.rays[a] * w
    }

    /// The time-reversed ensemble `B_s = M_{T-s} - M_T`.
    pub fn reversed(&self) -> ComplexPathEnsemble {
        let n = self.grid.n_steps;
        let d = self.dim;
        let mut inc = vec![0.0; self.increments.len()];
        for k in 0..self.n_paths {
            for s in 0..n {
                for a in 0..d {
                    inc[self.offset(k, s, a)] = -self.ray_increment(k, n - 1 - s, a);
                }
            }
        }
        ComplexPathEnsemble {
            increments: inc,
            rays: self.rays.clone(),
            ..*self
        }
    }
}

impl PathSource for ComplexPathEnsemble {
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn rays(&self) -> &[Complex64] {
        &self.rays
    }
    fn fill_increments(&self, k: usize, buf: &mut [f64]) {
        let per = self.grid.n_steps * self.dim;
        buf.copy_from_slice(&self.increments[k * per..(k + 1) * per]);
    }
}

/// Lazy rotated Wiener source with the rates fixed by `spec`.
pub fn rotated_wiener_stream(
    spec: &DiffusionSpec,
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<WienerStream> {
    let spec = spec.validate()?;
    if dim == 0 {
        return Err(Error::UnsupportedDim(0));
    }
    let rays = vec![half_angle_ray(spec.phi); dim];
    WienerStream::new(grid, rays, spec.noise_rate(), n_paths, seed)
}

/// Stored rotated Wiener ensemble of `n_paths` paths in `dim` components.
pub fn sample_rotated_wiener(
    spec: &DiffusionSpec,
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<ComplexPathEnsemble> {
    let s = rotated_wiener_stream(spec, grid, dim, n_paths, seed)?;
    s.collect(spec.validate()?)
}

/// Ensemble-averaged realized covariation `[P^a, Q^b]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealizedQV {
    pub a: usize,
    pub b: usize,
    pub conjugate_second: bool,
    pub times: Vec<f64>,
    /// Path average of the cumulative sums, one value per grid time.
    pub series: Vec<Complex64>,
    pub total: Complex64,
    /// Standard errors of the real and imaginary parts of `total`.
    pub total_se: Complex64,
}

fn check_index(i: usize, dim: usize) -> Result<()> {
    if i >= dim {
        return Err(Error::IndexOutOfRange { index: i, dim });
    }
    Ok(())
}

fn pair_factor(rays: &[Complex64], a: usize, b: usize, conj: bool) -> Complex64 {
    let rb = if conj { rays[b].conj() } else { rays[b] };
    rays[a] * rb
}

/// Realized quadratic covariation averaged over the paths of `src`.
pub fn realized_qv<S: PathSource + ?Sized>(
    src: &S,
    a: usize,
    b: usize,
    conjugate_second: bool,
) -> Result<RealizedQV> {
    let d = src.dim();
    check_index(a, d)?;
    check_index(b, d)?;
    let n = src.grid().n_steps;
    let per = src.buffer_len();
    let (cum, totals) = chunked_reduce(
        src.n_paths(),
        || (vec![0.0; n + 1], Moments::default()),
        |(cum, m), k| {
            let mut buf = vec![0.0; per];
            src.fill_increments(k, &mut buf);
            let mut acc = 0.0;
            for s in 0..n {
                acc += buf[s * d + a] * buf[s * d + b];
                cum[s + 1] += acc;
            }
            m.push(acc);
        },
        |(c, m), (c2, m2)| {
            for (x, y) in c.iter_mut().zip(c2) {
                *x += y;
            }
            m.merge(m2);
        },
    );
    let f = pair_factor(src.rays(), a, b, conjugate_second);
    let inv = 1.0 / src.n_paths() as f64;
    let series: Vec<Complex64> = cum.iter().map(|&c| f * (c * inv)).collect();
    let se = totals.std_error();
    Ok(RealizedQV {
        a,
        b,
        conjugate_second,
        times: src.grid().times(),
        total: *series.last().expect("non-empty series"),
        series,
        total_se: Complex64::new(f.re.abs() * se, f.im.abs() * se),
    })
}

/// Pathwise realized covariation of path `k`, formed from the complex increments.
pub fn path_qv(
    ens: &ComplexPathEnsemble,
    k: usize,
    a: usize,
    b: usize,
    conjugate_second: bool,
) -> Result<Complex64> {
    check_index(a, ens.dim)?;
    check_index(b, ens.dim)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for s in 0..ens.grid.n_steps {
        let q = ens.increment(k, s, b);
        acc += ens.increment(k, s, a) * if conjugate_second { q.conj() } else { q };
    }
    Ok(acc)
}

/// Monte-Carlo moment with standard errors of its real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub order: u32,
    pub value: Complex64,
    pub se: Complex64,
}

/// Estimates `E[prod_i (M^{a_i}_t)^{c_i}]` for a multiset given as `(component, count)`.
pub fn empirical_moment<S: PathSource + ?Sized>(
    src: &S,
    components: &[(usize, u32)],
    t: f64,
) -> Result<MomentEstimate> {
    let order: u32 = components.iter().map(|c| c.1).sum();
    if order > 8 {
        return Err(Error::OrderTooHigh(order));
    }
    let d = src.dim();
    for &(a, _) in components {
        check_index(a, d)?;
    }
    let step = src.grid().index_of(t)?;
    let per = src.buffer_len();
    let rays = src.rays().to_vec();
    let (mr, mi) = chunked_reduce(
        src.n_paths(),
        || (Moments::default(), Moments::default()),
        |(mr, mi), k| {
            let mut buf = vec![0.0; per];
            src.fill_increments(k, &mut buf);
            let mut prod = Complex64::new(1.0, 0.0);
            for &(a, c) in components {
                let w: f64 = (0..step).map(|s| buf[s * d + a]).sum();
                prod *= (rays[a] * w).powu(c);
            }
            mr.push(prod.re);
            mi.push(prod.im);
        },
        |(a, b), (c, e)| {
            a.merge(c);
            b.merge(e);
        },
    );
    Ok(MomentEstimate {
        order,
        value: Complex64::new(mr.mean(), mi.mean()),
        se: Complex64::new(mr.std_error(), mi.std_error()),
    })
}

/// Outcome of one Lévy-characterization test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevyTest {
    pub name: &'static str,
    pub component: usize,
    pub statistic: f64,
    pub p_value: f64,
    /// Significance after Bonferroni correction across components.
    pub level: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevyReport {
    pub significance: f64,
    pub tests: Vec<LevyTest>,
    pub passed: bool,
}

impl LevyReport {
    /// Whether every test of the given kind passed.
    pub fn kind_passed(&self, name: &str) -> bool {
        self.tests.iter().filter(|t| t.name == name).all(|t| t.passed)
    }
}

pub const LEVY_MEAN: &str = "increment_mean";
pub const LEVY_CORRELATION: &str = "disjoint_increment_correlation";
pub const LEVY_STATIONARITY: &str = "stationarity";
pub const LEVY_QV_DETERMINISM: &str = "qv_determinism";

const BLOCKS: usize = 4;

#[derive(Default, Clone)]
struct LevyAcc {
    terminal: Moments,
    lag_num: f64,
    lag_den: f64,
    lag_pairs: usize,
    block_sq: [f64; BLOCKS],
    block_n: [usize; BLOCKS],
    qv_fine: Moments,
    qv_coarse: Moments,
}

impl LevyAcc {
    fn merge(&mut self, o: LevyAcc) {
        self.terminal.merge(o.terminal);
        self.lag_num += o.lag_num;
        self.lag_den += o.lag_den;
        self.lag_pairs += o.lag_pairs;
        for b in 0..BLOCKS {
            self.block_sq[b] += o.block_sq[b];
            self.block_n[b] += o.block_n[b];
        }
        self.qv_fine.merge(o.qv_fine);
        self.qv_coarse.merge(o.qv_coarse);
    }
}

/// Runs the four Lévy-characterization tests on each component's ray coordinate.
///
/// (i) terminal mean z-test; (ii) lag-one increment correlation; (iii)
/// equality of the increment variance across four time blocks; (iv) the
/// cross-path variance of the realized QV must halve when `dt` is refined
/// by a factor of two.
pub fn levy_diagnostics<S: PathSource + ?Sized>(src: &S, significance: f64) -> Result<LevyReport> {
    if src.n_paths() < 1000 {
        return Err(Error::EnsembleTooSmall {
            got: src.n_paths(),
            need: 1000,
        });
    }
    let n = src.grid().n_steps;
    if n < 2 * BLOCKS {
        return Err(Error::InvalidGrid(format!(
            "Lévy diagnostics need at least {} steps",
            2 * BLOCKS
        )));
    }
    let d = src.dim();
    let per = src.buffer_len();
    let level = significance / d as f64;
    let accs = chunked_reduce(
        src.n_paths(),
        || vec![LevyAcc::default(); d],
        |accs, k| {
            let mut buf = vec![0.0; per];
            src.fill_increments(k, &mut buf);
            for (a, acc) in accs.iter_mut().enumerate() {
                let x = |s: usize| buf[s * d + a];
                let mut sum = 0.0;
                let mut qf = 0.0;
                let mut qc = 0.0;
                for s in 0..n {
                    let v = x(s);
                    sum += v;
                    qf += v * v;
                    let blk = s * BLOCKS / n;
                    acc.block_sq[blk] += v * v;
                    acc.block_n[blk] += 1;
                    if s + 1 < n {
                        acc.lag_num += v * x(s + 1);
                        acc.lag_pairs += 1;
                    }
                    acc.lag_den += v * v;
                    if s % 2 == 1 {
                        let c = x(s - 1) + v;
                        qc += c * c;
                    }
                }
                acc.terminal.push(sum);
                acc.qv_fine.push(qf);
                acc.qv_coarse.push(qc);
            }
        },
        |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        },
    );

    let mut tests = Vec::with_capacity(4 * d);
    for (a, acc) in accs.iter().enumerate() {
        let degenerate = acc.lag_den == 0.0;
        let push = |tests: &mut Vec<LevyTest>, name, statistic: f64, p: f64| {
            let passed = degenerate || p > level;
            tests.push(LevyTest {
                name,
                component: a,
                statistic,
                p_value: if degenerate { 1.0 } else { p },
                level,
                passed,
            });
        };

        let se = acc.terminal.std_error();
        let z = if se > 0.0 { acc.terminal.mean() / se } else { 0.0 };
        push(&mut tests, LEVY_MEAN, z, stats::normal_two_sided_p(z));

        let r = if degenerate { 0.0 } else { acc.lag_num / acc.lag_den };
        let zr = r * (acc.lag_pairs as f64).sqrt();
        push(&mut tests, LEVY_CORRELATION, r, stats::normal_two_sided_p(zr));

        // Block variances; under the null each estimate has relative variance 2/n_b.
        let total_sq: f64 = acc.block_sq.iter().sum();
        let total_n: usize = acc.block_n.iter().sum();
        let pooled = total_sq / total_n as f64;
        let mut q = 0.0;
        for b in 0..BLOCKS {
            let nb = acc.block_n[b] as f64;
            let vb = acc.block_sq[b] / nb;
            if pooled > 0.0 {
                q += (vb - pooled).powi(2) / (2.0 * pooled * pooled / nb);
            }
        }
        push(&mut tests, LEVY_STATIONARITY, q, stats::chi2_sf(BLOCKS - 1, q));

        // Halving dt halves the cross-path variance of the realized QV for a
        // Wiener process; a QV that does not concentrate fails here.
        let vf = acc.qv_fine.variance();
        let vc = acc.qv_coarse.variance();
        let m = acc.qv_fine.n as f64;
        let zq = if vf > 0.0 && vc > 0.0 {
            ((vc / vf).ln() - std::f64::consts::LN_2) / (4.0 / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        push(&mut tests, LEVY_QV_DETERMINISM, vf / vc.max(f64::MIN_POSITIVE), stats::normal_two_sided_p(zq));
    }
    let passed = tests.iter().all(|t| t.passed);
    Ok(LevyReport {
        significance,
        tests,
        passed,
    })
}

/// Two-sample KS comparison of the ray increments of component `a` in two sources.
pub fn increment_distribution_ks<S: PathSource + ?Sized, T: PathSource + ?Sized>(
    x: &S,
    y: &T,
    a: usize,
) -> Result<(f64, f64)> {
    check_index(a, x.dim())?;
    check_index(a, y.dim())?;
    let collect = |src: &dyn Fn(usize, &mut [f64]), n: usize, per: usize, d: usize| {
        let mut out = Vec::with_capacity(n * per / d);
        let mut buf = vec![0.0; per];
        for k in 0..n {
            src(k, &mut buf);
            out.extend(buf.iter().skip(a).step_by(d));
        }
        out
    };
    let xs = collect(&|k, b| x.fill_increments(k, b), x.n_paths(), x.buffer_len(), x.dim());
    let ys = collect(&|k, b| y.fill_increments(k, b), y.n_paths(), y.buffer_len(), y.dim());
    Ok(stats::ks_two_sample(&xs, &ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 100).unwrap()
    }

    #[test]
    fn pi_ray_is_exactly_imaginary() {
        let r = half_angle_ray(PI);
        assert_eq!(r, Complex64::new(0.0, 1.0));
        let e = sample_rotated_wiener(&DiffusionSpec::new(1.0, PI), grid(), 2, 10, SeedSpec::new(3))
            .unwrap();
        assert!(e.path(4).iter().all(|m| m.re == 0.0));
    }

    #[test]
    fn classical_limit_has_no_noise() {
        let e = sample_rotated_wiener(&DiffusionSpec::new(0.0, 0.7), grid(), 1, 5, SeedSpec::new(1))
            .unwrap();
        assert!(e.path(2).iter().all(|m| *m == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn cap_is_enforced() {
        let g = TimeGrid::new(0.0, 1.0, 1 << 20).unwrap();
        let err = sample_rotated_wiener(&DiffusionSpec::brownian(), g, 4, 16, SeedSpec::new(1));
        assert!(matches!(err, Err(Error::OverflowingEnsembleSize { .. })));
    }

    #[test]
    fn index_and_order_errors() {
        let e = sample_rotated_wiener(&DiffusionSpec::brownian(), grid(), 2, 4, SeedSpec::new(1))
            .unwrap();
        assert_eq!(
            realized_qv(&e, 2, 0, false).unwrap_err(),
            Error::IndexOutOfRange { index: 2, dim: 2 }
        );
        assert_eq!(
            empirical_moment(&e, &[(0, 9)], 1.0).unwrap_err(),
            Error::OrderTooHigh(9)
        );
        assert!(matches!(
            levy_diagnostics(&e, 1e-3),
            Err(Error::EnsembleTooSmall { got: 4, need: 1000 })
        ));
        assert_eq!(check_no_jumps(0.5), Err(Error::JumpsUnsupported(0.5)));
    }

    #[test]
    fn stream_and_stored_agree() {
        let spec = DiffusionSpec::new(1.3, 0.4);
        let s = rotated_wiener_stream(&spec, grid(), 3, 7, SeedSpec::new(9)).unwrap();
        let e = s.collect(spec).unwrap();
        let a = realized_qv(&s, 1, 1, true).unwrap();
        let b = realized_qv(&e, 1, 1, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reversal_is_an_involution() {
        let e = sample_rotated_wiener(&DiffusionSpec::quantum(), grid(), 2, 3, SeedSpec::new(2))
            .unwrap();
        let rr = e.reversed().reversed();
        assert_eq!(rr.path(1), e.path(1));
    }
}
