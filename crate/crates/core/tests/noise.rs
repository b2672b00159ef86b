use std::f64::consts::PI;

use num_complex::Complex64 as C;
use proptest::prelude::*;
use stomech::noise::*;
use stomech::{DiffusionSpec, Error, SeedSpec, TimeGrid};

fn unit_grid(n: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, n).unwrap()
}

fn increments<S: PathSource>(src: &S) -> Vec<f64> {
    let per = src.buffer_len();
    let mut out = vec![0.0; per * src.n_paths()];
    for k in 0..src.n_paths() {
        src.fill_increments(k, &mut out[k * per..(k + 1) * per]);
    }
    out
}

/// Terminal values of component 0 for every path.
fn terminal(ens: &ComplexPathEnsemble) -> Vec<C> {
    (0..ens.n_paths).map(|k| ens.value(k, ens.grid.n_steps, 0)).collect()
}

fn var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn projection_variances_at_three_phases() {
    let n = 20_000;
    for (phi, vr, vi, cov) in [(0.0, 1.0, 0.0, 0.0), (PI / 2.0, 0.5, 0.5, 0.5), (PI, 0.0, 1.0, 0.0)] {
        let ens = sample_rotated_wiener(&DiffusionSpec::new(1.0, phi), unit_grid(20), 1, n, SeedSpec::new(3)).unwrap();
        let z = terminal(&ens);
        let re: Vec<f64> = z.iter().map(|v| v.re).collect();
        let im: Vec<f64> = z.iter().map(|v| v.im).collect();
        // s.e. of a sample variance of a Gaussian is sigma^2 sqrt(2/n)
        let tol = |v: f64| 4.0 * v.max(1e-300) * (2.0 / n as f64).sqrt();
        assert!((var(&re) - vr).abs() <= tol(vr), "phi {phi}: {}", var(&re));
        assert!((var(&im) - vi).abs() <= tol(vi), "phi {phi}: {}", var(&im));
        let c = re.iter().zip(&im).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        assert!((c - cov).abs() <= tol(cov.max(vr)) + 1e-15, "phi {phi}: {c}");
    }
    // the real projection vanishes identically at phi = pi
    let ens = sample_rotated_wiener(&DiffusionSpec::new(1.0, PI), unit_grid(20), 2, 50, SeedSpec::new(1)).unwrap();
    assert!((0..50).all(|k| ens.path(k).iter().all(|v| v.re == 0.0)));
}

#[test]
fn realized_qv_examples() {
    let spec = DiffusionSpec::quantum();
    let src = rotated_wiener_stream(&spec, unit_grid(200), 2, 20_000, SeedSpec::new(5)).unwrap();
    let diag = realized_qv(&src, 0, 0, false).unwrap();
    assert!(diag.total.re.abs() < 1e-12);
    assert!((diag.total.im - 1.0).abs() < 4.0 * diag.total_se.im);
    let off = realized_qv(&src, 0, 1, false).unwrap();
    assert!(off.total.norm() < 4.0 * off.total_se.norm());
    let conj = realized_qv(&src, 1, 1, true).unwrap();
    assert!((conj.total.re - 1.0).abs() < 4.0 * conj.total_se.re && conj.total.im.abs() < 1e-12);
    assert_eq!(realized_qv(&src, 2, 0, false).unwrap_err(), Error::IndexOutOfRange { index: 2, dim: 2 });
}

#[test]
fn realized_qv_is_symmetric_and_additive() {
    let spec = DiffusionSpec::new(1.3, 0.8);
    let src = rotated_wiener_stream(&spec, unit_grid(50), 3, 500, SeedSpec::new(2)).unwrap();
    let ab = realized_qv(&src, 0, 2, false).unwrap();
    let ba = realized_qv(&src, 2, 0, false).unwrap();
    assert_eq!(ab.series, ba.series);
    // cumulative series: [0, t2] = [0, t1] + [t1, t2]
    let (s1, s2) = (ab.series[20], ab.series[50]);
    let tail = s2 - s1;
    assert!((s1 + tail - ab.total).norm() < 1e-15);
    assert_eq!(ab.series[0], C::new(0.0, 0.0));
}

#[test]
fn rotated_qv_is_phase_times_real_qv() {
    let phi = 2.1;
    let spec = DiffusionSpec::new(1.0, phi);
    let ens = sample_rotated_wiener(&spec, unit_grid(64), 1, 20, SeedSpec::new(7)).unwrap();
    for k in 0..20 {
        let real: f64 = (0..64).map(|s| ens.ray_increment(k, s, 0).powi(2)).sum();
        let q = path_qv(&ens, k, 0, 0, false).unwrap();
        assert!((q - C::from_polar(real, phi)).norm() < 1e-14 * real.max(1.0));
    }
}

#[test]
fn increments_lie_on_the_ray() {
    for phi in [0.0, 0.3, PI / 2.0, 2.5, PI, -1.0] {
        let spec = DiffusionSpec::new(1.0, phi);
        let ens = sample_rotated_wiener(&spec, unit_grid(30), 2, 40, SeedSpec::new(4)).unwrap();
        let ray = ens.ray(0);
        assert!((ray - spec.ray()).norm() < 1e-15);
        for k in 0..40 {
            for s in 0..30 {
                for a in 0..2 {
                    // stored as a real ray coordinate; the complex value is rebuilt from it
                    let w = ens.ray_increment(k, s, a);
                    let z = ens.increment(k, s, a);
                    assert_eq!(z, ens.ray(a) * w, "phi {phi}");
                    assert!((ray.conj() * z).im.abs() <= 4.0 * f64::EPSILON * z.norm());
                }
            }
            assert!(ens.path(k)[..2].iter().all(|v| *v == C::new(0.0, 0.0)));
        }
    }
}

#[test]
fn moment_examples() {
    let src = rotated_wiener_stream(&DiffusionSpec::brownian(), unit_grid(10), 2, 100_000, SeedSpec::new(9)).unwrap();
    let m4 = empirical_moment(&src, &[(0, 4)], 1.0).unwrap();
    assert!((m4.value.re - 3.0).abs() < 3.0 * m4.se.re, "{m4:?}");
    for k in [1, 3, 5] {
        let m = empirical_moment(&src, &[(0, k)], 1.0).unwrap();
        assert!(m.value.re.abs() < 3.0 * m.se.re, "k = {k}: {m:?}");
    }
    let cross = empirical_moment(&src, &[(0, 1), (1, 1)], 1.0).unwrap();
    assert!(cross.value.re.abs() < 3.0 * cross.se.re);
    assert_eq!(empirical_moment(&src, &[(0, 5), (1, 4)], 1.0).unwrap_err(), Error::OrderTooHigh(9));
    // quantum case: E[M^2] = i t
    let q = rotated_wiener_stream(&DiffusionSpec::quantum(), unit_grid(10), 1, 50_000, SeedSpec::new(9)).unwrap();
    let m2 = empirical_moment(&q, &[(0, 2)], 0.5).unwrap();
    assert!(m2.value.re.abs() < 1e-12 && (m2.value.im - 0.5).abs() < 3.0 * m2.se.im);
}

#[test]
fn levy_tests_accept_wiener_and_catch_defects() {
    let spec = DiffusionSpec::quantum();
    let grid = unit_grid(64);
    let n = 4000;
    let src = rotated_wiener_stream(&spec, grid, 2, n, SeedSpec::new(17)).unwrap();
    let rep = levy_diagnostics(&src, 1e-3).unwrap();
    assert!(rep.passed, "{rep:?}");
    assert_eq!(rep.tests.len(), 8);

    let inc = increments(&src);
    let dt = grid.dt();
    let rays = src.rays().to_vec();
    let drifted: Vec<f64> = inc.iter().map(|v| v + 0.5 * dt).collect();
    let ens = ComplexPathEnsemble::from_ray_increments(spec, grid, rays.clone(), n, SeedSpec::new(17), drifted).unwrap();
    let rep = levy_diagnostics(&ens, 1e-3).unwrap();
    assert!(!rep.kind_passed(LEVY_MEAN));

    // AR(1) with coefficient 0.3 at unchanged marginal variance
    let mut ar = inc.clone();
    let (per, d) = (grid.n_steps * 2, 2);
    let c = (1.0f64 - 0.09).sqrt();
    for k in 0..n {
        for s in 1..grid.n_steps {
            for a in 0..d {
                let i = k * per + s * d + a;
                ar[i] = 0.3 * ar[i - d] + c * inc[i];
            }
        }
    }
    let ens = ComplexPathEnsemble::from_ray_increments(spec, grid, rays, n, SeedSpec::new(17), ar).unwrap();
    let rep = levy_diagnostics(&ens, 1e-3).unwrap();
    assert!(!rep.kind_passed(LEVY_CORRELATION));

    let small = rotated_wiener_stream(&spec, grid, 1, 999, SeedSpec::new(1)).unwrap();
    assert_eq!(levy_diagnostics(&small, 1e-3).unwrap_err(), Error::EnsembleTooSmall { got: 999, need: 1000 });
}

#[test]
fn reversed_increments_have_the_same_law() {
    let spec = DiffusionSpec::new(1.0, 1.0);
    let ens = sample_rotated_wiener(&spec, unit_grid(50), 1, 1000, SeedSpec::new(23)).unwrap();
    let rev = ens.reversed();
    let (_, p) = increment_distribution_ks(&ens, &rev, 0).unwrap();
    assert!(p > 1e-3, "p = {p}");
    // B_T = -M_T
    for k in 0..10 {
        assert!((rev.value(k, 50, 0) + ens.value(k, 50, 0)).norm() < 1e-12);
    }
}

#[test]
fn generation_errors() {
    assert_eq!(TimeGrid::new(0.0, 1.0, 0).unwrap_err(), Error::ZeroStepGrid);
    assert!(matches!(check_no_jumps(0.5), Err(Error::JumpsUnsupported(_))));
    assert!(check_no_jumps(0.0).is_ok());
    let big = sample_rotated_wiener(&DiffusionSpec::quantum(), unit_grid(1000), 10, 10_000, SeedSpec::new(1));
    assert!(matches!(big, Err(Error::OverflowingEnsembleSize { .. })));
    assert_eq!(
        rotated_wiener_stream(&DiffusionSpec::quantum(), unit_grid(10), 1, 0, SeedSpec::new(1)).unwrap_err(),
        Error::EmptyEnsemble
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn degenerate_structure_holds_bitwise(phi in -PI..PI, mag in 0.0f64..3.0, seed in any::<u64>()) {
        let spec = DiffusionSpec::new(mag, phi);
        let ens = sample_rotated_wiener(&spec, unit_grid(8), 2, 4, SeedSpec::new(seed)).unwrap();
        let ray = ens.ray(1);
        for k in 0..4 {
            for s in 0..8 {
                prop_assert_eq!(ens.increment(k, s, 1), ray * ens.ray_increment(k, s, 1));
            }
        }
    }

    #[test]
    fn paths_do_not_depend_on_ensemble_size(seed in any::<u64>(), n in 1usize..40) {
        let spec = DiffusionSpec::quantum();
        let a = sample_rotated_wiener(&spec, unit_grid(5), 1, n, SeedSpec::new(seed)).unwrap();
        let b = sample_rotated_wiener(&spec, unit_grid(5), 1, 40, SeedSpec::new(seed)).unwrap();
        for k in 0..n {
            prop_assert_eq!(a.path(k), b.path(k));
        }
    }

    #[test]
    fn reversal_is_an_involution(seed in any::<u64>(), phi in -PI..PI) {
        let ens = sample_rotated_wiener(&DiffusionSpec::new(1.0, phi), unit_grid(6), 2, 3, SeedSpec::new(seed)).unwrap();
        let back = ens.reversed().reversed();
        for k in 0..3 {
            prop_assert_eq!(ens.path(k), back.path(k));
        }
    }

    #[test]
    fn qv_series_is_symmetric(seed in any::<u64>(), phi in -PI..PI) {
        let src = rotated_wiener_stream(&DiffusionSpec::new(1.0, phi), unit_grid(6), 3, 5, SeedSpec::new(seed)).unwrap();
        let ab = realized_qv(&src, 0, 1, false).unwrap();
        let ba = realized_qv(&src, 1, 0, false).unwrap();
        prop_assert_eq!(ab.series, ba.series);
    }
}
