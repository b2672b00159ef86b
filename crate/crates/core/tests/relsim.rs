use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C;
use stomech::geom2::ChartedManifold;
use stomech::noise::PathSource;
use stomech::relsim::*;
use stomech::stats::chi2_sf;
use stomech::{DiffusionSpec, Error, SeedSpec, TimeGrid};

fn proper_time(phi: f64) -> RelativisticSpec {
    gauge_fix(&DiffusionSpec::new(1.0, phi), 1.0, Gauge::ProperTime, 1.0).unwrap()
}

#[test]
fn gauge_conventions() {
    let d = DiffusionSpec::quantum();
    let s = gauge_fix(&d, 4.0, Gauge::ProperTime, 1.0).unwrap();
    assert_eq!((s.epsilon, s.affine), (0.5, "proper time"));
    assert_eq!(gauge_fix(&d, 1.0, Gauge::ProperTime, 1.0).unwrap().epsilon, 1.0);
    assert_eq!(gauge_fix(&d, 0.0, Gauge::Unit, 1.0).unwrap().epsilon, 1.0);
    assert_eq!(gauge_fix(&d, 0.0, Gauge::Energy { energy: 4.0 }, 1.0).unwrap().epsilon, 0.25);
    let tachyon = gauge_fix(&d, -1.0, Gauge::ProperLength, 1.0).unwrap();
    assert_eq!((tachyon.epsilon, tachyon.affine), (1.0, "proper length"));
    assert_eq!(gauge_fix(&d, -4.0, Gauge::ProperLength, 2.0).unwrap().epsilon, 0.25);
    for (m2, g) in [
        (1.0, Gauge::Unit),
        (0.0, Gauge::ProperTime),
        (-1.0, Gauge::ProperTime),
        (1.0, Gauge::ProperLength),
        (0.0, Gauge::Energy { energy: -1.0 }),
    ] {
        assert!(matches!(gauge_fix(&d, m2, g, 1.0), Err(Error::IncompatibleGauge { .. })), "{m2} {g:?}");
    }
}

#[test]
fn flat_structure_relation_quantum() {
    let spec = proper_time(PI / 2.0);
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let ens = sample_relativistic_noise(&spec, grid, 3, 50_000, SeedSpec::new(31)).unwrap();
    // diag (-i, i, i, i) hbar lambda
    for a in 0..4 {
        let q = ens.qv(a, a).unwrap();
        let want = if a == 0 { C::new(0.0, -1.0) } else { C::new(0.0, 1.0) };
        assert!((ens.expected_qv(a, a) - want).norm() < 1e-15);
        assert!(q.total.re.abs() < 1e-12);
        assert!((q.total.im - want.im).abs() < 3.0 * q.total_se.im, "{a}: {:?}", q.total);
        for b in 0..a {
            let off = ens.qv(a, b).unwrap();
            assert!(off.total.norm() < 3.0 * off.total_se.norm().max(1e-3), "{a}{b}: {:?}", off.total);
        }
    }
}

#[test]
fn time_component_is_imaginary_for_brownian_phase() {
    let spec = proper_time(0.0);
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let ens = sample_relativistic_noise(&spec, grid, 2, 100, SeedSpec::new(1)).unwrap();
    let rays = ens.noise.rays();
    assert_eq!(rays[0], C::new(0.0, 1.0));
    assert_eq!(rays[1], C::new(1.0, 0.0));
    let q = ens.qv(0, 0).unwrap();
    assert!(q.total.im == 0.0 && q.total.re < 0.0);
}

#[test]
fn reparameterization_keeps_qv_per_proper_time() {
    let base = proper_time(PI / 3.0);
    let a = 2.5;
    let scaled = RelativisticSpec {
        epsilon: base.epsilon / a,
        ..base
    };
    let g1 = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let g2 = TimeGrid::new(0.0, a, 50).unwrap();
    let e1 = sample_relativistic_noise(&base, g1, 1, 2000, SeedSpec::new(8)).unwrap();
    let e2 = sample_relativistic_noise(&scaled, g2, 1, 2000, SeedSpec::new(8)).unwrap();
    for c in 0..2 {
        let (q1, q2) = (e1.qv(c, c).unwrap().total, e2.qv(c, c).unwrap().total);
        assert!((q1 - q2).norm() < 1e-12 * q1.norm());
    }
}

#[test]
fn causality_matches_chi_square_tail() {
    let spec = proper_time(PI / 2.0);
    let d = 3;
    let s = spec.real_noise_rate();
    let crossover = d as f64 * s;
    // 10 points log-spaced over [crossover / 10, 10 crossover]
    let taus: Vec<f64> = (0..10).map(|i| crossover * 10f64.powf(-1.0 + 2.0 * i as f64 / 9.0)).collect();
    let rep = causality_stats(&spec, d, &taus, 100_000, SeedSpec::new(15)).unwrap();
    assert!((rep.crossover - 1.5).abs() < 1e-15);
    assert!(rep.monotone);
    for p in &rep.points {
        // oracle computed here: dX_i / sqrt(s dtau) standard normal
        let oracle = chi2_sf(d, p.delta_tau / s);
        assert!((p.p_exact - oracle).abs() < 1e-15);
        assert!(p.z().abs() < 2.0, "{p:?}");
    }
    let at_cross = causality_stats(&spec, d, &[crossover], 1000, SeedSpec::new(1)).unwrap();
    assert!((at_cross.points[0].p_exact - 0.391_625_2).abs() < 1e-6);
    let far = causality_stats(&spec, d, &[10.0 * crossover], 100_000, SeedSpec::new(2)).unwrap();
    assert!(far.points[0].p_exact < 1e-3 && far.points[0].p_mc < 1e-3);
    let tiny = causality_stats(&spec, d, &[1e-12], 1000, SeedSpec::new(3)).unwrap();
    assert!(tiny.points[0].p_mc == 1.0);
    let cold = causality_stats(&proper_time(PI), d, &taus, 1000, SeedSpec::new(4)).unwrap();
    assert!(cold.points.iter().all(|p| p.p_mc == 0.0 && p.p_exact == 0.0));
    let photon = gauge_fix(&DiffusionSpec::quantum(), 0.0, Gauge::Unit, 1.0).unwrap();
    assert_eq!(causality_stats(&photon, d, &taus, 10, SeedSpec::new(1)).unwrap_err(), Error::NonPositiveMassSq(0.0));
}

fn zero(_: &[f64], _: f64, out: &mut [f64]) {
    out.fill(0.0);
}

#[test]
fn sphere_chart_qv_follows_inverse_metric() {
    let man = ChartedManifold::sphere(1.0);
    let spec = proper_time(0.0);
    let grid = TimeGrid::new(0.0, 0.1, 1000).unwrap();
    let opts = ManifoldOptions {
        record_stride: 100,
        exit_threshold: 0.01,
        qv_region: Some(Arc::new(|x: &[f64]| x[0] >= 0.3 * PI && x[0] <= 0.7 * PI)),
    };
    let ens = manifold_step_simulate(&man, &zero, &spec, &grid, 20_000, &[PI / 2.0, 0.0], SeedSpec::new(13), &opts).unwrap();
    assert!(ens.counted_steps > 0);
    for mu in 0..2 {
        assert!((ens.qv_ratio(mu) - 1.0).abs() < 0.03, "{mu}: {}", ens.qv_ratio(mu));
    }
    assert!(ens.qv_correlation(0, 1).abs() < 0.01);
    // theta drifts towards the equator: E dtheta = (1/2) cot(theta) s dlambda vanishes at pi/2
    let th: Vec<f64> = ens.positions.last().unwrap().iter().step_by(2).copied().collect();
    let mean = th.iter().sum::<f64>() / th.len() as f64;
    assert!((mean - PI / 2.0).abs() < 0.01);
}

#[test]
fn flat_chart_reduces_to_flat_stepper() {
    let man = ChartedManifold::euclidean(2);
    let spec = proper_time(0.0);
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let drift = |_: &[f64], _: f64, out: &mut [f64]| out.copy_from_slice(&[0.5, -1.0]);
    let n = 20_000;
    let ens = manifold_step_simulate(&man, &drift, &spec, &grid, n, &[0.0, 0.0], SeedSpec::new(4), &ManifoldOptions::default()).unwrap();
    let last = ens.positions.last().unwrap();
    for (i, want) in [0.5, -1.0].iter().enumerate() {
        let xs: Vec<f64> = last.iter().skip(i).step_by(2).copied().collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - want).abs() < 3.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.03);
    }
    assert_eq!(ens.absorbed_fraction, 0.0);
}

#[test]
fn chart_exit_is_reported() {
    let man = ChartedManifold::sphere(1.0);
    let spec = proper_time(0.0);
    let grid = TimeGrid::new(0.0, 2.0, 200).unwrap();
    let r = manifold_step_simulate(&man, &zero, &spec, &grid, 500, &[0.2, 0.0], SeedSpec::new(1), &ManifoldOptions::default());
    assert!(matches!(r, Err(Error::ChartExit { .. })), "{r:?}");
    let r = manifold_step_simulate(&man, &zero, &spec, &grid, 5, &[-0.2, 0.0], SeedSpec::new(1), &ManifoldOptions::default());
    assert!(matches!(r, Err(Error::ChartExit { .. })));
}

#[test]
fn onshell_residuals() {
    let m2 = 2.0;
    let kv = [1.0, 0.5, -0.3];
    let omega = (kv.iter().map(|k| k * k).sum::<f64>() + m2).sqrt();
    let k = [omega, kv[0], kv[1], kv[2]];
    let x = [0.3, -1.0, 2.0, 0.7];
    assert!(onshell_check(&plane_wave(&k), &x, m2, 1.0, 1e-3).abs() < 1e-9);
    let off = [1.7, 0.2, 0.0, 0.0];
    let want = -1.7f64.powi(2) + 0.04 + m2;
    assert!((onshell_check(&plane_wave(&off), &x, m2, 1.0, 1e-3) - want).abs() < 1e-9);
    let null = [2.0, 0.0, 2.0, 0.0];
    assert!(onshell_check(&plane_wave(&null), &x, 0.0, 1.0, 1e-3).abs() < 1e-9);
}
