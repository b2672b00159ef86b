use std::f64::consts::PI;

use num_complex::Complex64 as C;
use proptest::prelude::*;
use stomech::noise::{sample_rotated_wiener, ComplexPathEnsemble};
use stomech::potential::PotentialSpec;
use stomech::stats::Moments;
use stomech::stochcalc::*;
use stomech::{DiffusionSpec, Error, SeedSpec, TimeGrid};

const ONE: C = C::new(1.0, 0.0);

fn ensemble(spec: &DiffusionSpec, n_steps: usize, dim: usize, n: usize, seed: u64) -> ComplexPathEnsemble {
    sample_rotated_wiener(spec, TimeGrid::new(0.0, 1.0, n_steps).unwrap(), dim, n, SeedSpec::new(seed)).unwrap()
}

fn last(v: Vec<C>) -> C {
    *v.last().unwrap()
}

#[test]
fn telescoping_holds_on_complex_paths() {
    let ens = ensemble(&DiffusionSpec::new(1.0, 1.1), 400, 1, 5, 3);
    let f = IntegrandSpec::identity(1);
    for k in 0..5 {
        let p = Path::from_ensemble(&ens, k);
        let x = p.values[400];
        let qv = last(qv_integral_const(&[ONE], &p, false).unwrap());
        let fw = last(ito_forward_integral(&f, &p).unwrap());
        let bw = last(ito_backward_integral(&f, &p).unwrap());
        let st = last(stratonovich_integral(&f, &p).unwrap());
        assert!((fw - 0.5 * (x * x - qv)).norm() < 1e-12);
        assert!((bw - 0.5 * (x * x + qv)).norm() < 1e-12);
        assert!((st - 0.5 * x * x).norm() < 1e-12);
        assert!((fw + bw - 2.0 * st).norm() < 1e-12);
        assert!((conversion_residuals(&f, &p).unwrap().0).norm() < 1e-12);
        let one = IntegrandSpec::constant(vec![ONE]);
        let c = last(ito_forward_integral(&one, &p).unwrap());
        assert!((c - x).norm() < 1e-12);
        assert_eq!(c, last(stratonovich_integral(&one, &p).unwrap()));
        assert_eq!(c, last(ito_backward_integral(&one, &p).unwrap()));
    }
}

#[test]
fn forward_integrals_are_martingales() {
    let ens = ensemble(&DiffusionSpec::brownian(), 50, 1, 20_000, 11);
    let bounded: Vec<IntegrandSpec> = vec![
        IntegrandSpec::new(1, |x, _, o| o[0] = x[0].sin()),
        IntegrandSpec::new(1, |x, _, o| o[0] = x[0].tanh() + 0.5),
        IntegrandSpec::new(1, |x, t, o| o[0] = (-x[0] * x[0]).exp() * (1.0 + t)),
        IntegrandSpec::identity(1),
    ];
    for (i, f) in bounded.iter().enumerate() {
        let mut m = Moments::default();
        for k in 0..ens.n_paths {
            m.push(last(ito_forward_integral(f, &Path::from_ensemble(&ens, k)).unwrap()).re);
        }
        assert!(m.mean().abs() < 3.0 * m.std_error(), "integrand {i}: {} +- {}", m.mean(), m.std_error());
    }
}

#[test]
fn qv_integral_examples() {
    // a single path on a fine grid: pathwise QV has relative spread sqrt(2 / n)
    let n = 100_000;
    let q = ensemble(&DiffusionSpec::quantum(), n, 1, 1, 4);
    let p = Path::from_ensemble(&q, 0);
    let plain = last(qv_integral_const(&[ONE], &p, false).unwrap());
    assert!(plain.re.abs() < 1e-12 && (plain.im - 1.0).abs() < 0.02, "{plain}");
    let conj = last(qv_integral_const(&[ONE], &p, true).unwrap());
    assert!(conj.im.abs() < 1e-12 && (conj.re - 1.0).abs() < 0.02, "{conj}");
    let big = ensemble(&DiffusionSpec::new(2.5, 0.4), n, 1, 1, 5);
    let conj = last(qv_integral_const(&[ONE], &Path::from_ensemble(&big, 0), true).unwrap());
    assert!((conj.re / 2.5 - 1.0).abs() < 0.02);

    // smooth path: QV ~ dt
    let smooth = |n: usize| {
        let g = TimeGrid::new(0.0, 1.0, n).unwrap();
        let xs: Vec<f64> = g.times().iter().map(|t| (3.0 * t).sin()).collect();
        last(qv_integral_const(&[ONE], &Path::from_real(g, 1, &xs).unwrap(), false).unwrap()).re
    };
    let (a, b) = (smooth(1000), smooth(2000));
    assert!(a < 1e-2 && (a / b - 2.0).abs() < 0.01, "{a} {b}");

    assert!(matches!(qv_integral_const(&[ONE, ONE], &p, false), Err(Error::GridMismatch(_))));
}

#[test]
fn conversion_examples() {
    let spec = DiffusionSpec::new(1.0, PI / 2.0);
    let ens = ensemble(&spec, 200, 2, 200, 8);
    let lin = conversion_check(&IntegrandSpec::identity(2), &ens).unwrap();
    assert!(lin.max_forward < 1e-12 && lin.max_backward < 1e-12);
    let cst = conversion_check(&IntegrandSpec::constant(vec![ONE, C::new(0.0, -2.0)]), &ens).unwrap();
    assert!(cst.max_forward < 1e-12);
    let study =
        conversion_order_study(&IntegrandSpec::square(1), &spec, TimeGrid::new(0.0, 1.0, 1024).unwrap(), &[8, 4, 2, 1], 500, SeedSpec::new(2))
            .unwrap();
    assert!(study.order_forward >= 0.5 && study.order_backward >= 0.5, "{study:?}");
    let rms: Vec<f64> = study.reports.iter().map(|r| r.rms_forward).collect();
    assert!(rms.windows(2).all(|w| w[1] < w[0]), "{rms:?}");
    let no_der = IntegrandSpec::new(2, |x, _, o| o.copy_from_slice(x));
    assert_eq!(conversion_check(&no_der, &ens).unwrap_err(), Error::MissingDerivative);
}

#[test]
fn free_particle_discrete_action() {
    let (d, n_steps, t) = (2, 100, 1.0);
    for (mag, phi, mass) in [(1.0, 0.0, 1.0), (1.0, PI / 3.0, 2.0)] {
        let spec = DiffusionSpec::new(mag, phi).with_mass(mass);
        let ens = ensemble(&spec, n_steps, d, 20_000, 21);
        let set = RealPathSet::from_real_part(&ens, &vec![0.0; d]).unwrap().with_difference_velocities();
        let lag = LagrangianSpec::flat(LagrangianKind::Stratonovich, PotentialSpec::zero());
        let a = stratonovich_action(&set, &lag, &spec).unwrap();
        // E[(m/2) sum dX^2 / dt] with E dX^2 = s dt per component
        let s = mag * (1.0 + phi.cos()) / (2.0 * mass);
        let dt = t / n_steps as f64;
        let want = 0.5 * mass * d as f64 * s * t / dt;
        assert!((a.mean - want).abs() < 3.0 * a.se, "{} vs {want} +- {}", a.mean, a.se);
        let itof = ito_action_finite(&set, &LagrangianSpec::flat(LagrangianKind::ItoForward, PotentialSpec::zero()), &spec).unwrap();
        assert!((itof.mean - a.mean).abs() < 1e-9 * a.mean);
    }
}

#[test]
fn deterministic_actions() {
    let grid = TimeGrid::new(0.0, 2.0, 200).unwrap();
    let v = 0.7;
    let xs: Vec<f64> = grid.times().iter().map(|t| v * t).collect();
    let set = RealPathSet::new(grid, 1, 1, xs).unwrap().with_difference_velocities();
    let spec = DiffusionSpec::new(0.0, 0.0).with_mass(1.5).with_charge(2.0);
    let lag = LagrangianSpec::flat(LagrangianKind::Stratonovich, PotentialSpec::uniform_vector(vec![0.3]));
    let a = stratonovich_action(&set, &lag, &spec).unwrap();
    let want = 2.0 * 0.3 * (v * 2.0) + 0.5 * 1.5 * v * v * 2.0;
    assert!((a.mean - want).abs() < 1e-12, "{} vs {want}", a.mean);
    assert_eq!(a.se, 0.0);
    let bad = LagrangianSpec::flat(LagrangianKind::ItoForward, PotentialSpec::zero());
    assert!(matches!(stratonovich_action(&set, &bad, &spec), Err(Error::UnsupportedRegime(_))));
    assert!(matches!(ito_action_finite(&set, &lag, &spec), Err(Error::UnsupportedRegime(_))));
}

#[test]
fn v2_term_of_linear_vector_potential() {
    let (c, q, n_steps) = (0.8, 1.5, 100);
    let spec = DiffusionSpec::brownian().with_charge(q);
    let ens = ensemble(&spec, n_steps, 1, 20_000, 33);
    let set = RealPathSet::from_real_part(&ens, &[0.0]).unwrap().with_difference_velocities();
    let with_a = ito_action_finite(&set, &LagrangianSpec::flat(LagrangianKind::ItoForward, PotentialSpec::linear_vector(c)), &spec).unwrap();
    let kinetic = ito_action_finite(&set, &LagrangianSpec::flat(LagrangianKind::ItoForward, PotentialSpec::zero()), &spec).unwrap();
    // naive forward evaluation of q A dX, recomputed here
    let mut naive = Moments::default();
    let dt = 1.0 / n_steps as f64;
    for k in 0..set.n_paths {
        let x = set.path(k);
        naive.push((0..n_steps).map(|s| q * c * x[s] * (x[s + 1] - x[s])).sum());
    }
    let extra = with_a.mean - kinetic.mean - naive.mean();
    let want = 0.5 * q * c * 1.0;
    assert!((extra - want).abs() < 3.0 * (2.0 * dt).sqrt() * 0.5 * q * c / (set.n_paths as f64).sqrt() + 1e-9, "{extra}");

    let back = ito_action_finite(&set, &LagrangianSpec::flat(LagrangianKind::ItoBackward, PotentialSpec::linear_vector(c)), &spec).unwrap();
    let kin_back = ito_action_finite(&set, &LagrangianSpec::flat(LagrangianKind::ItoBackward, PotentialSpec::zero()), &spec).unwrap();
    let mut naive_b = Moments::default();
    for k in 0..set.n_paths {
        let x = set.path(k);
        naive_b.push((0..n_steps).map(|s| q * c * x[s + 1] * (x[s + 1] - x[s])).sum());
    }
    let extra_b = back.mean - kin_back.mean - naive_b.mean();
    assert!((extra_b + want).abs() < 0.01, "{extra_b}");
}

#[test]
fn linear_term_equivalence_within_standard_error() {
    let spec = DiffusionSpec::new(1.0, 0.5);
    let ens = ensemble(&spec, 200, 2, 5000, 41);
    let set = RealPathSet::from_real_part(&ens, &[0.2, -0.4]).unwrap();
    let curl = PotentialSpec::zero().with_vector(
        |x, _, o| {
            o[0] = (x[1]).sin() + x[0] * x[0];
            o[1] = x[0] * x[1];
        },
        |x, _, o| {
            o[0] = 2.0 * x[0];
            o[1] = x[1].cos();
            o[2] = x[1];
            o[3] = x[0];
        },
    );
    for pot in [PotentialSpec::linear_vector(1.3), curl] {
        let r = linear_term_equivalence(&set, &pot).unwrap();
        assert!(r.diff_mean.abs() < 3.0 * r.diff_se.max(1e-12), "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn discrete_exactness(xs in prop::collection::vec(-3.0f64..3.0, 2..60), a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
        let g = TimeGrid::new(0.0, 1.0, xs.len() - 1).unwrap();
        let p = Path::from_real(g, 1, &xs).unwrap();
        let f = IntegrandSpec::new(1, move |x, _, o| o[0] = a + b * x[0] + c * x[0] * x[0]);
        let fw = last(ito_forward_integral(&f, &p).unwrap());
        let bw = last(ito_backward_integral(&f, &p).unwrap());
        let st = last(stratonovich_integral(&f, &p).unwrap());
        prop_assert!((fw + bw - 2.0 * st).norm() < 1e-10);
        let lin = IntegrandSpec::new(1, move |x, _, o| o[0] = a + b * x[0]);
        let qv = last(qv_integral_const(&[C::new(b, 0.0)], &p, false).unwrap());
        let d = last(ito_backward_integral(&lin, &p).unwrap()) - last(ito_forward_integral(&lin, &p).unwrap());
        prop_assert!((d - qv).norm() < 1e-10);
    }

    #[test]
    fn coarsening_keeps_endpoints(xs in prop::collection::vec(-3.0f64..3.0, 1..8), factor in 1usize..5) {
        let n = 4 * factor;
        let vals: Vec<f64> = (0..=n).map(|i| xs[i % xs.len()] + i as f64).collect();
        let p = Path::from_real(TimeGrid::new(0.0, 1.0, n).unwrap(), 1, &vals).unwrap();
        let c = p.coarsen(factor).unwrap();
        prop_assert_eq!(c.grid.n_steps, 4);
        prop_assert_eq!(c.values[0], p.values[0]);
        prop_assert_eq!(c.values[4], p.values[n]);
    }
}
