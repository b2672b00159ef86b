//! One test per acceptance criterion, at the pinned seeds and sizes of
//! `stomech::verify`. Oracle values the criteria depend on are recomputed
//! here by independent routes.

use std::f64::consts::PI;

use statrs::function::erf::erfc;
use stomech::verify::{run_criterion, CriterionResult, VerifyOptions};

fn run(id: u32) -> CriterionResult {
    let r = run_criterion(id, &VerifyOptions::default()).unwrap();
    for c in &r.checks {
        println!("{:>2} {:<60} {:>14.6e} (limit {:e}, {:?})", r.id, c.name, c.value, c.limit, c.bound);
    }
    r
}

fn assert_passed(r: &CriterionResult) {
    assert!(r.error.is_none(), "criterion {} errored: {:?}", r.id, r.error);
    assert!(r.passed, "criterion {} failed: {:#?}", r.id, r.failures());
}

fn value(r: &CriterionResult, name: &str) -> f64 {
    r.value(name).unwrap_or_else(|| panic!("criterion {} has no check `{name}`", r.id))
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn criterion_01_structure_relation() {
    let r = run(1);
    assert_passed(&r);
    assert!(value(&r, "max diagonal |m QV/(hbar t) - alpha|") < 0.01);
    assert!(value(&r, "max off-diagonal |m QV/(hbar t)|") < 0.01);
    assert!(value(&r, "max conjugate diagonal |m QV/(hbar t) - |alpha||") < 0.01);
}

#[test]
fn criterion_02_projection_variances() {
    let r = run(2);
    assert_passed(&r);
    // M = e^{i phi/2} W with Var W = |alpha| hbar t / m, so the projections carry
    // cos^2(phi/2), sin^2(phi/2) and cos(phi/2) sin(phi/2) of that variance.
    for phi in [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0, PI] {
        let (c, s) = ((phi / 2.0).cos(), (phi / 2.0).sin());
        for (what, want) in [("Var Re M", c * c), ("Var Im M", s * s), ("Cov", c * s)] {
            let got = value(&r, &format!("phi={phi:.4} {what} expected"));
            assert!((got - want).abs() < 1e-12, "{phi} {what}: {got} vs {want}");
            assert!(value(&r, &format!("phi={phi:.4} {what} |z|")) <= 3.0);
        }
    }
}

#[test]
fn criterion_03_isserlis() {
    let r = run(3);
    assert_passed(&r);
    assert!((value(&r, "kurtosis ratio") / 3.0 - 1.0).abs() < 0.03);
}

#[test]
fn criterion_04_ito_stratonovich() {
    let r = run(4);
    assert_passed(&r);
    assert!(value(&r, "linear integrand max residual") < 1e-12);
    for label in ["phi=0", "phi=pi/2"] {
        assert!(value(&r, &format!("{label} order forward")) >= 0.5);
        assert!(value(&r, &format!("{label} order backward")) >= 0.5);
    }
}

#[test]
fn criterion_05_heat_limit() {
    let r = run(5);
    assert_passed(&r);
    assert!(value(&r, "KS against heat kernel") < 0.015);
    assert!(value(&r, "L1 against heat kernel") < 0.02);
    // the kernel CDF used as oracle, against direct quadrature of the kernel
    let t: f64 = 0.5;
    let kernel = |x: f64| (-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt();
    for x in [-1.7, -0.3, 0.0, 0.4, 2.2] {
        let q = 0.5 + simpson(kernel, 0.0, x, 2000);
        assert!((q - stomech::stats::normal_cdf(x, 0.0, t.sqrt())).abs() < 1e-12, "{x}");
    }
}

#[test]
fn criterion_06_schrodinger_pde() {
    let r = run(6);
    assert_passed(&r);
    assert!(value(&r, "max relative sigma_x error") < 5e-3);
    assert!(value(&r, "relative norm drift per 1000 steps") < 1e-8);
}

#[test]
fn criterion_07_born_correspondence() {
    let r = run(7);
    assert_passed(&r);
    assert!(value(&r, "free packet max L1") < 0.05);
    assert!(value(&r, "harmonic ground max L1 over 5 periods") < 0.05);
    assert!(value(&r, "double slit max fringe offset (cells)") <= 1.0);
}

#[test]
fn criterion_08_two_sided() {
    let r = run(8);
    assert_passed(&r);
    assert!(value(&r, "forward L1 at midpoint") < 0.05);
    assert!(value(&r, "backward L1 at midpoint") < 0.05);
}

#[test]
fn criterion_09_uncertainty() {
    let r = run(9);
    assert_passed(&r);
    let product = value(&r, "minimal Gaussian product");
    assert!((product / 0.5 - 1.0).abs() < 0.01);
    // (|alpha| hbar / 2)(1 + cos phi) at |alpha| = hbar = 1, phi = pi/2
    assert!((value(&r, "bound") - 0.5).abs() < 1e-15);
}

#[test]
fn criterion_10_hamilton_jacobi() {
    let r = run(10);
    assert_passed(&r);
    let ratio = value(&r, "coarse L2") / value(&r, "fine L2");
    assert!(ratio >= 3.5, "{ratio}");
}

#[test]
fn criterion_11_second_order_geometry() {
    let r = run(11);
    assert_passed(&r);
    assert!(value(&r, "instances per identity") >= 100.0);
    let identities = r.checks.iter().filter(|c| !c.statistical && c.limit == 1e-10).count();
    assert_eq!(identities, 15);
}

#[test]
fn criterion_12_hat_velocity_covariance() {
    let r = run(12);
    assert_passed(&r);
    assert!(value(&r, "max |F~ - J F|") < 1e-10);
}

#[test]
fn criterion_13_manifold_structure_relation() {
    let r = run(13);
    assert_passed(&r);
    assert!(value(&r, "|QV ratio - 1| thetatheta") < 0.03);
    assert!(value(&r, "|QV ratio - 1| phiphi") < 0.03);
}

#[test]
fn criterion_14_relativistic_qv() {
    let r = run(14);
    assert_passed(&r);
    assert!(value(&r, "max |z| over components") <= 3.0);
}

#[test]
fn criterion_15_causality() {
    let r = run(15);
    assert_passed(&r);
    // P[chi^2_3 > x] = erfc(sqrt(x/2)) + sqrt(2x/pi) e^{-x/2}, x = c^2 dtau / s with s = 1/2
    let tail = |x: f64| erfc((x / 2.0).sqrt()) + (2.0 * x / PI).sqrt() * (-x / 2.0).exp();
    let exact: Vec<f64> = r.checks.iter().filter(|c| c.name.starts_with("p_exact dtau=")).map(|c| c.value).collect();
    assert_eq!(exact.len(), 10);
    for (i, got) in exact.iter().enumerate() {
        // ten log-spaced points over [crossover / 10, 10 crossover], crossover = 3/2
        let dtau = 1.5 * 10f64.powf(-1.0 + 2.0 * i as f64 / 9.0);
        let want = tail(2.0 * dtau);
        assert!((got - want).abs() < 1e-10 * want, "{dtau}: {got} vs {want}");
    }
    assert!((value(&r, "crossover") - 1.5).abs() < 1e-12);
    let far = value(&r, "exact probability at 10x crossover");
    assert!((far - tail(30.0)).abs() < 1e-9 && far < 1e-3);
    assert!(value(&r, "probability at 10x crossover") < 1e-3);
}

#[test]
fn criterion_16_time_reversal() {
    let r = run(16);
    assert_passed(&r);
    assert!(value(&r, "density difference of Psi and -Psi") < 1e-10);
}
