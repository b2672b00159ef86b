use std::f64::consts::PI;

use num_complex::Complex64 as C;
use stomech::pde::{
    analytic_reference, born_density, born_density_slice, density_moments, hamilton_jacobi_residual,
    solve_complex_diffusion, AnalyticFamily, Boundary, Direction, FamilyParams, SolveOptions,
};
use stomech::potential::PotentialSpec;
use stomech::{Axis, DiffusionSpec, Error, SpaceGrid, TimeGrid};

fn opts(boundary: Boundary, stride: usize) -> SolveOptions {
    SolveOptions { boundary, stride }
}

fn sample(grid: &SpaceGrid, f: impl Fn(&[f64]) -> C) -> Vec<C> {
    (0..grid.len()).map(|i| f(&grid.coords(i))).collect()
}

fn max_abs(v: &[C]) -> f64 {
    v.iter().fold(0.0, |a, z| a.max(z.norm()))
}

fn max_diff(a: &[C], b: &[C]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// Gaussian of variance `var` centred at 0, as a density.
fn gauss(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[test]
fn heat_limit_matches_gaussian_spreading() {
    // rho(t) Gaussian with variance sigma0^2 + t (hbar = m = |alpha| = 1)
    let grid = SpaceGrid::line(-10.0, 10.0, 512).unwrap();
    let times = TimeGrid::new(0.0, 0.5, 5000).unwrap();
    let var0 = 0.25;
    let psi0 = sample(&grid, |x| C::new(gauss(x[0], var0), 0.0));
    let spec = DiffusionSpec::brownian();
    let f = solve_complex_diffusion(
        &psi0,
        &spec,
        &PotentialSpec::zero(),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Dirichlet, 5000),
    )
    .unwrap();
    let last = f.values.last().unwrap();
    let exact = sample(&grid, |x| C::new(gauss(x[0], var0 + 0.5), 0.0));
    let rel = max_diff(last, &exact) / max_abs(&exact);
    assert!(rel < 1e-3, "relative error {rel}");
    // positivity is preserved for nonnegative data
    assert!(last.iter().all(|v| v.re > -1e-14 && v.im.abs() < 1e-14));
}

#[test]
fn plane_wave_rotates_at_free_frequency() {
    let n = 256;
    let length = 2.0 * PI;
    let grid = SpaceGrid::new(vec![Axis::new(0.0, length * (n - 1) as f64 / n as f64, n).unwrap()]).unwrap();
    let k = 3.0;
    let t_end = 1.0;
    let times = TimeGrid::new(0.0, t_end, 4000).unwrap();
    let psi0 = sample(&grid, |x| C::from_polar(1.0, k * x[0]));
    let spec = DiffusionSpec::quantum();
    let f = solve_complex_diffusion(
        &psi0,
        &spec,
        &PotentialSpec::zero(),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Periodic, 4000),
    )
    .unwrap();
    let last = f.values.last().unwrap();
    // discrete dispersion of the 3-point Laplacian and CN phase error are O(h^2 + dt^2)
    let omega = k * k / 2.0;
    let expected: Vec<C> = psi0.iter().map(|v| v * C::from_polar(1.0, -omega * t_end)).collect();
    for v in last {
        assert!((v.norm() - 1.0).abs() < 1e-10);
    }
    assert!(max_diff(last, &expected) < 2e-2);
    // the measured rotation rate converges to k^2/2
    let lag = stomech::params::wrap_angle((last[0] / psi0[0]).arg() + omega * t_end);
    assert!(lag.abs() < 5e-3 * omega * t_end, "phase lag {lag}");
}

#[test]
fn harmonic_ground_state_density_is_stationary() {
    // the mismatch between the continuum and discrete ground states scales as h^2
    let grid = SpaceGrid::line(-8.0, 8.0, 6401).unwrap();
    let period = 2.0 * PI;
    let times = TimeGrid::new(0.0, period, 10_000).unwrap();
    let spec = DiffusionSpec::quantum();
    // (1/pi)^{1/4} exp(-x^2/2): ground state for m = hbar = omega = 1
    let psi0 = sample(&grid, |x| C::new(PI.powf(-0.25) * (-0.5 * x[0] * x[0]).exp(), 0.0));
    let f = solve_complex_diffusion(
        &psi0,
        &spec,
        &PotentialSpec::harmonic(1.0, 1.0),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Dirichlet, 1000),
    )
    .unwrap();
    let rho0: Vec<f64> = psi0.iter().map(|v| v.norm_sqr()).collect();
    let worst = f
        .values
        .iter()
        .map(|s| s.iter().zip(&rho0).fold(0.0f64, |m, (v, r)| m.max((v.norm_sqr() - r).abs())))
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-6, "density drift {worst}");
}

#[test]
fn quantum_norm_is_conserved() {
    for boundary in [Boundary::Dirichlet, Boundary::Periodic] {
        let grid = SpaceGrid::line(-20.0, 20.0, 1024).unwrap();
        let times = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let psi0 = sample(&grid, |x| C::from_polar((-x[0] * x[0] / 2.0).exp(), 2.0 * x[0]));
        let pot = PotentialSpec::harmonic(1.0, 0.7)
            .with_vector(|x, _, a| a[0] = 0.3 * x[0].sin(), |x, _, j| j[0] = 0.3 * x[0].cos());
        let spec = DiffusionSpec::quantum().with_charge(1.5);
        let f = solve_complex_diffusion(&psi0, &spec, &pot, &grid, &times, Direction::Forward, opts(boundary, 10))
            .unwrap();
        let n0 = f.l2_norm_sq(0);
        for (_, n) in f.norm_trace() {
            assert!((n - n0).abs() / n0 < 1e-8, "{boundary:?} drift {}", (n - n0) / n0);
        }
    }
}

#[test]
fn quantum_norm_is_conserved_in_2d() {
    let ax = Axis::new(-8.0, 8.0, 96).unwrap();
    let grid = SpaceGrid::plane(ax, ax).unwrap();
    let times = TimeGrid::new(0.0, 0.5, 1000).unwrap();
    let psi0 = sample(&grid, |x| C::from_polar((-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp(), x[1]));
    let pot = PotentialSpec::linear_vector(0.4);
    let spec = DiffusionSpec::quantum().with_charge(1.0);
    let f = solve_complex_diffusion(
        &psi0,
        &spec,
        &pot,
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Dirichlet, 100),
    )
    .unwrap();
    let n0 = f.l2_norm_sq(0);
    for (_, n) in f.norm_trace() {
        assert!((n - n0).abs() / n0 < 1e-8);
    }
}

#[test]
fn constant_potential_shift_is_a_global_factor() {
    let grid = SpaceGrid::line(-10.0, 10.0, 400).unwrap();
    let times = TimeGrid::new(0.0, 0.5, 500).unwrap();
    let psi0 = sample(&grid, |x| C::from_polar((-x[0] * x[0]).exp(), 0.5 * x[0]));
    for spec in [DiffusionSpec::quantum(), DiffusionSpec::brownian(), DiffusionSpec::new(0.8, 1.0)] {
        let base = PotentialSpec::harmonic(1.0, 0.5);
        let shifted = PotentialSpec::zero().with_scalar(|x, _| 0.125 * x[0] * x[0] + 2.5);
        let run = |p: &PotentialSpec| {
            solve_complex_diffusion(&psi0, &spec, p, &grid, &times, Direction::Forward, opts(Boundary::Dirichlet, 100))
                .unwrap()
        };
        let (a, b) = (run(&base), run(&shifted));
        let (ra, rb) = (born_density(&a).unwrap(), born_density(&b).unwrap());
        for (x, y) in ra.iter().flatten().zip(rb.iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
        // the factor itself: exp(c t / (alpha hbar)), i.e. exp(-i c t / hbar) at alpha = i
        let factor = (2.5 * 0.5 / spec.alpha()).exp();
        let scaled: Vec<C> = a.values.last().unwrap().iter().map(|v| v * factor).collect();
        let e = max_diff(&scaled, b.values.last().unwrap()) / max_abs(&scaled);
        assert!(e < 1e-10, "phi {}: {e}", spec.phi);
    }
}

#[test]
fn free_packet_width_follows_spreading_law() {
    let sigma0: f64 = 1.0;
    let t_nat = 2.0 * sigma0 * sigma0;
    let grid = SpaceGrid::line(-25.0, 25.0, 1024).unwrap();
    let times = TimeGrid::new(0.0, t_nat, 2000).unwrap();
    let spec = DiffusionSpec::quantum();
    let psi0 = sample(&grid, |x| C::from_polar((gauss(x[0], sigma0 * sigma0)).sqrt(), 1.0 * x[0]));
    let f = solve_complex_diffusion(
        &psi0,
        &spec,
        &PotentialSpec::zero(),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Dirichlet, 100),
    )
    .unwrap();
    let rho = born_density(&f).unwrap();
    for (k, r) in rho.iter().enumerate() {
        let t = f.snapshot_times[k];
        let (_, var) = density_moments(r, &grid, 0);
        let exact = sigma0 * (1.0 + (t / (2.0 * sigma0 * sigma0)).powi(2)).sqrt();
        assert!((var.sqrt() - exact).abs() / exact < 5e-3, "t={t}");
        assert!((grid.integrate(r) - 1.0).abs() < 1e-10);
    }
}

fn solved_vs_family(
    family: &str,
    params: &FamilyParams,
    spec: DiffusionSpec,
    grid: &SpaceGrid,
    times: &TimeGrid,
    direction: Direction,
) -> f64 {
    let fam = AnalyticFamily::from_name(family, params, grid.dim()).unwrap();
    let exact = analytic_reference(&fam, params, &spec, grid, times, direction, times.n_steps).unwrap();
    let start = match direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    };
    let solved = solve_complex_diffusion(
        &exact.values[start],
        &spec,
        &exact.potential,
        grid,
        times,
        direction,
        opts(Boundary::Dirichlet, times.n_steps),
    )
    .unwrap();
    let end = 1 - start;
    max_diff(&solved.values[end], &exact.values[end]) / max_abs(&exact.values[end])
}

#[test]
fn solver_reproduces_analytic_families() {
    let grid = SpaceGrid::line(-12.0, 12.0, 1200).unwrap();
    let times = TimeGrid::new(0.0, 1.0, 2000).unwrap();
    let packet = FamilyParams {
        center: vec![0.5],
        sigma0: 0.8,
        wavenumber: vec![1.0],
        ..FamilyParams::default()
    };
    for phi in [0.0, PI / 4.0, PI / 2.0, 0.9 * PI / 2.0] {
        for dir in [Direction::Forward, Direction::Backward] {
            let e = solved_vs_family("free_gaussian_packet", &packet, DiffusionSpec::new(1.0, phi), &grid, &times, dir);
            assert!(e < 2e-3, "packet phi={phi} {dir:?}: {e}");
        }
    }
    let coherent = FamilyParams {
        center: vec![2.0],
        omega: 1.0,
        ..FamilyParams::default()
    };
    let e = solved_vs_family(
        "harmonic_coherent",
        &coherent,
        DiffusionSpec::quantum(),
        &grid,
        &times,
        Direction::Forward,
    );
    assert!(e < 2e-3, "coherent {e}");
    let ground = FamilyParams {
        omega: 1.3,
        ..FamilyParams::default()
    };
    let e = solved_vs_family("harmonic_ground", &ground, DiffusionSpec::new(1.0, 1.0), &grid, &times, Direction::Forward);
    assert!(e < 2e-3, "ground {e}");
    let slit = FamilyParams {
        sigma0: 0.5,
        separation: 4.0,
        ..FamilyParams::default()
    };
    let e = solved_vs_family(
        "double_slit_superposition",
        &slit,
        DiffusionSpec::quantum(),
        &grid,
        &times,
        Direction::Forward,
    );
    assert!(e < 5e-3, "double slit {e}");
}

#[test]
fn adi_reproduces_2d_packet() {
    let ax = Axis::new(-10.0, 10.0, 200).unwrap();
    let grid = SpaceGrid::plane(ax, ax).unwrap();
    let times = TimeGrid::new(0.0, 1.0, 400).unwrap();
    let params = FamilyParams {
        center: vec![0.5, -0.5],
        sigma0: 1.0,
        wavenumber: vec![1.0, -0.5],
        ..FamilyParams::default()
    };
    for phi in [PI / 2.0, PI / 4.0] {
        let e = solved_vs_family(
            "free_gaussian_packet",
            &params,
            DiffusionSpec::new(1.0, phi),
            &grid,
            &times,
            Direction::Forward,
        );
        assert!(e < 5e-3, "phi {phi}: {e}");
    }
}

#[test]
fn uniform_vector_potential_is_pure_gauge() {
    // Psi_A = exp(-q A x / (alpha hbar)) Psi_0 for forward, q -> -q for backward
    let grid = SpaceGrid::line(-12.0, 12.0, 1200).unwrap();
    let times = TimeGrid::new(0.0, 0.5, 500).unwrap();
    let (q, a) = (1.0, 0.7);
    for dir in [Direction::Forward, Direction::Backward] {
        for spec in [DiffusionSpec::quantum().with_charge(q), DiffusionSpec::new(1.0, 1.0).with_charge(q)] {
            let qs = if dir == Direction::Forward { q } else { -q };
            let psi0 = sample(&grid, |x| C::new((-x[0] * x[0]).exp(), 0.0));
            let lam = -qs * a / (spec.alpha() * spec.hbar);
            let psi0_a: Vec<C> = psi0.iter().enumerate().map(|(i, v)| v * (lam * grid.coords(i)[0]).exp()).collect();
            let run = |p: PotentialSpec, init: &[C]| {
                solve_complex_diffusion(init, &spec, &p, &grid, &times, dir, opts(Boundary::Dirichlet, 500)).unwrap()
            };
            let free = run(PotentialSpec::zero(), &psi0);
            let gauged = run(PotentialSpec::uniform_vector(vec![a]), &psi0_a);
            let s = if dir == Direction::Forward { 1 } else { 0 };
            let expect: Vec<C> = free.values[s]
                .iter()
                .enumerate()
                .map(|(i, v)| v * (lam * grid.coords(i)[0]).exp())
                .collect();
            let e = max_diff(&gauged.values[s], &expect) / max_abs(&expect);
            assert!(e < 2e-3, "{dir:?} phi={} err {e}", spec.phi);
        }
    }
}

#[test]
fn time_dependent_potential_is_rebuilt_each_step() {
    let grid = SpaceGrid::line(-6.0, 6.0, 200).unwrap();
    let times = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let psi0 = sample(&grid, |x| C::new((-x[0] * x[0]).exp(), 0.0));
    let spec = DiffusionSpec::quantum();
    let pot = PotentialSpec::zero().with_scalar(|_, t| t).time_dependent(true);
    let f = solve_complex_diffusion(&psi0, &spec, &pot, &grid, &times, Direction::Forward, opts(Boundary::Dirichlet, 200))
        .unwrap();
    let free = solve_complex_diffusion(
        &psi0,
        &spec,
        &PotentialSpec::zero(),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Dirichlet, 200),
    )
    .unwrap();
    // int_0^1 t dt = 1/2, phase exp(-i/2); midpoint rule is exact for linear t
    let factor = C::from_polar(1.0, -0.5);
    let expect: Vec<C> = free.values[1].iter().map(|v| v * factor).collect();
    assert!(max_diff(&f.values[1], &expect) < 1e-12);
}

#[test]
fn invalid_parameters_are_rejected() {
    let grid = SpaceGrid::line(-1.0, 1.0, 16).unwrap();
    let times = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let psi0 = vec![C::new(1.0, 0.0); 16];
    let zero = PotentialSpec::zero();
    let run = |spec: DiffusionSpec, o: SolveOptions| {
        solve_complex_diffusion(&psi0, &spec, &zero, &grid, &times, Direction::Forward, o)
    };
    assert!(matches!(run(DiffusionSpec::new(1.0, PI), SolveOptions::default()), Err(Error::UnstableParameters(_))));
    assert!(matches!(run(DiffusionSpec::new(1.0, 2.0), SolveOptions::default()), Err(Error::UnstableParameters(_))));
    assert!(matches!(run(DiffusionSpec::new(0.0, 0.0), SolveOptions::default()), Err(Error::UnstableParameters(_))));
    assert!(matches!(run(DiffusionSpec::quantum(), opts(Boundary::Dirichlet, 3)), Err(Error::InvalidGrid(_))));
    let fam = AnalyticFamily::from_name("square_well", &FamilyParams::default(), 1);
    assert_eq!(fam, Err(Error::UnknownFamily("square_well".into())));
}

#[test]
fn families_satisfy_their_equation() {
    // Hamilton-Jacobi residual of sampled closed forms: small and shrinking with h, dt.
    let cases: Vec<(&str, FamilyParams, DiffusionSpec)> = vec![
        (
            "heat_kernel",
            FamilyParams {
                tau0: 0.5,
                ..FamilyParams::default()
            },
            DiffusionSpec::brownian(),
        ),
        (
            "free_gaussian_packet",
            FamilyParams {
                wavenumber: vec![1.0],
                ..FamilyParams::default()
            },
            DiffusionSpec::new(1.0, 1.1),
        ),
        ("harmonic_ground", FamilyParams::default(), DiffusionSpec::new(1.0, 0.7)),
        (
            "harmonic_coherent",
            FamilyParams {
                center: vec![1.0],
                ..FamilyParams::default()
            },
            DiffusionSpec::quantum(),
        ),
        ("double_slit_superposition", FamilyParams::default(), DiffusionSpec::quantum()),
    ];
    for (name, p, spec) in cases {
        for dir in [Direction::Forward, Direction::Backward] {
            let fam = AnalyticFamily::from_name(name, &p, 1).unwrap();
            let l2 = |n: usize, steps: usize| {
                let grid = SpaceGrid::line(-6.0, 6.0, n).unwrap();
                let times = TimeGrid::new(0.0, 0.2, steps).unwrap();
                let f = analytic_reference(&fam, &p, &spec, &grid, &times, dir, 1).unwrap();
                hamilton_jacobi_residual(&f).unwrap().l2
            };
            let (coarse, fine) = (l2(241, 20), l2(481, 40));
            assert!(fine < 1e-2, "{name} {dir:?}: {fine}");
            // Gaussian families with ln Psi quadratic in x and linear in t are differenced exactly
            assert!(coarse / fine > 3.0 || fine < 1e-8, "{name} {dir:?}: {coarse} -> {fine}");
        }
    }
}

#[test]
fn plane_wave_residual_vanishes() {
    let n = 128;
    let grid = SpaceGrid::new(vec![Axis::new(0.0, 2.0 * PI * (n - 1) as f64 / n as f64, n).unwrap()]).unwrap();
    let times = TimeGrid::new(0.0, 0.1, 10).unwrap();
    let k = 2.0;
    let w = k * k / 2.0;
    let mut f = solve_complex_diffusion(
        &sample(&grid, |x| C::from_polar(1.0, k * x[0])),
        &DiffusionSpec::quantum(),
        &PotentialSpec::zero(),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Periodic, 1),
    )
    .unwrap();
    // replace by the exact field: S linear in x and t, residual is pure round-off
    for (s, t) in f.values.iter_mut().zip(f.snapshot_times.clone()) {
        for (i, v) in s.iter_mut().enumerate() {
            *v = C::from_polar(1.0, k * grid.coords(i)[0] - w * t);
        }
    }
    let r = hamilton_jacobi_residual(&f).unwrap();
    // k^2 of the exact dispersion, discretised: (2 sin(kh/2)/h)^2, so an O(h^2) mismatch only
    assert!(r.max_abs < 2e-2, "{}", r.max_abs);
}

#[test]
fn residual_detects_perturbation() {
    // wide enough that the Dirichlet wall lies in the masked region
    let grid = SpaceGrid::line(-14.0, 14.0, 2241).unwrap();
    let times = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let spec = DiffusionSpec::quantum();
    let p = FamilyParams::default();
    let fam = AnalyticFamily::from_name("free_gaussian_packet", &p, 1).unwrap();
    let psi0 = analytic_reference(&fam, &p, &spec, &grid, &times, Direction::Forward, 1000).unwrap();
    let f = solve_complex_diffusion(
        &psi0.values[0],
        &spec,
        &PotentialSpec::zero(),
        &grid,
        &times,
        Direction::Forward,
        opts(Boundary::Dirichlet, 10),
    )
    .unwrap();
    let base = hamilton_jacobi_residual(&f).unwrap().l2;
    let mut g = f.clone();
    for s in &mut g.values {
        for (i, v) in s.iter_mut().enumerate() {
            *v *= 1.0 + 0.01 * grid.coords(i)[0].sin();
        }
    }
    let pert = hamilton_jacobi_residual(&g).unwrap().l2;
    assert!(pert > 10.0 * base, "{base} -> {pert}");
}

#[test]
fn sign_flipped_field_has_identical_density() {
    let grid = SpaceGrid::line(-5.0, 5.0, 101).unwrap();
    let v = sample(&grid, |x| C::from_polar((-x[0] * x[0]).exp(), x[0]));
    let w: Vec<C> = v.iter().map(|z| -z).collect();
    for spec in [DiffusionSpec::quantum(), DiffusionSpec::brownian()] {
        let a = born_density_slice(&v, &grid, &spec).unwrap();
        let b = born_density_slice(&w, &grid, &spec).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn heat_kernel_density_is_the_kernel() {
    let grid = SpaceGrid::line(-15.0, 15.0, 1501).unwrap();
    let times = TimeGrid::new(0.0, 1.0, 1).unwrap();
    let p = FamilyParams {
        tau0: 1.0,
        ..FamilyParams::default()
    };
    let fam = AnalyticFamily::from_name("heat_kernel", &p, 1).unwrap();
    let f = analytic_reference(&fam, &p, &DiffusionSpec::brownian(), &grid, &times, Direction::Forward, 1).unwrap();
    // value at x = 0, t = 1: (2 pi)^{-1/2}
    assert!((f.values[0][750].re - (2.0 * PI).powf(-0.5)).abs() < 1e-14);
    let rho = born_density(&f).unwrap();
    for (r, v) in rho[1].iter().zip(&f.values[1]) {
        assert!((r - v.re).abs() < 1e-10);
    }
}
