use std::path::Path;

use num_complex::Complex64 as C;
use serde_json::{json, Value};
use stomech::correspond::{
    compare_density, density_estimate, drift_diffusion_simulate, fokker_planck_drift, fringe_maxima, ks_against,
    project_density, DensityMethod, InitialCondition, SimulationOptions,
};
use stomech::noise::{levy_diagnostics, realized_qv, rotated_wiener_stream, PathSource};
use stomech::pde::{
    analytic_reference, born_density, solve_complex_diffusion, AnalyticFamily, Direction, SolveOptions, WaveField,
};
use stomech::potential::PotentialSpec;
use stomech::verify::{run_suite, Suite, VerifyOptions, VerifyReport};
use stomech::{SeedSpec, SpaceGrid, TimeGrid};

use crate::config::*;
use crate::output::{num, Meta, Outputs};
use crate::CliError;

fn grids(time: &TimeGrid, space: Option<&SpaceGrid>) -> Value {
    match space {
        Some(g) => json!({ "time": time, "space": g }),
        None => json!({ "time": time }),
    }
}

fn divides(name: &str, stride: usize, n_steps: usize) -> Result<(), CliError> {
    if stride == 0 || n_steps % stride != 0 {
        return Err(CliError::Config(format!("`{name}` = {stride} must divide {n_steps} steps")));
    }
    Ok(())
}

pub fn noise(cfg: &NoiseConfig, seed: u64, out: &Path) -> Result<Value, CliError> {
    let spec = cfg.spec.build()?;
    let time = time_grid(&cfg.time)?;
    let dim = positive("dim", cfg.dim)?;
    let n = positive("n_paths", cfg.n_paths)?;
    if !(cfg.significance > 0.0 && cfg.significance < 1.0) {
        return Err(CliError::Config("`significance` must lie in (0, 1)".into()));
    }
    let src = rotated_wiener_stream(&spec, time, dim, n, SeedSpec::new(seed)).map_err(CliError::config)?;
    let meta = Meta::new("noise", seed, &spec, grids(&time, None));
    let mut files = Outputs::create(out)?;

    let n_write = cfg.write_paths.unwrap_or(n).min(n);
    let rays = src.rays().to_vec();
    let per = src.buffer_len();
    let path_record = |k: usize| {
        let mut buf = vec![0.0; per];
        src.fill_increments(k, &mut buf);
        let mut w = vec![0.0; dim];
        let mut re = vec![0.0; dim];
        let mut im = vec![0.0; dim];
        for s in 0..time.n_steps {
            for a in 0..dim {
                w[a] += buf[s * dim + a];
                let z = rays[a] * w[a];
                re.push(z.re);
                im.push(z.im);
            }
        }
        json!({ "record": "path", "k": k, "re": re, "im": im })
    };
    files.ndjson("ensemble.ndjson", &meta, (0..n_write).map(path_record))?;

    let times = time.times();
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for a in 0..dim {
        for b in a..dim {
            for conj in [false, true] {
                let q = realized_qv(&src, a, b, conj)?;
                for (t, v) in times.iter().zip(&q.series) {
                    rows.push(vec![num(*t), a.to_string(), b.to_string(), conj.to_string(), num(v.re), num(v.im)]);
                }
                let ray_b = if conj { rays[b].conj() } else { rays[b] };
                let expected = if a == b { rays[a] * ray_b * spec.noise_rate() * (time.tf - time.t0) } else { C::new(0.0, 0.0) };
                totals.push(json!({
                    "a": a, "b": b, "conjugate": conj,
                    "total": [q.total.re, q.total.im],
                    "se": [q.total_se.re, q.total_se.im],
                    "expected": [expected.re, expected.im],
                }));
            }
        }
    }
    files.csv("realized_qv.csv", &meta, &["t", "a", "b", "conjugate", "re", "im"], rows.into_iter())?;

    let levy = match levy_diagnostics(&src, cfg.significance) {
        Ok(r) => json!({ "passed": r.passed, "report": r }),
        Err(e @ (stomech::Error::EnsembleTooSmall { .. } | stomech::Error::InvalidGrid(_))) => {
            json!({ "skipped": e.to_string() })
        }
        Err(e) => return Err(e.into()),
    };
    let body = json!({ "n_paths": n, "dim": dim, "layout": "step-major, (n_steps + 1) * dim values per path", "qv_totals": totals, "levy": levy });
    files.json("diagnostics.json", &meta, body)?;
    let summary = json!({ "levy_passed": levy.get("passed") });
    files.finish(&meta, summary.clone())?;
    Ok(summary)
}

fn initial_slice(
    fam: &AnalyticFamily,
    cfg_params: &stomech::pde::FamilyParams,
    spec: &stomech::DiffusionSpec,
    grid: &SpaceGrid,
    time: &TimeGrid,
    direction: Direction,
) -> Result<Vec<C>, CliError> {
    let f = analytic_reference(fam, cfg_params, spec, grid, time, direction, time.n_steps)?;
    let v = match direction {
        Direction::Forward => f.values.first(),
        Direction::Backward => f.values.last(),
    };
    Ok(v.expect("two snapshots").clone())
}

fn coord_cells(grid: &SpaceGrid, i: usize) -> Vec<String> {
    grid.coords(i).into_iter().map(num).collect()
}

fn coord_columns(grid: &SpaceGrid) -> Vec<&'static str> {
    ["x", "y"][..grid.dim()].to_vec()
}

fn wave_rows(f: &WaveField) -> impl Iterator<Item = Vec<String>> + '_ {
    f.values.iter().zip(&f.snapshot_times).flat_map(move |(v, t)| {
        v.iter().enumerate().map(move |(i, z)| {
            let mut r = vec![num(*t)];
            r.extend(coord_cells(&f.grid, i));
            r.push(num(z.re));
            r.push(num(z.im));
            r
        })
    })
}

pub fn solve(cfg: &SolveConfig, seed: u64, out: &Path) -> Result<Value, CliError> {
    let spec = cfg.spec.build()?;
    let time = time_grid(&cfg.time)?;
    let grid = space_grid(&cfg.grid)?;
    let fam = family(&cfg.family, &cfg.params, &spec, grid.dim())?;
    divides("stride", cfg.stride, time.n_steps)?;
    let potential = match cfg.potential {
        PotentialChoice::Family => fam.potential(&spec),
        PotentialChoice::Zero => PotentialSpec::zero(),
    };
    let psi0 = initial_slice(&fam, &cfg.params, &spec, &grid, &time, cfg.direction)?;
    let opts = SolveOptions {
        boundary: cfg.boundary,
        stride: cfg.stride,
    };
    let field = solve_complex_diffusion(&psi0, &spec, &potential, &grid, &time, cfg.direction, opts)?;

    let meta = Meta::new("solve", seed, &spec, grids(&time, Some(&grid)));
    let mut files = Outputs::create(out)?;
    let mut cols = vec!["t"];
    cols.extend(coord_columns(&grid));
    cols.extend(["re_psi", "im_psi"]);
    files.csv("wavefield.csv", &meta, &cols, wave_rows(&field))?;

    let trace = field.norm_trace();
    let n_ref = match cfg.direction {
        Direction::Forward => trace.first(),
        Direction::Backward => trace.last(),
    }
    .map(|p| p.1)
    .unwrap_or(1.0);
    let drift = trace.iter().fold(0.0f64, |m, (_, n)| m.max((n - n_ref).abs() / n_ref));
    let rows = trace.iter().map(|(t, n)| vec![num(*t), num(*n), num((n - n_ref) / n_ref)]);
    files.csv("norm_trace.csv", &meta, &["t", "norm_sq", "rel_drift"], rows)?;

    // distance to the closed form, when the solver ran with the family's potential
    let reference_error = if cfg.potential == PotentialChoice::Family {
        let r = analytic_reference(&fam, &cfg.params, &spec, &grid, &time, cfg.direction, cfg.stride)?;
        let mut worst = 0.0f64;
        for (a, b) in field.values.iter().zip(&r.values) {
            let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
            let norm: f64 = b.iter().map(|y| y.norm_sqr()).sum();
            if norm > 0.0 {
                worst = worst.max((diff / norm).sqrt());
            }
        }
        Some(worst)
    } else {
        None
    };
    let summary = json!({ "max_rel_norm_drift": drift, "max_rel_l2_error_vs_closed_form": reference_error });
    files.finish(&meta, summary.clone())?;
    Ok(summary)
}

/// CDF of a nodal 1d density by the cumulative trapezoid rule, linear in between.
fn nodal_cdf(grid: &SpaceGrid, rho: &[f64]) -> impl Fn(f64) -> f64 {
    let xs = grid.axes[0].points();
    let h = grid.axes[0].h();
    let mut cum = vec![0.0; rho.len()];
    for i in 1..rho.len() {
        cum[i] = cum[i - 1] + 0.5 * h * (rho[i - 1] + rho[i]);
    }
    let total = cum.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    move |x: f64| {
        if x <= xs[0] {
            return 0.0;
        }
        let last = xs.len() - 1;
        if x >= xs[last] {
            return 1.0;
        }
        let i = (((x - xs[0]) / h) as usize).min(last - 1);
        let f = (x - xs[i]) / h;
        (cum[i] + f * (cum[i + 1] - cum[i])) / total
    }
}

pub fn correspond(cfg: &CorrespondConfig, seed: u64, out: &Path) -> Result<Value, CliError> {
    let spec = cfg.spec.build()?;
    let time = time_grid(&cfg.time)?;
    let grid = space_grid(&cfg.grid)?;
    let cg = space_grid(&cfg.comparison)?;
    let fam = family(&cfg.family, &cfg.params, &spec, grid.dim())?;
    let n = positive("n_paths", cfg.n_paths)?;
    divides("record_stride", cfg.record_stride, time.n_steps)?;
    if cg.dim() != grid.dim() {
        return Err(CliError::Config("`comparison` grid must have the dimension of `grid`".into()));
    }
    let want_fringes = cfg.fringes.unwrap_or(matches!(fam, AnalyticFamily::DoubleSlit { .. }));
    if want_fringes && grid.dim() != 1 {
        return Err(CliError::Config("fringe tables need a 1d grid".into()));
    }

    let field = match cfg.source {
        FieldSource::Analytic => analytic_reference(&fam, &cfg.params, &spec, &grid, &time, Direction::Forward, 1)?,
        FieldSource::Solver => {
            let psi0 = initial_slice(&fam, &cfg.params, &spec, &grid, &time, Direction::Forward)?;
            let opts = SolveOptions {
                boundary: stomech::pde::Boundary::Dirichlet,
                stride: 1,
            };
            solve_complex_diffusion(&psi0, &spec, &fam.potential(&spec), &grid, &time, Direction::Forward, opts)?
        }
    };
    let drift = fokker_planck_drift(&field, &spec, Direction::Forward)?;
    let rho = born_density(&field)?;
    let init = InitialCondition::Density {
        grid: grid.clone(),
        values: rho[0].clone(),
    };
    let opts = SimulationOptions {
        direction: Direction::Forward,
        boundary: None,
        record_stride: cfg.record_stride,
    };
    let ens = drift_diffusion_simulate(&drift, &spec, &time, n, &init, SeedSpec::new(seed), opts)?;

    let meta = Meta::new("correspond", seed, &spec, json!({ "time": time, "space": grid, "comparison": cg }));
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last = None;
    for t in ens.record_times().into_iter().skip(1) {
        let snap = field.snapshot_index(t)?;
        let target = project_density(&rho[snap], &grid, &cg)?;
        let hist = density_estimate(&ens, t, DensityMethod::Histogram, &cg)?;
        let cmp = compare_density(&hist.values, &target, &cg, &cg)?;
        let ks_samples = if grid.dim() == 1 { Some(ks_against(&ens, t, 0, nodal_cdf(&grid, &rho[snap]))?) } else { None };
        for i in 0..cg.len() {
            let mut r = vec![num(t)];
            r.extend(coord_cells(&cg, i));
            r.push(num(hist.values[i]));
            r.push(num(target[i]));
            rows.push(r);
        }
        checkpoints.push(json!({ "t": t, "l1": cmp.l1, "ks_cells": cmp.ks, "ks_samples": ks_samples, "max_abs": cmp.max_abs }));
        last = Some((hist.values, target));
    }

    let mut files = Outputs::create(out)?;
    let mut cols = vec!["t"];
    cols.extend(coord_columns(&cg));
    cols.extend(["rho_mc", "rho_psi"]);
    files.csv("density_comparison.csv", &meta, &cols, rows.into_iter())?;

    let max_l1 = checkpoints.iter().filter_map(|c| c["l1"].as_f64()).fold(0.0f64, f64::max);
    let mut fringe = Value::Null;
    if want_fringes {
        let (hist, target) = last.as_ref().expect("at least one checkpoint");
        let m = fringe_maxima(target, hist, cfg.fringe_min_fraction)?;
        let xs = cg.axes[0].points();
        let rows = m.reference.iter().zip(&m.measured).enumerate().map(|(k, (r, q))| {
            vec![k.to_string(), num(xs[*r]), num(xs[*q]), r.abs_diff(*q).to_string()]
        });
        files.csv("fringe_maxima.csv", &meta, &["lobe", "x_reference", "x_measured", "offset_cells"], rows)?;
        fringe = json!({ "count": m.reference.len(), "max_offset_cells": m.max_offset });
    }
    let body = json!({
        "n_paths": n,
        "source": cfg.source,
        "drift": { "interpolation": ens.interpolation, "boundary": ens.boundary },
        "checkpoints": checkpoints,
        "max_l1": max_l1,
        "fringes": fringe,
    });
    files.json("metrics.json", &meta, body)?;
    let summary = json!({ "max_l1": max_l1, "fringes": fringe });
    files.finish(&meta, summary.clone())?;
    Ok(summary)
}

pub fn verify(suite: &str, seed: Option<u64>, out: Option<&Path>) -> Result<VerifyReport, CliError> {
    let suite = Suite::parse(suite).ok_or_else(|| {
        let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
        CliError::Config(format!("unknown suite `{suite}`; expected one of {} or all", names.join(", ")))
    })?;
    let (mut opts, warning) = VerifyOptions::from_env();
    let mut warnings: Vec<String> = warning.into_iter().collect();
    if let Some(s) = seed {
        if s != opts.master_seed {
            warnings.push(format!("master seed overridden to {s}; pinned acceptance seed is {}", opts.master_seed));
            opts.master_seed = s;
        }
    }
    log::info!("tolerance scale {} ({})", opts.tol_scale, stomech::verify::TOL_SCALE_VAR);
    for w in &warnings {
        log::warn!("{w}");
    }
    let report = run_suite(suite, &opts, warnings);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("verify_report.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(report)
}
