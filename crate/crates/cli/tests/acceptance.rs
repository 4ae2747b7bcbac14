//! Acceptance criteria, one PASS/FAIL line each on stderr.
//!
//! Lines are written straight to the stderr handle so they show up without
//! `--nocapture`. Set `SMBFORGE_LONG_SUITE=1` to run the optional cascade
//! check (criterion 8); it takes hours.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use smbforge::config::{load_config, Mode, RunConfig};
use smbforge::run::{run, RunOptions};
use smbforge_core::batch::run_batch_with_state;
use smbforge_core::column::{holdup, integrate_column, SolverSettings};
use smbforge_core::indicators::{batch_performance, concentration_integral, css_distance, run_to_css, CssSettings};
use smbforge_core::model::{fresh_state, validate_system, ColumnGeometry, ComponentSet, SmaBinding, SystemConfig, TransportParams};
use smbforge_core::network::{advance_switch, build_scheme, initialize_smb, ProcessScheme, SMBState, SwitchRecord};
use smbforge_core::profile::InletProfile;
use smbforge_optim::{geweke, mcmc_sample, pareto_front, Evaluation, OptimizationProblem, Parameter, SamplerSettings};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {verdict}: {name} ({detail})");
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bundled(name: &str) -> RunConfig {
    load_config(&configs().join(name)).unwrap()
}

// Tracer column and closed-form Danckwerts response.

const U: f64 = 5.75e-4;

fn tracer_system(film: f64) -> SystemConfig {
    validate_system(
        ColumnGeometry { length: 1.4e-2, diameter: 1e-2, particle_diameter: 9.0e-5, column_porosity: 0.37, particle_porosity: 0.75 },
        TransportParams::uniform(1, 5.75e-8, 6.07e-11, film),
        SmaBinding { ionic_capacity: 1200.0, ka: vec![0.0], kd: vec![0.0], nu: vec![1.0], sigma: vec![0.0] },
        ComponentSet::new(["salt", "tracer"]).unwrap(),
    )
    .unwrap()
}

fn talbot(f: impl Fn(Complex64) -> Complex64, t: f64, m: usize) -> f64 {
    let r = 2.0 * m as f64 / (5.0 * t);
    let mut sum = 0.5 * (f(Complex64::new(r, 0.0)) * (r * t).exp()).re;
    for k in 1..m {
        let th = k as f64 * std::f64::consts::PI / m as f64;
        let cot = th.cos() / th.sin();
        let s = Complex64::new(r * th * cot, r * th);
        let sigma = th + (th * cot - 1.0) * cot;
        sum += ((s * t).exp() * f(s) * Complex64::new(1.0, sigma)).re;
    }
    r / m as f64 * sum
}

/// Closed-vessel step response at `t` residence times.
fn danckwerts_step(pe: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let g = |s: Complex64| {
        let one = Complex64::new(1.0, 0.0);
        let q = (one + 4.0 * s / pe).sqrt();
        let num = 4.0 * q * (pe * (one - q) / 2.0).exp();
        let den = (one + q) * (one + q) - (one - q) * (one - q) * (-pe * q).exp();
        num / den / s
    };
    talbot(g, t, 32)
}

#[test]
fn criterion_01_tracer_oracle() {
    let t0 = Instant::now();
    let cfg = tracer_system(0.0);
    let tau = 1.4e-2 / U;
    let pe = U * 1.4e-2 / 5.75e-8;
    let settings = SolverSettings::default().with_grid(200, 2);
    let state = fresh_state(&cfg, 200, 2, 0.0).unwrap();
    let inlet = InletProfile::constant(&[0.0, 1.0], 0.0, 2.0 * tau, 0.05).unwrap();
    let (_, rec) = integrate_column(&state, &inlet, U, &settings, &cfg).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..rec.len() {
        let exact = danckwerts_step(pe, rec.time(j) / tau);
        num += (rec.get(j, 1) - exact).powi(2);
        den += exact * exact;
    }
    let err = (num / den).sqrt();
    let secs = t0.elapsed().as_secs_f64();
    let pass = err < 0.02 && secs < 10.0;
    report(1, "tracer breakthrough vs Danckwerts at Nz=200", pass, &format!("rel L2 {err:.2e} < 2e-2, {secs:.1} s < 10 s"));
    assert!(pass);
}

#[test]
fn criterion_02_retention_time() {
    let t0 = Instant::now();
    let cfg = tracer_system(0.0);
    let settings = SolverSettings::default().with_grid(40, 10);
    let state = fresh_state(&cfg, 40, 10, 0.0).unwrap();
    let inlet = InletProfile::constant(&[0.0, 1.0], 0.0, 400.0, 0.05).unwrap();
    let (_, rec) = integrate_column(&state, &inlet, U, &settings, &cfg).unwrap();
    let f = rec.series(1);
    let tr: f64 = (0..f.len() - 1).map(|j| rec.dt() * (2.0 - f[j] - f[j + 1]) / 2.0).sum();
    let secs = t0.elapsed().as_secs_f64();
    let pass = (tr - 24.35).abs() <= 0.05 * 24.35 && secs < 10.0;
    report(2, "non-retained first moment", pass, &format!("{tr:.2} s vs 24.35 s ± 5%, {secs:.1} s < 10 s"));
    assert!(pass);
}

#[test]
fn criterion_03_batch_mass_balance() {
    let t0 = Instant::now();
    let cfg = bundled("table3_point_b.json");
    let sys = cfg.system_config().unwrap();
    let p = cfg.protocol.clone().unwrap();
    let settings = cfg.solver.clone();
    assert_eq!((settings.nz, settings.nr), (40, 10));
    let ([start, end], rec) = run_batch_with_state(&p, &sys, &settings).unwrap();
    let q = p.flow_rate(&sys);
    let (h0, h1) = (holdup(&start, &sys), holdup(&end, &sys));
    let mut worst = 0.0f64;
    for i in 1..4 {
        let fed = q * p.feed[i - 1] * p.t_load;
        let out = q * concentration_integral(&rec, rec.t_start(), rec.t_last()).unwrap()[i - 1];
        worst = worst.max((fed - out - (h1[i] - h0[i])).abs() / fed);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 5e-3 && secs < 60.0;
    report(3, "batch mass balance, point b", pass, &format!("worst relative imbalance {worst:.2e} < 5e-3, {secs:.1} s < 60 s"));
    assert!(pass);
}

#[test]
fn criterion_04_batch_regression_point_a() {
    let t0 = Instant::now();
    let cfg = bundled("table3_point_a.json");
    let out = std::env::temp_dir().join(format!("smbforge-acc4-{}", std::process::id()));
    let manifest = run(Mode::SimulateBatch, &cfg, &RunOptions { out: out.clone(), threads: 1, config_path: None }).unwrap();
    let text = std::fs::read_to_string(out.join("indicators.csv")).unwrap();
    let row: Vec<&str> = text.lines().find(|l| l.starts_with("outlet,cyt,")).unwrap().split(',').collect();
    let (pu, y): (f64, f64) = (row[2].parse().unwrap(), row[3].parse().unwrap());
    let secs = t0.elapsed().as_secs_f64();
    let pass = (pu - 0.90).abs() <= 0.03 && (y - 0.85).abs() <= 0.08 && secs < 120.0;
    report(
        4,
        "point a pooling at mu = 7.5e-5",
        pass,
        &format!("Pu {:.2}% vs 90.0 ± 3, Y {y:.3} vs 0.85 ± 0.08, {secs:.1} s < 120 s", 100.0 * pu),
    );
    assert!(manifest.files.contains(&"chromatogram.csv".to_string()));
    let _ = std::fs::remove_dir_all(out);
    assert!(pass);
}

#[test]
fn criterion_05_mu_sweep() {
    let t0 = Instant::now();
    let cfg = bundled("table3_point_b.json");
    let sys = cfg.system_config().unwrap();
    let p = cfg.protocol.clone().unwrap();
    let (_, rec) = run_batch_with_state(&p, &sys, &cfg.solver).unwrap();
    let mut pts = Vec::new();
    for mu in [1e-4, 7.5e-5, 5e-5, 2.5e-5] {
        let o = batch_performance(&rec, &p, &sys, 2, mu).unwrap();
        pts.push((mu, o.purity(2), o.yield_of(2)));
    }
    let monotone = pts.windows(2).all(|w| w[1].2 <= w[0].2 && w[1].1 >= w[0].1);
    let secs = t0.elapsed().as_secs_f64();
    let pass = monotone && secs < 300.0;
    let detail: Vec<String> = pts.iter().map(|(m, pu, y)| format!("{m:.1e}: {:.2}%/{y:.3}", 100.0 * pu)).collect();
    report(5, "mu sweep on point b", pass, &format!("{}, {secs:.1} s < 300 s", detail.join(", ")));
    assert!(pass);
}

/// Protein fed minus withdrawn over the last simulated switch.
fn net_inflow(scheme: &ProcessScheme, state: &SMBState) -> Vec<f64> {
    let last = state.history.last().unwrap();
    let (q_f, c_f) = scheme.feed();
    let mut net: Vec<f64> = c_f.iter().map(|c| q_f * c * scheme.switch_time).collect();
    for port in scheme.product_ports() {
        let rec = last.get(&port).unwrap();
        let a = concentration_integral(rec, last.t_start, last.t_start + scheme.switch_time).unwrap();
        let q = scheme.port_flow(&port).unwrap();
        for i in 0..a.len() {
            net[i + 1] -= q * a[i];
        }
    }
    net
}

#[test]
fn criteria_06_07_four_zone_balance_and_css() {
    let cfg = bundled("four_zone_empirical_u1.json");
    let sys = cfg.system_config().unwrap();
    let settings = cfg.solver.clone();
    assert_eq!((settings.nz, settings.nr), (20, 5));
    let scheme = build_scheme(cfg.scheme.as_ref().unwrap(), sys.proteins()).unwrap();
    let t0 = Instant::now();
    let mut s = initialize_smb(&scheme, &sys, &settings).unwrap();
    let h0 = s.holdup(&scheme, &sys);
    let mut fed = vec![0.0; 4];
    let mut net = vec![0.0; 4];
    let mut distances: Vec<f64> = Vec::new();
    let mut prev: Option<SwitchRecord> = None;
    let mut balance = None;
    let mut crossing: Option<usize> = None;
    let mut threshold = f64::INFINITY;
    while s.switches < 200 {
        s = advance_switch(&s, &scheme, &settings, &sys).unwrap();
        let (q_f, c_f) = scheme.feed();
        for i in 1..4 {
            fed[i] += q_f * c_f[i] * scheme.switch_time;
        }
        for (n, d) in net.iter_mut().zip(net_inflow(&scheme, &s)) {
            *n += d;
        }
        if s.switches == 30 {
            let h = s.holdup(&scheme, &sys);
            let total_fed: f64 = fed[1..].iter().sum();
            let err: f64 = (1..4).map(|i| (net[i] - (h[i] - h0[i])).abs()).sum::<f64>() / total_fed;
            balance = Some((err, t0.elapsed().as_secs_f64()));
        }
        let cur = s.history.last().unwrap().clone();
        if let Some(p) = &prev {
            let d = css_distance(&p.withdrawals, &cur.withdrawals, 1).unwrap();
            if distances.is_empty() {
                threshold = 1e-3 * d;
            }
            distances.push(d);
            if crossing.is_none() && d < threshold {
                crossing = Some(s.switches);
            }
        }
        prev = Some(cur);
        s.history.clear();
        if crossing.is_some_and(|k| s.switches >= k + 5) || (crossing.is_none() && s.switches >= 120 && balance.is_some()) {
            break;
        }
    }

    let (err, secs) = balance.unwrap();
    let pass6 = err < 5e-3 && secs < 600.0;
    report(6, "four-zone SMB mass balance over 30 switches", pass6, &format!("relative imbalance {err:.2e} < 5e-3, {secs:.1} s < 600 s"));

    let initial = distances[0];
    let detail = match crossing {
        Some(k) => {
            let after = &distances[distances.len() - 5..];
            let worst = after.iter().fold(0.0f64, |m, d| m.max(*d));
            let ok = k <= 120 && worst <= 2.0 * threshold;
            (ok, format!("initial {initial:.3e}, below {threshold:.3e} at switch {k} (<= 120), worst of next five {worst:.3e} <= {:.3e}", 2.0 * threshold))
        }
        None => {
            let last = *distances.last().unwrap();
            (false, format!("initial {initial:.3e}, threshold {threshold:.3e} not reached by switch {}; last distance {last:.3e}", s.switches))
        }
    };
    report(7, "CSS distance decay", detail.0, &detail.1);
    assert!(pass6);
    assert!(detail.0, "{}", detail.1);
}

fn criterion_08_body() -> (bool, String) {
    let mut cfg = bundled("cascade_table4_point_a.json");
    cfg.css = CssSettings { history_limit: Some(2), ..cfg.css.clone() };
    let sys = cfg.system_config().unwrap();
    let scheme = build_scheme(cfg.scheme.as_ref().unwrap(), sys.proteins()).unwrap();
    let t0 = Instant::now();
    let s = initialize_smb(&scheme, &sys, &cfg.solver).unwrap();
    let out = run_to_css(s, &scheme, &cfg.solver, &cfg.css, &sys).unwrap();
    let rec = out.performance.iter().find(|r| r.node == "U2:E").unwrap();
    let (pu, y) = (rec.purity[1], rec.yields[1]);
    (
        pu >= 0.98 && y >= 0.90,
        format!("Pu {:.2}% >= 98, Y {y:.3} >= 0.90 after {} switches, {:.0} s", 100.0 * pu, out.switches, t0.elapsed().as_secs_f64()),
    )
}

#[test]
fn criterion_08_cascade_end_to_end() {
    if std::env::var_os("SMBFORGE_LONG_SUITE").is_none() {
        let _ = writeln!(std::io::stderr(), "criterion  8 SKIPPED: cascade point a end to end (set SMBFORGE_LONG_SUITE=1)");
        return;
    }
    let (pass, detail) = criterion_08_body();
    report(8, "cascade point a, U2 extract cyt", pass, &detail);
    assert!(pass);
}

fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

#[test]
fn criterion_09_pareto_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for set in 0..1000 {
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|j| {
                if set % 3 == 0 && j % 2 == 0 {
                    ((rng.random_range(0..20) as f64) / 20.0, (rng.random_range(0..20) as f64) / 20.0)
                } else {
                    (rng.random(), rng.random())
                }
            })
            .collect();
        let mut front = pareto_front(&pts);
        front.sort_unstable();
        // Brute force, keeping the first of exact duplicates.
        let brute: Vec<usize> = (0..pts.len())
            .filter(|&i| !pts.iter().any(|q| dominates(*q, pts[i])) && !pts[..i].contains(&pts[i]))
            .collect();
        if front != brute {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 5.0;
    report(9, "Pareto front vs brute force on 1000 sets of 200", pass, &format!("{mismatches} mismatches, {secs:.2} s < 5 s"));
    assert!(pass);
}

fn param(name: &str, lower: f64, upper: f64) -> Parameter {
    Parameter { name: name.into(), lower, upper, fixed: None, initial: None }
}

const COV: [[f64; 2]; 2] = [[1.0, 0.5], [0.5, 2.0]];
const PREC: [[f64; 2]; 2] = [[8.0 / 7.0, -2.0 / 7.0], [-2.0 / 7.0, 4.0 / 7.0]];

#[test]
fn criterion_10_mcmc_correctness() {
    let t0 = Instant::now();
    let problem = OptimizationProblem {
        parameters: vec![param("a", -10.0, 10.0), param("b", -10.0, 10.0)],
        epsilon: vec![0.0],
        sigma: vec![1.0],
        samples: 10_000,
        burn_in: 0.1,
        sampler: SamplerSettings { geweke_stop: None, ..SamplerSettings::default() },
    };
    let toy = |t: &[f64]| -> Result<Evaluation, String> {
        let q: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| t[i] * PREC[i][j] * t[j]).sum();
        Ok(Evaluation { purity: vec![1.0], yield_value: -q, converged: true, switches: None })
    };
    let chain = mcmc_sample(&problem, toy, 0).unwrap();
    let xs = chain.post_burn_in();
    let n = xs.len() as f64;
    let mean = [0, 1].map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n);
    let mut err2 = 0.0;
    let mut norm2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let c = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0);
            err2 += (c - COV[i][j]).powi(2);
            norm2 += COV[i][j].powi(2);
        }
    }
    let cov_err = (err2 / norm2).sqrt();
    let mean_err = mean[0].abs().max(mean[1].abs());

    let mut passed_z = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        if geweke(&x, 0.1, 0.5).unwrap().abs() < 3.0 {
            passed_z += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = mean_err < 0.05 && cov_err < 0.1 && passed_z >= 95 && secs < 30.0;
    report(
        10,
        "MCMC on Gaussian toy and Geweke on iid chains",
        pass,
        &format!("mean error {mean_err:.3} < 0.05, covariance error {cov_err:.3} < 0.1, |z| < 3 on {passed_z}/100, {secs:.1} s < 30 s"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_penalty_constraint() {
    let t0 = Instant::now();
    // Pu = 1 - (a² + b²)/2, Y = (a + b)/2: the constraint Pu >= 0.9 is active
    // at a = b = sqrt(0.1), where Y = sqrt(0.1).
    let surface = |t: &[f64]| -> Result<Evaluation, String> {
        Ok(Evaluation {
            purity: vec![1.0 - 0.5 * (t[0] * t[0] + t[1] * t[1])],
            yield_value: 0.5 * (t[0] + t[1]),
            converged: true,
            switches: None,
        })
    };
    let problem = OptimizationProblem {
        parameters: vec![param("a", 0.0, 1.0), param("b", 0.0, 1.0)],
        epsilon: vec![0.9],
        sigma: (0..5).map(|k| 10f64.powi(k)).collect(),
        samples: 10_000,
        burn_in: 0.5,
        sampler: SamplerSettings { geweke_stop: None, ..SamplerSettings::default() },
    };
    let chain = mcmc_sample(&problem, surface, 21).unwrap();
    let last_sigma = *problem.sigma.last().unwrap();
    let best = chain
        .samples
        .iter()
        .filter(|s| s.sigma == last_sigma && s.feasible(&problem.epsilon))
        .filter_map(|s| s.objectives())
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let y_star = 0.1f64.sqrt();
    let secs = t0.elapsed().as_secs_f64();
    let (pass, detail) = match best {
        Some((pu, y)) => (
            (y - y_star).abs() <= 0.02 * y_star && pu >= 0.9 && secs < 60.0,
            format!("best feasible Y {y:.4} vs {y_star:.4} ± 2%, Pu {pu:.4} >= 0.9, {secs:.1} s < 60 s"),
        ),
        None => (false, "no feasible sample in the final stage".into()),
    };
    report(11, "penalty schedule finds the constrained optimum", pass, &detail);
    assert!(pass);
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Runs `mode` twice into fresh directories and compares every CSV.
fn rerun_identical(mode: Mode, cfg: &RunConfig, root: &Path, tag: &str, threads: [usize; 2]) -> Result<usize, String> {
    let mut outputs = Vec::new();
    for (k, t) in threads.iter().enumerate() {
        let dir = root.join(format!("{tag}-{k}"));
        run(mode, cfg, &RunOptions { out: dir.clone(), threads: *t, config_path: None }).map_err(|e| format!("{tag}: {e:#}"))?;
        outputs.push(csv_files(&dir));
    }
    if outputs[0].is_empty() {
        return Err(format!("{tag}: no CSV written"));
    }
    if outputs[0] != outputs[1] {
        return Err(format!("{tag}: CSV outputs differ"));
    }
    Ok(outputs[0].len())
}

#[test]
fn criterion_12_determinism() {
    let root = std::env::temp_dir().join(format!("smbforge-acc12-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let mut checked = Vec::new();
    let mut failures = Vec::new();
    let mut record = |r: Result<usize, String>, tag: &str| match r {
        Ok(n) => checked.push(format!("{tag} {n} files")),
        Err(e) => failures.push(e),
    };

    let batch = bundled("table3_point_a.json");
    record(rerun_identical(Mode::SimulateBatch, &batch, &root, "batch", [1, 1]), "simulate-batch");

    let mut smb = bundled("four_zone_empirical_u1.json");
    smb.css.max_switches = 6;
    record(rerun_identical(Mode::SimulateSmb, &smb, &root, "smb", [1, 1]), "simulate-smb");

    let mut toy = bundled("toy_self_test.json");
    toy.optimization.as_mut().unwrap().chains = 2;
    record(rerun_identical(Mode::Optimize, &toy, &root, "toy", [1, 2]), "optimize");

    // A short batch chain on a coarse grid feeds the predictive check.
    let mut opt = bundled("batch_optimize.json");
    opt.solver = SolverSettings::default().with_grid(15, 3);
    opt.protocol.as_mut().unwrap().t_hold = None;
    opt.optimization.as_mut().unwrap().problem.samples = 4;
    record(rerun_identical(Mode::Optimize, &opt, &root, "batch-opt", [1, 1]), "optimize (batch)");
    let mut pred = opt.clone();
    pred.predictive = Some(smbforge::config::Predictive { chain: root.join("batch-opt-0/chain.csv"), draws: 3, burn_in: Some(0.0) });
    pred.mode = Some(Mode::PredictiveCheck);
    pred.seed = 5;
    record(rerun_identical(Mode::PredictiveCheck, &pred, &root, "pred", [1, 3]), "predictive-check");

    let pass = failures.is_empty();
    let detail = if pass { checked.join(", ") } else { failures.join("; ") };
    report(12, "reruns give byte-identical CSVs", pass, &detail);
    let _ = std::fs::remove_dir_all(&root);
    assert!(pass, "{detail}");
}
