mod common;

use common::{danckwerts_step, tracer_system};
use smbforge_core::column::{integrate_column, Convection, SolverSettings};
use smbforge_core::model::fresh_state;
use smbforge_core::profile::InletProfile;

const U: f64 = 5.75e-4;

#[test]
fn oracle_matches_long_time_limits() {
    let pe = U * 1.4e-2 / 5.75e-8;
    assert!(danckwerts_step(pe, 0.3) < 1e-6);
    assert!((danckwerts_step(pe, 3.0) - 1.0).abs() < 1e-6);
    // First moment of the outlet response of a closed vessel is exactly one residence time.
    let n = 4000;
    let h = 4.0 / n as f64;
    let mean: f64 = (0..n).map(|j| (1.0 - danckwerts_step(pe, (j as f64 + 0.5) * h)) * h).sum();
    assert!((mean - 1.0).abs() < 1e-4, "{mean}");
}

fn breakthrough_error(conv: Convection, nz: usize) -> f64 {
    let cfg = tracer_system(0.0);
    let tau = 1.4e-2 / U;
    let pe = U * 1.4e-2 / 5.75e-8;
    let t_end = 2.0 * tau;
    let settings = SolverSettings { convection: conv, ..SolverSettings::default().with_grid(nz, 2) };
    let state = fresh_state(&cfg, nz, 2, 0.0).unwrap();
    let inlet = InletProfile::constant(&[0.0, 1.0], 0.0, t_end, 0.05).unwrap();
    let (_, rec) = integrate_column(&state, &inlet, U, &settings, &cfg).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..rec.len() {
        let exact = danckwerts_step(pe, rec.time(j) / tau);
        num += (rec.get(j, 1) - exact).powi(2);
        den += exact * exact;
    }
    (num / den).sqrt()
}

#[test]
fn step_breakthrough_matches_closed_form() {
    let t0 = std::time::Instant::now();
    let err = breakthrough_error(SolverSettings::default().convection, 200);
    assert!(err < 0.02, "relative L2 error {err}");
    assert!(t0.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn grid_refinement_order() {
    for (conv, min_rate) in [(Convection::Upwind1, 0.8), (Convection::Weno3, 1.5)] {
        let e: Vec<f64> = [100, 200, 400].iter().map(|&n| breakthrough_error(conv, n)).collect();
        for w in e.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate >= min_rate, "{conv:?}: errors {e:?}");
        }
    }
}

/// First moment of the outlet step response, `∫ (1 - c/c_in) dt`.
fn first_moment(film: f64) -> f64 {
    let cfg = tracer_system(film);
    let t_end = 400.0;
    let settings = SolverSettings::default().with_grid(40, 10);
    let state = fresh_state(&cfg, 40, 10, 0.0).unwrap();
    let inlet = InletProfile::constant(&[0.0, 1.0], 0.0, t_end, 0.05).unwrap();
    let (_, rec) = integrate_column(&state, &inlet, U, &settings, &cfg).unwrap();
    let f = rec.series(1);
    let h = rec.dt();
    (0..f.len() - 1).map(|j| h * (2.0 - f[j] - f[j + 1]) / 2.0).sum()
}

#[test]
fn non_retained_retention_time() {
    let t0 = std::time::Instant::now();
    let tr = first_moment(0.0);
    assert!((tr - 24.35).abs() < 0.05 * 24.35, "retention {tr}");
    assert!(t0.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn pore_penetrating_tracer_sees_particle_volume() {
    // Accessible volume grows by (1 - εc) εp / εc.
    let expected = 24.35 * (1.0 + 0.63 * 0.75 / 0.37);
    let tr = first_moment(6.90e-6);
    assert!((tr - expected).abs() < 0.01 * expected, "{tr} vs {expected}");
}
