#![allow(dead_code)]

use num_complex::Complex64;
use smbforge_core::model::{validate_system, ColumnGeometry, ComponentSet, SmaBinding, SystemConfig, TransportParams};

/// Reference geometry with one inert tracer next to the salt. `film = 0`
/// keeps the tracer out of the pores.
pub fn tracer_system(film: f64) -> SystemConfig {
    validate_system(
        ColumnGeometry {
            length: 1.4e-2,
            diameter: 1e-2,
            particle_diameter: 9.0e-5,
            column_porosity: 0.37,
            particle_porosity: 0.75,
        },
        TransportParams::uniform(1, 5.75e-8, 6.07e-11, film),
        SmaBinding { ionic_capacity: 1200.0, ka: vec![0.0], kd: vec![0.0], nu: vec![1.0], sigma: vec![0.0] },
        ComponentSet::new(["salt", "tracer"]).unwrap(),
    )
    .unwrap()
}

/// Fixed Talbot inversion of `F(s)` at `t > 0`.
pub fn talbot(f: impl Fn(Complex64) -> Complex64, t: f64, m: usize) -> f64 {
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

/// Outlet step response of the dispersed plug-flow column with Danckwerts
/// boundaries, at time `t` in units of the residence time `L/u`.
pub fn danckwerts_step(pe: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let g = |s: Complex64| {
        let q = (Complex64::new(1.0, 0.0) + 4.0 * s / pe).sqrt();
        let one = Complex64::new(1.0, 0.0);
        let num = 4.0 * q * (pe * (one - q) / 2.0).exp();
        let den = (one + q) * (one + q) - (one - q) * (one - q) * (-pe * q).exp();
        num / den / s
    };
    talbot(g, t, 32)
}
