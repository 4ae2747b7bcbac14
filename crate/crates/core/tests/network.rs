use smbforge_core::column::SolverSettings;
use smbforge_core::indicators::{concentration_integral, run_to_css, CssSettings};
use smbforge_core::model::{reference_system, SystemConfig};
use smbforge_core::network::{
    advance_switch, build_scheme, initialize_smb, Dilution, Layout, ProcessScheme, SchemeSpec, UnitFlows,
};

fn u1() -> UnitFlows {
    UnitFlows {
        zone1_flow: 2.21e-8,
        feed_flow: 0.55e-8,
        desorbent_flow: 1.14e-8,
        extract_flow: 1.09e-8,
        feed_salt: 290.0,
        desorbent_salt: 420.0,
    }
}

fn four_zone(unit: UnitFlows, zones: Vec<usize>, feed: Vec<f64>) -> ProcessScheme {
    let spec = SchemeSpec {
        switch_time: 100.0,
        zone_columns: zones,
        feed,
        samples_per_switch: 200,
        dilution: Dilution::default(),
        layout: Layout::FourZone { unit },
    };
    build_scheme(&spec, 3).unwrap()
}

fn coarse() -> SolverSettings {
    SolverSettings::default().with_grid(20, 5)
}

/// Protein moles fed minus withdrawn over the last switch.
fn net_inflow(scheme: &ProcessScheme, state: &smbforge_core::network::SMBState, cfg: &SystemConfig) -> Vec<f64> {
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
    let _ = cfg;
    net
}

#[test]
fn single_switch_conserves_protein() {
    let cfg = reference_system();
    let scheme = four_zone(u1(), vec![1, 1, 1, 1], vec![1.0; 3]);
    let s0 = initialize_smb(&scheme, &cfg, &coarse()).unwrap();
    let mut s = s0.clone();
    let mut before = s.holdup(&scheme, &cfg);
    for _ in 0..3 {
        s = advance_switch(&s, &scheme, &coarse(), &cfg).unwrap();
        let after = s.holdup(&scheme, &cfg);
        let net = net_inflow(&scheme, &s, &cfg);
        for i in 1..4 {
            let fed = scheme.feed().0 * scheme.switch_time;
            let err = (after[i] - before[i] - net[i]).abs() / fed;
            assert!(err < 2e-3, "switch {} component {i}: relative imbalance {err:e}", s.switches);
        }
        before = after;
    }
}

#[test]
fn zero_protein_feed_stays_protein_free() {
    let cfg = reference_system();
    let scheme = four_zone(u1(), vec![1, 1, 1, 1], vec![0.0; 3]);
    let mut s = initialize_smb(&scheme, &cfg, &coarse()).unwrap();
    for _ in 0..2 {
        s = advance_switch(&s, &scheme, &coarse(), &cfg).unwrap();
    }
    let worst = s
        .history
        .iter()
        .flat_map(|h| &h.withdrawals)
        .flat_map(|r| (0..r.len()).flat_map(move |j| (1..4).map(move |i| r.get(j, i).abs())))
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-12, "protein appeared: {worst:e}");
}

#[test]
fn ports_return_after_a_full_cycle() {
    let cfg = reference_system();
    // Uniform salt and no protein: every column is at rest, so a full cycle
    // reproduces the initial state column by column.
    let mut u = u1();
    u.feed_salt = 300.0;
    u.desorbent_salt = 300.0;
    let scheme = four_zone(u, vec![1, 2, 1, 1], vec![0.0; 3]);
    let s0 = initialize_smb(&scheme, &cfg, &SolverSettings::default().with_grid(6, 2)).unwrap();
    let mut s = s0.clone();
    for k in 1..=5 {
        s = advance_switch(&s, &scheme, &SolverSettings::default().with_grid(6, 2), &cfg).unwrap();
        assert_eq!(s.offset(&scheme, 0), k % 5);
    }
    for (a, b) in s.columns[0].iter().zip(&s0.columns[0]) {
        for (x, y) in a.c.iter().zip(&b.c) {
            assert!((x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }
    assert!((s.time(&scheme) - 500.0).abs() < 1e-9);
}

#[test]
fn four_zone_reaches_steady_state() {
    let cfg = reference_system();
    let scheme = four_zone(u1(), vec![1, 1, 1, 1], vec![1.0; 3]);
    let s0 = initialize_smb(&scheme, &cfg, &coarse()).unwrap();
    let css = CssSettings { tolerance: 1e-4, max_switches: 300, history_limit: Some(2), ..CssSettings::default() };
    let t = std::time::Instant::now();
    let out = run_to_css(s0, &scheme, &coarse(), &css, &cfg).unwrap();
    eprintln!(
        "css after {} switches ({:?}), distance {:e}, {:?}",
        out.switches,
        t.elapsed(),
        out.distance,
        out.performance
    );
    assert!(out.converged);
    let net = net_inflow(&scheme, &out.state, &cfg);
    let fed = scheme.feed().0 * scheme.switch_time;
    for i in 1..4 {
        assert!(net[i].abs() / fed < 5e-3, "component {i} net accumulation {:e}", net[i] / fed);
    }
}
