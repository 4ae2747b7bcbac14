//! Purity, yield and productivity at withdrawal points, and the cyclic steady
//! state distance between consecutive switches.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{compute_pool_window, BatchError, BatchProtocol, PoolWindow};
use crate::column::SolverSettings;
use crate::model::SystemConfig;
use crate::network::{advance_switch, NetworkError, ProcessScheme, SMBState};
use crate::profile::OutletRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndicatorError {
    #[error("window [{a}, {b}] is outside the record span [{lo}, {hi}]")]
    Window { a: f64, b: f64, lo: f64, hi: f64 },
    #[error("no protein was withdrawn, purity is undefined")]
    NoWithdrawal,
    #[error("no protein was fed, yield is undefined")]
    NoFeed,
    #[error("records do not share a time grid")]
    GridMismatch,
    #[error("invalid indicator input: {0}")]
    Input(String),
}

/// Trapezoidal integral of the piecewise-linear record over `[a, b]` for
/// every protein (salt is skipped).
pub fn concentration_integral(record: &OutletRecord, a: f64, b: f64) -> Result<Vec<f64>, IndicatorError> {
    let (lo, hi) = (record.t_start(), record.t_last());
    let slack = 1e-9 * hi.abs().max(1.0);
    if record.len() < 2 || !(a >= lo - slack && b <= hi + slack && b >= a) {
        return Err(IndicatorError::Window { a, b, lo, hi });
    }
    let (a, b) = (a.max(lo), b.min(hi));
    let nc = record.ncomp();
    let dt = record.dt();
    let mut out = vec![0.0; nc - 1];
    let j0 = (((a - lo) / dt).floor() as usize).min(record.len() - 2);
    let j1 = (((b - lo) / dt).ceil() as usize).clamp(1, record.len() - 1);
    for j in j0..j1 {
        let (ta, tb) = (record.time(j), record.time(j + 1));
        let (x, y) = (a.max(ta), b.min(tb));
        if y <= x {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            let (ca, cb) = (record.get(j, i + 1), record.get(j + 1, i + 1));
            let at = |t: f64| ca + (cb - ca) * (t - ta) / (tb - ta);
            *o += 0.5 * (at(x) + at(y)) * (y - x);
        }
    }
    Ok(out)
}

/// Flows and reference quantities entering the indicator formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceInputs {
    /// Flow leaving through the withdrawal point.
    pub q_node: f64,
    /// Process feed flow.
    pub q_feed: f64,
    /// Process feed concentration per protein.
    pub c_feed: Vec<f64>,
    pub t_load: f64,
    pub t_c: f64,
    pub column_volume: f64,
    pub column_porosity: f64,
    pub columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub node: String,
    pub purity: Vec<f64>,
    pub yields: Vec<f64>,
    pub productivity: Vec<f64>,
    pub t_c: f64,
}

/// Purity, yield and productivity per protein from the concentration
/// integrals. Proteins absent from the feed get zero yield.
pub fn performance(node: &str, a_out: &[f64], p: &PerformanceInputs) -> Result<PerformanceRecord, IndicatorError> {
    if a_out.len() != p.c_feed.len() {
        return Err(IndicatorError::Input(format!("{} integrals for {} feed entries", a_out.len(), p.c_feed.len())));
    }
    if !(p.t_c > 0.0 && p.column_volume > 0.0 && p.columns > 0 && p.q_node >= 0.0) {
        return Err(IndicatorError::Input(format!("non-positive collection time, volume, column count or flow: {p:?}")));
    }
    // Integrator undershoot can leave tiny negative integrals.
    let a_out: Vec<f64> = a_out.iter().map(|a| a.max(0.0)).collect();
    let total: f64 = a_out.iter().sum();
    if !(total > 0.0) {
        return Err(IndicatorError::NoWithdrawal);
    }
    let fed = p.q_feed * p.t_load;
    if !(fed > 0.0) || p.c_feed.iter().all(|&c| c <= 0.0) {
        return Err(IndicatorError::NoFeed);
    }
    let resin = p.t_c * (1.0 - p.column_porosity) * p.column_volume * p.columns as f64;
    Ok(PerformanceRecord {
        node: node.to_string(),
        purity: a_out.iter().map(|a| a / total).collect(),
        yields: a_out
            .iter()
            .zip(&p.c_feed)
            .map(|(a, c)| if *c > 0.0 { p.q_node * a / (fed * c) } else { 0.0 })
            .collect(),
        productivity: a_out.iter().map(|a| p.q_node * a / resin).collect(),
        t_c: p.t_c,
    })
}

/// Pooled outcome of a batch run.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub window: Option<PoolWindow>,
    pub record: Option<PerformanceRecord>,
}

impl BatchOutcome {
    pub fn purity(&self, target: usize) -> f64 {
        self.record.as_ref().map_or(0.0, |r| r.purity[target - 1])
    }

    pub fn yield_of(&self, target: usize) -> f64 {
        self.record.as_ref().map_or(0.0, |r| r.yields[target - 1])
    }
}

/// Pools the chromatogram for `target` at threshold `mu`. An empty window
/// gives no record, which callers treat as zero yield.
pub fn batch_performance(
    record: &OutletRecord,
    protocol: &BatchProtocol,
    config: &SystemConfig,
    target: usize,
    mu: f64,
) -> Result<BatchOutcome, IndicatorError> {
    let window = match compute_pool_window(record, target, mu) {
        Ok(w) => w,
        Err(BatchError::EmptyWindow) => return Ok(BatchOutcome { window: None, record: None }),
        Err(e) => return Err(IndicatorError::Input(e.to_string())),
    };
    let a = concentration_integral(record, window.t_start, window.t_end)?;
    let q = protocol.flow_rate(config);
    let inputs = PerformanceInputs {
        q_node: q,
        q_feed: q,
        c_feed: protocol.feed.clone(),
        t_load: protocol.t_load,
        t_c: window.length(),
        column_volume: config.geometry().volume(),
        column_porosity: config.geometry().column_porosity,
        columns: 1,
    };
    let rec = performance(&record.node, &a, &inputs)?;
    Ok(BatchOutcome { window: Some(window), record: Some(rec) })
}

/// Largest over nodes of `Σ_i (∫|c_prev - c_curr|^n dt)^(1/n)` for proteins,
/// with the records compared sample by sample on their relative time grid.
pub fn css_distance(prev: &[OutletRecord], curr: &[OutletRecord], n: u32) -> Result<f64, IndicatorError> {
    if prev.len() != curr.len() || n == 0 {
        return Err(IndicatorError::GridMismatch);
    }
    let mut worst = 0.0f64;
    for (a, b) in prev.iter().zip(curr) {
        if !a.same_grid(b) || a.len() < 2 {
            return Err(IndicatorError::GridMismatch);
        }
        let mut d = 0.0;
        for i in 1..a.ncomp() {
            let f = |j: usize| (a.get(j, i) - b.get(j, i)).abs().powi(n as i32);
            let s: f64 = (0..a.len() - 1).map(|j| 0.5 * (f(j) + f(j + 1))).sum::<f64>() * a.dt();
            d += s.powf(1.0 / n as f64);
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// `node,component,purity,yield,productivity,t_c,switches_to_css`; batch
/// reports leave the switch count empty.
pub fn write_report_csv<W: Write>(
    records: &[PerformanceRecord],
    labels: &[String],
    switches: Option<usize>,
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "node,component,purity,yield,productivity,t_c,switches_to_css")?;
    let k = switches.map(|k| k.to_string()).unwrap_or_default();
    for r in records {
        for i in 0..r.purity.len() {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{:?},{}",
                r.node,
                labels[i + 1],
                r.purity[i],
                r.yields[i],
                r.productivity[i],
                r.t_c,
                k
            )?;
        }
    }
    Ok(())
}


#[derive(Debug, Error, Clone, PartialEq)]
pub enum CssError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
}

/// Stopping rule for the switch-to-switch iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CssSettings {
    pub tolerance: f64,
    /// Exponent of the distance norm.
    pub norm: u32,
    pub max_switches: usize,
    /// Keep only this many switches of withdrawal records; `None` keeps all.
    pub history_limit: Option<usize>,
}

impl Default for CssSettings {
    fn default() -> Self {
        Self { tolerance: 1e-5, norm: 1, max_switches: 400, history_limit: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CssOutcome {
    pub state: SMBState,
    /// Switches simulated when the iteration stopped.
    pub switches: usize,
    pub converged: bool,
    pub distance: f64,
    /// Distance after every switch from the second on.
    pub distances: Vec<f64>,
    /// Product withdrawals over the final switch.
    pub performance: Vec<PerformanceRecord>,
}

/// Indicators of every product withdrawal over the last simulated switch.
pub fn smb_performance(
    state: &SMBState,
    scheme: &ProcessScheme,
    config: &SystemConfig,
) -> Result<Vec<PerformanceRecord>, IndicatorError> {
    let last = state.history.last().ok_or_else(|| IndicatorError::Input("no switch simulated".into()))?;
    let (q_feed, c_feed) = scheme.feed();
    let geometry = config.geometry();
    let mut out = Vec::new();
    for port in scheme.product_ports() {
        let rec = last.get(&port).ok_or_else(|| IndicatorError::Input(format!("no record for {port}")))?;
        let inputs = PerformanceInputs {
            q_node: scheme.port_flow(&port).unwrap_or(0.0),
            q_feed,
            c_feed: c_feed[1..].to_vec(),
            t_load: scheme.switch_time,
            t_c: scheme.switch_time,
            column_volume: geometry.volume(),
            column_porosity: geometry.column_porosity,
            columns: scheme.total_columns(),
        };
        let a = concentration_integral(rec, last.t_start, last.t_start + scheme.switch_time)?;
        out.push(performance(&port, &a, &inputs)?);
    }
    Ok(out)
}

/// Advances switch by switch until the withdrawal profiles of consecutive
/// switches differ by less than the tolerance. Running out of switches is not
/// an error; the outcome reports `converged = false`.
pub fn run_to_css(
    initial: SMBState,
    scheme: &ProcessScheme,
    solver: &SolverSettings,
    css: &CssSettings,
    config: &SystemConfig,
) -> Result<CssOutcome, CssError> {
    if !(css.tolerance > 0.0) || css.norm == 0 || css.max_switches < 2 {
        return Err(IndicatorError::Input(format!("bad CSS settings {css:?}")).into());
    }
    let mut state = initial;
    let mut distances = Vec::new();
    let mut converged = false;
    while state.switches < css.max_switches {
        state = advance_switch(&state, scheme, solver, config)?;
        let h = &state.history;
        if h.len() >= 2 {
            let d = css_distance(&h[h.len() - 2].withdrawals, &h[h.len() - 1].withdrawals, css.norm)?;
            distances.push(d);
            log::debug!("switch {}: css distance {d:e}", state.switches);
            if d < css.tolerance {
                converged = true;
                break;
            }
        }
        if let Some(keep) = css.history_limit {
            let keep = keep.max(2);
            if state.history.len() > keep {
                let extra = state.history.len() - keep;
                state.history.drain(..extra);
            }
        }
    }
    let performance = smb_performance(&state, scheme, config)?;
    Ok(CssOutcome {
        switches: state.switches,
        converged,
        distance: distances.last().copied().unwrap_or(f64::INFINITY),
        distances,
        performance,
        state,
    })
}
