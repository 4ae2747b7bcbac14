//! Single-column load, wash and multi-step gradient elution, plus product pooling.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::column::{integrate_column, ColumnError, SolverSettings};
use crate::model::{fresh_state, ColumnState, SystemConfig};
use crate::profile::{InletProfile, OutletRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BatchError {
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Column(#[from] ColumnError),
    #[error("no outlet sample satisfies the pooling criterion")]
    EmptyWindow,
    #[error("target component {0} is not a protein")]
    Target(usize),
}

/// Optional high-salt strip appended after the hold. It does not enter the
/// indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regeneration {
    pub salt: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchProtocol {
    /// Interstitial velocity [m/s].
    pub velocity: f64,
    /// Feed concentration of every protein [mol/m³].
    pub feed: Vec<f64>,
    pub load_salt: f64,
    pub t_load: f64,
    pub t_wash: f64,
    /// Length of the first gradient segment.
    pub dt1: f64,
    /// Length of the second gradient segment.
    pub dt2: f64,
    pub slope1: f64,
    pub slope2: f64,
    /// Salt level at the start of elution.
    pub elution_salt: f64,
    /// Final isocratic hold; three residence times `L/u` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_hold: Option<f64>,
    #[serde(default = "default_sample_dt")]
    pub sample_dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regeneration: Option<Regeneration>,
}

fn default_sample_dt() -> f64 {
    1.0
}

impl BatchProtocol {
    pub fn validate(&self, config: &SystemConfig) -> Result<(), BatchError> {
        let bad = |m: String| Err(BatchError::Protocol(m));
        if !(self.velocity > 0.0 && self.velocity.is_finite()) {
            return bad(format!("velocity must be positive, got {}", self.velocity));
        }
        if self.feed.len() != config.proteins() {
            return bad(format!("feed has {} entries for {} proteins", self.feed.len(), config.proteins()));
        }
        let named = [
            ("load_salt", self.load_salt),
            ("t_load", self.t_load),
            ("t_wash", self.t_wash),
            ("dt1", self.dt1),
            ("dt2", self.dt2),
            ("slope1", self.slope1),
            ("slope2", self.slope2),
            ("elution_salt", self.elution_salt),
            ("t_hold", self.t_hold.unwrap_or(0.0)),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if let Some(i) = self.feed.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad(format!("feed entry {i} is {}", self.feed[i]));
        }
        if !(self.sample_dt > 0.0 && self.sample_dt.is_finite()) {
            return bad(format!("sample_dt must be positive, got {}", self.sample_dt));
        }
        if let Some(r) = &self.regeneration {
            if !(r.salt >= 0.0 && r.duration > 0.0 && r.salt.is_finite() && r.duration.is_finite()) {
                return bad(format!("regeneration needs salt >= 0 and duration > 0, got {r:?}"));
            }
        }
        if self.duration(config) <= 0.0 {
            return bad("protocol has zero length".into());
        }
        Ok(())
    }

    pub fn elution_start(&self) -> f64 {
        self.t_load + self.t_wash
    }

    /// Hold length actually used.
    pub fn hold(&self, config: &SystemConfig) -> f64 {
        self.t_hold.unwrap_or_else(|| 3.0 * config.geometry().length / self.velocity)
    }

    /// End of the second gradient segment.
    pub fn gradient_end(&self) -> f64 {
        self.elution_start() + self.dt1 + self.dt2
    }

    pub fn duration(&self, config: &SystemConfig) -> f64 {
        self.gradient_end() + self.hold(config) + self.regeneration.as_ref().map_or(0.0, |r| r.duration)
    }

    /// Volumetric flow through the column.
    pub fn flow_rate(&self, config: &SystemConfig) -> f64 {
        config.geometry().flow_rate(self.velocity)
    }
}

/// Inlet salt concentration of the load, wash and elution program. The
/// regeneration strip is not part of it.
pub fn salt_program(p: &BatchProtocol, t: f64) -> f64 {
    let t0 = p.elution_start();
    if t < t0 {
        return p.load_salt;
    }
    let s1 = p.elution_salt + p.slope1 * p.dt1;
    if t < t0 + p.dt1 {
        return p.elution_salt + p.slope1 * (t - t0);
    }
    if t < t0 + p.dt1 + p.dt2 {
        return s1 + p.slope2 * (t - t0 - p.dt1);
    }
    s1 + p.slope2 * p.dt2
}

struct Breakpoints(Vec<(f64, Vec<f64>)>);

impl Breakpoints {
    /// Appends a node; a third node at the same time overwrites the second.
    fn push(&mut self, t: f64, v: Vec<f64>) {
        let n = self.0.len();
        let same = |k: usize| n > k && self.0[n - 1 - k].0 == t;
        if same(0) && same(1) {
            self.0[n - 1].1 = v;
        } else if !(same(0) && self.0[n - 1].1 == v) {
            self.0.push((t, v));
        }
    }
}

/// Full inlet program including the optional regeneration strip.
pub fn inlet_profile(p: &BatchProtocol, config: &SystemConfig) -> Result<InletProfile, BatchError> {
    p.validate(config)?;
    let np = config.proteins();
    let row = |salt: f64, feed: bool| {
        let mut v = vec![salt];
        v.extend((0..np).map(|i| if feed { p.feed[i] } else { 0.0 }));
        v
    };
    let mut b = Breakpoints(Vec::new());
    b.push(0.0, row(p.load_salt, p.t_load > 0.0));
    b.push(p.t_load, row(p.load_salt, true));
    b.push(p.t_load, row(p.load_salt, false));
    let t0 = p.elution_start();
    b.push(t0, row(p.load_salt, false));
    b.push(t0, row(p.elution_salt, false));
    let t1 = t0 + p.dt1;
    b.push(t1, row(salt_program(p, t1), false));
    let t2 = t1 + p.dt2;
    let top = salt_program(p, t2);
    b.push(t2, row(top, false));
    let t3 = t2 + p.hold(config);
    b.push(t3, row(top, false));
    if let Some(r) = &p.regeneration {
        b.push(t3, row(r.salt, false));
        b.push(t3 + r.duration, row(r.salt, false));
    }
    let end = p.duration(config);
    Ok(InletProfile::from_breakpoints(np + 1, b.0, 0.0, end, p.sample_dt).map_err(ColumnError::from)?)
}

/// Simulates a column equilibrated at the load salt through the whole protocol.
pub fn run_batch(p: &BatchProtocol, config: &SystemConfig, settings: &SolverSettings) -> Result<OutletRecord, BatchError> {
    run_batch_with_state(p, config, settings).map(|(_, r)| r)
}

/// As [`run_batch`], also returning the initial and final column states.
pub fn run_batch_with_state(
    p: &BatchProtocol,
    config: &SystemConfig,
    settings: &SolverSettings,
) -> Result<([ColumnState; 2], OutletRecord), BatchError> {
    let inlet = inlet_profile(p, config)?;
    let state = fresh_state(config, settings.nz, settings.nr, p.load_salt).map_err(ColumnError::from)?;
    let (end, rec) = integrate_column(&state, &inlet, p.velocity, settings, config)?;
    Ok(([state, end], rec))
}

/// Pooled product interval; both ends are outlet sample times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolWindow {
    pub t_start: f64,
    pub t_end: f64,
    /// Impurity threshold [mol/m³].
    pub mu: f64,
    pub first: usize,
    pub last: usize,
}

impl PoolWindow {
    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Product pool for `target` at impurity threshold `mu`.
///
/// Impurities whose maximum comes before the target maximum bound the window
/// from the left at the sample after their last excursion to `mu` or above;
/// later impurities bound it from the right at the sample before their first
/// one. A side without such an impurity ends where the target drops to `mu`.
/// When the fronts overlap the target peak the cut points come in reverse
/// order, and the window becomes the band between the later impurity's first
/// and the earlier impurity's last excursion, where the target dominates.
pub fn compute_pool_window(record: &OutletRecord, target: usize, mu: f64) -> Result<PoolWindow, BatchError> {
    let nc = record.ncomp();
    if target == 0 || target >= nc {
        return Err(BatchError::Target(target));
    }
    let n = record.len();
    let peak = |i: usize| {
        (0..n).fold(0, |best, j| if record.get(j, i) > record.get(best, i) { j } else { best })
    };
    let t_peak = peak(target);
    let mut left: Option<usize> = None;
    let mut right: Option<usize> = None;
    for i in (1..nc).filter(|&i| i != target) {
        let above: Vec<usize> = (0..n).filter(|&j| record.get(j, i) >= mu).collect();
        let (Some(&first), Some(&last)) = (above.first(), above.last()) else { continue };
        if peak(i) <= t_peak {
            left = Some(left.map_or(last, |l| l.max(last)));
        } else {
            right = Some(right.map_or(first, |r| r.min(first)));
        }
    }
    let (first, last) = match (left, right) {
        (Some(l), Some(r)) if l >= r => (r, l),
        _ => {
            let support: Vec<usize> = (0..n).filter(|&j| record.get(j, target) > mu).collect();
            let lo = match (left, support.first()) {
                (Some(l), _) => l + 1,
                (None, Some(&a)) => a,
                (None, None) => return Err(BatchError::EmptyWindow),
            };
            let hi = match (right, support.last()) {
                (Some(r), _) => r.saturating_sub(1),
                (None, Some(&b)) => b,
                (None, None) => return Err(BatchError::EmptyWindow),
            };
            (lo, hi)
        }
    };
    if last <= first {
        return Err(BatchError::EmptyWindow);
    }
    Ok(PoolWindow { t_start: record.time(first), t_end: record.time(last), mu, first, last })
}

/// Largest-mass window on which every other protein stays below `mu`.
///
/// Among the maximal runs of samples with all impurities below `mu`, each run
/// is trimmed to its first and last sample where the target exceeds
/// `support`, and the run with the largest target integral wins (earliest on
/// ties). Windows need at least two samples.
pub fn compute_clean_window(
    record: &OutletRecord,
    target: usize,
    mu: f64,
    support: f64,
) -> Result<PoolWindow, BatchError> {
    let nc = record.ncomp();
    if target == 0 || target >= nc {
        return Err(BatchError::Target(target));
    }
    let n = record.len();
    let clean = |j: usize| (1..nc).all(|i| i == target || record.get(j, i) < mu);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut j = 0;
    while j < n {
        if !clean(j) {
            j += 1;
            continue;
        }
        let start = j;
        while j < n && clean(j) {
            j += 1;
        }
        let run = start..j;
        let Some(a) = run.clone().find(|&k| record.get(k, target) > support) else { continue };
        let b = run.rev().find(|&k| record.get(k, target) > support).unwrap();
        if b == a {
            continue;
        }
        let mass: f64 = (a..b).map(|k| 0.5 * (record.get(k, target) + record.get(k + 1, target))).sum::<f64>() * record.dt();
        if best.is_none_or(|(m, _, _)| mass > m) {
            best = Some((mass, a, b));
        }
    }
    let (_, first, last) = best.ok_or(BatchError::EmptyWindow)?;
    Ok(PoolWindow { t_start: record.time(first), t_end: record.time(last), mu, first, last })
}

/// Chromatogram in long format followed by a `# pool_window` comment line.
pub fn write_chromatogram_csv<W: Write>(
    record: &OutletRecord,
    labels: &[String],
    window: Option<&PoolWindow>,
    mut w: W,
) -> io::Result<()> {
    record.write_long_csv(&mut w, labels, true)?;
    match window {
        Some(p) => writeln!(w, "# pool_window t_start={:?} t_end={:?} mu={:?}", p.t_start, p.t_end, p.mu),
        None => writeln!(w, "# pool_window empty"),
    }
}
