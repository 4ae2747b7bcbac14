//! Time-dependent column inlet profiles and sampled outlet records.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("breakpoint at t = {t} has {found} values, expected {expected}")]
    Width { t: f64, expected: usize, found: usize },
    #[error("breakpoint times must be non-decreasing (t = {0})")]
    Unordered(f64),
    #[error("more than one jump at t = {0}")]
    RepeatedJump(f64),
    #[error("negative inlet value {value} for component {component} at t = {t}")]
    Negative { t: f64, component: usize, value: f64 },
    #[error("profile covers [{lo}, {hi}] but [{t_start}, {t_end}] is requested")]
    Coverage { lo: f64, hi: f64, t_start: f64, t_end: f64 },
    #[error("invalid interval [{t_start}, {t_end}] or sample spacing {dt}")]
    Interval { t_start: f64, t_end: f64, dt: f64 },
    #[error("records do not share a time grid")]
    GridMismatch,
}

/// Number of samples on `[t_start, t_end]` at spacing `dt`.
pub fn sample_count(t_start: f64, t_end: f64, dt: f64) -> usize {
    ((t_end - t_start) / dt + 1e-9).floor() as usize + 1
}

fn check_interval(t_start: f64, t_end: f64, dt: f64) -> Result<(), ProfileError> {
    if t_start.is_finite() && t_end.is_finite() && t_end > t_start && dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(ProfileError::Interval { t_start, t_end, dt })
    }
}

/// Piecewise-linear inlet concentrations for all components (salt first).
///
/// Breakpoints with equal times encode a jump; the profile is right-continuous
/// there. Integration restarts at every jump, and also at every breakpoint when
/// the profile describes a prescribed program rather than resampled data.
#[derive(Debug, Clone, PartialEq)]
pub struct InletProfile {
    ncomp: usize,
    times: Vec<f64>,
    values: Vec<f64>,
    restart_at_nodes: bool,
    t_start: f64,
    t_end: f64,
    sample_dt: f64,
}

impl InletProfile {
    pub fn from_breakpoints(
        ncomp: usize,
        breakpoints: Vec<(f64, Vec<f64>)>,
        t_start: f64,
        t_end: f64,
        sample_dt: f64,
    ) -> Result<Self, ProfileError> {
        let mut times = Vec::with_capacity(breakpoints.len());
        let mut values = Vec::with_capacity(breakpoints.len() * ncomp);
        for (t, v) in breakpoints {
            if v.len() != ncomp {
                return Err(ProfileError::Width { t, expected: ncomp, found: v.len() });
            }
            times.push(t);
            values.extend(v);
        }
        Self::build(ncomp, times, values, true, t_start, t_end, sample_dt)
    }

    /// Same values at all times.
    pub fn constant(values: &[f64], t_start: f64, t_end: f64, sample_dt: f64) -> Result<Self, ProfileError> {
        Self::from_breakpoints(
            values.len(),
            vec![(t_start, values.to_vec()), (t_end, values.to_vec())],
            t_start,
            t_end,
            sample_dt,
        )
    }

    /// Linear interpolant of uniformly sampled data (`data` is row-major,
    /// one row of `ncomp` values per sample starting at `t0`).
    pub fn sampled(
        ncomp: usize,
        t0: f64,
        dt: f64,
        data: Vec<f64>,
        t_end: f64,
        sample_dt: f64,
    ) -> Result<Self, ProfileError> {
        let n = data.len() / ncomp;
        let times = (0..n).map(|j| t0 + j as f64 * dt).collect();
        Self::build(ncomp, times, data, false, t0, t_end, sample_dt)
    }

    fn build(
        ncomp: usize,
        times: Vec<f64>,
        values: Vec<f64>,
        restart_at_nodes: bool,
        t_start: f64,
        t_end: f64,
        sample_dt: f64,
    ) -> Result<Self, ProfileError> {
        check_interval(t_start, t_end, sample_dt)?;
        for w in times.windows(2) {
            if !(w[1] >= w[0]) {
                return Err(ProfileError::Unordered(w[1]));
            }
        }
        for w in times.windows(3) {
            if w[0] == w[1] && w[1] == w[2] {
                return Err(ProfileError::RepeatedJump(w[0]));
            }
        }
        for (j, row) in values.chunks(ncomp).enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if !(v >= 0.0) {
                    return Err(ProfileError::Negative { t: times[j], component: i, value: v });
                }
            }
        }
        let (lo, hi) = (times.first().copied().unwrap_or(f64::NAN), times.last().copied().unwrap_or(f64::NAN));
        let slack = 1e-9 * t_end.abs().max(1.0);
        if !(lo <= t_start + slack && hi >= t_end - slack) {
            return Err(ProfileError::Coverage { lo, hi, t_start, t_end });
        }
        Ok(Self { ncomp, times, values, restart_at_nodes, t_start, t_end, sample_dt })
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn sample_dt(&self) -> f64 {
        self.sample_dt
    }

    pub fn with_sample_dt(mut self, dt: f64) -> Self {
        self.sample_dt = dt;
        self
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.ncomp..(j + 1) * self.ncomp]
    }

    fn interpolate(&self, p: usize, t: f64, out: &mut [f64]) {
        let (t0, t1) = (self.times[p], self.times[p + 1]);
        let w = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
        let (a, b) = (self.row(p), self.row(p + 1));
        for i in 0..self.ncomp {
            out[i] = a[i] + w * (b[i] - a[i]);
        }
    }

    /// Right-continuous value at `t`.
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        if n == 1 || t < self.times[0] {
            out.copy_from_slice(self.row(0));
        } else if t >= self.times[n - 1] {
            out.copy_from_slice(self.row(n - 1));
        } else {
            self.interpolate(self.right_piece(t), t, out);
        }
    }

    fn right_piece(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&x| x <= t);
        k.saturating_sub(1).min(self.times.len() - 2)
    }

    fn left_piece(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&x| x < t);
        k.saturating_sub(1).min(self.times.len() - 2)
    }

    /// Value seen by an integration segment `[a, b]`: right limit at `a`, left limit at `b`.
    pub fn eval_segment(&self, t: f64, a: f64, b: f64, out: &mut [f64]) {
        if self.times.len() == 1 {
            out.copy_from_slice(self.row(0));
            return;
        }
        let tm = t.clamp(a, b);
        let p = if tm >= b { self.left_piece(tm) } else { self.right_piece(tm) };
        self.interpolate(p, tm, out);
    }

    /// Interior times at which the integrator must restart.
    pub fn restart_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for (j, &t) in self.times.iter().enumerate() {
            let jump = j + 1 < self.times.len() && self.times[j + 1] == t;
            if (self.restart_at_nodes || jump) && t > self.t_start && t < self.t_end && out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }

    /// Exact integral of component `i` over `[a, b]`.
    pub fn integral(&self, i: usize, a: f64, b: f64) -> f64 {
        let n = self.times.len();
        let mut v0 = vec![0.0; self.ncomp];
        let mut v1 = vec![0.0; self.ncomp];
        let mut knots = vec![a];
        knots.extend(self.times.iter().copied().filter(|&t| t > a && t < b));
        knots.push(b);
        knots.dedup();
        let mut total = 0.0;
        for w in knots.windows(2) {
            if n == 1 {
                total += self.row(0)[i] * (w[1] - w[0]);
                continue;
            }
            self.eval_segment(w[0], w[0], w[1], &mut v0);
            self.eval_segment(w[1], w[0], w[1], &mut v1);
            total += 0.5 * (v0[i] + v1[i]) * (w[1] - w[0]);
        }
        total
    }
}

/// Outlet concentrations sampled on a uniform grid, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OutletRecord {
    pub node: String,
    t_start: f64,
    dt: f64,
    ncomp: usize,
    data: Vec<f64>,
}

impl OutletRecord {
    pub fn zeros(node: impl Into<String>, t_start: f64, dt: f64, ncomp: usize, samples: usize) -> Self {
        Self { node: node.into(), t_start, dt, ncomp, data: vec![0.0; samples * ncomp] }
    }

    pub fn from_rows(node: impl Into<String>, t_start: f64, dt: f64, ncomp: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % ncomp, 0);
        Self { node: node.into(), t_start, dt, ncomp, data }
    }

    /// Constant record, e.g. the initial recycle stream.
    pub fn constant(node: impl Into<String>, t_start: f64, t_end: f64, dt: f64, values: &[f64]) -> Self {
        let n = sample_count(t_start, t_end, dt);
        let data = values.iter().copied().cycle().take(n * values.len()).collect();
        Self { node: node.into(), t_start, dt, ncomp: values.len(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.ncomp
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    /// Time of the last sample.
    pub fn t_last(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t_start + j as f64 * self.dt
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.data[j * self.ncomp + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.ncomp..(j + 1) * self.ncomp]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.ncomp..(j + 1) * self.ncomp]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn series(&self, i: usize) -> Vec<f64> {
        self.data.iter().skip(i).step_by(self.ncomp).copied().collect()
    }

    pub fn same_grid(&self, other: &OutletRecord) -> bool {
        self.ncomp == other.ncomp && self.len() == other.len() && self.dt == other.dt
    }

    /// Copy shifted to start at `t_start`.
    pub fn shifted(&self, t_start: f64) -> Self {
        Self { t_start, ..self.clone() }
    }

    /// Piecewise-linear interpolant usable as a downstream inlet over `[t_start, t_end]`.
    pub fn to_profile(&self, t_end: f64, sample_dt: f64) -> Result<InletProfile, ProfileError> {
        let mut data = self.data.clone();
        for v in &mut data {
            *v = v.max(0.0);
        }
        InletProfile::sampled(self.ncomp, self.t_start, self.dt, data, t_end, sample_dt)
    }

    /// Rows as `time_s,component,conc_mol_m3` with component labels.
    pub fn write_long_csv<W: Write>(&self, mut w: W, labels: &[String], header: bool) -> io::Result<()> {
        if header {
            writeln!(w, "time_s,component,conc_mol_m3")?;
        }
        for j in 0..self.len() {
            for i in 0..self.ncomp {
                writeln!(w, "{:?},{},{:?}", self.time(j), labels[i], self.get(j, i))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> InletProfile {
        InletProfile::from_breakpoints(
            2,
            vec![
                (0.0, vec![1.0, 0.0]),
                (10.0, vec![1.0, 0.0]),
                (10.0, vec![2.0, 5.0]),
                (20.0, vec![4.0, 5.0]),
            ],
            0.0,
            20.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn jump_is_right_continuous() {
        let p = ramp();
        let mut v = [0.0; 2];
        p.eval(10.0, &mut v);
        assert_eq!(v, [2.0, 5.0]);
        p.eval(9.999, &mut v);
        assert_eq!(v, [1.0, 0.0]);
        p.eval(15.0, &mut v);
        assert_eq!(v, [3.0, 5.0]);
        p.eval(25.0, &mut v);
        assert_eq!(v, [4.0, 5.0]);
    }

    #[test]
    fn segment_limits() {
        let p = ramp();
        let mut v = [0.0; 2];
        p.eval_segment(10.0, 0.0, 10.0, &mut v);
        assert_eq!(v, [1.0, 0.0]);
        p.eval_segment(10.0, 10.0, 20.0, &mut v);
        assert_eq!(v, [2.0, 5.0]);
        p.eval_segment(30.0, 10.0, 20.0, &mut v);
        assert_eq!(v, [4.0, 5.0]);
    }

    #[test]
    fn restarts_and_integrals() {
        let p = ramp();
        assert_eq!(p.restart_times(), vec![10.0]);
        assert!((p.integral(0, 0.0, 20.0) - (10.0 + 30.0)).abs() < 1e-12);
        assert!((p.integral(1, 5.0, 15.0) - 25.0).abs() < 1e-12);
        let s = InletProfile::sampled(1, 0.0, 1.0, vec![0.0, 1.0, 0.0, 1.0], 3.0, 1.0).unwrap();
        assert!(s.restart_times().is_empty());
        assert!((s.integral(0, 0.0, 3.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(matches!(
            InletProfile::constant(&[1.0, -0.5], 0.0, 1.0, 0.1),
            Err(ProfileError::Negative { component: 1, .. })
        ));
        assert!(matches!(
            InletProfile::from_breakpoints(1, vec![(0.0, vec![1.0]), (5.0, vec![1.0])], 0.0, 10.0, 1.0),
            Err(ProfileError::Coverage { .. })
        ));
        assert!(matches!(
            InletProfile::from_breakpoints(1, vec![(1.0, vec![1.0]), (0.0, vec![1.0])], 0.0, 1.0, 1.0),
            Err(ProfileError::Unordered(_))
        ));
    }

    #[test]
    fn record_sample_count() {
        assert_eq!(sample_count(0.0, 100.0, 0.5), 201);
        assert_eq!(sample_count(0.0, 1.0, 0.3), 4);
        // 0.1 steps do not sum exactly; the guard keeps the last sample.
        assert_eq!(sample_count(0.0, 0.3, 0.1), 4);
        let r = OutletRecord::constant("x", 5.0, 10.0, 1.0, &[1.0, 2.0]);
        assert_eq!(r.len(), 6);
        assert_eq!(r.series(1), vec![2.0; 6]);
        assert_eq!(r.t_last(), 10.0);
    }
}
