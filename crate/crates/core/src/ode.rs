//! Variable-order, variable-step BDF integrator for stiff systems.
//!
//! The step history is held as backward differences and rescaled on every
//! step-size change (quasi-constant step formulation). Newton iterations use
//! a frozen iteration matrix `I - c J`; the Jacobian is refreshed only when
//! Newton fails to converge, and the matrix is refactored whenever `c` changes.

use thiserror::Error;

pub const MAX_ORDER: usize = 5;
const NEWTON_MAXITER: usize = 4;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
/// Step growth allowed while the integrator is still ramping up from `h0`.
const MAX_FACTOR_STARTUP: f64 = 1.0e4;
const STARTUP_STEPS: usize = 12;
const MAX_REJECTIONS: usize = 60;

/// Linear solve with an already factored iteration matrix.
pub trait LinearSolve {
    fn solve(&self, b: &mut [f64]);
}

/// A stiff ODE system `y' = f(t, y)` together with its Jacobian machinery.
pub trait StiffProblem {
    type Jacobian;
    type Factor: LinearSolve;

    fn dim(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Jacobian at `(t, y)`; `f` holds `rhs(t, y)`.
    fn jacobian(&mut self, t: f64, y: &[f64], f: &[f64]) -> Self::Jacobian;
    /// Factors `I - c J`. `None` signals a singular matrix.
    fn factor(&mut self, jac: &Self::Jacobian, c: f64) -> Option<Self::Factor>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdfOptions {
    pub abstol: f64,
    pub reltol: f64,
    pub h0: f64,
    pub hmax: f64,
    pub max_steps: usize,
}

impl Default for BdfOptions {
    fn default() -> Self {
        Self { abstol: 1e-10, reltol: 1e-6, h0: 1e-14, hmax: 5e6, max_steps: 500_000 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("too many error test or convergence failures at t = {t}")]
    TooManyFailures { t: f64 },
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudget { t: f64, max_steps: usize },
    #[error("iteration matrix is singular at t = {t}")]
    Singular { t: f64 },
}

impl OdeError {
    pub fn time(&self) -> f64 {
        match *self {
            OdeError::StepUnderflow { t }
            | OdeError::TooManyFailures { t }
            | OdeError::StepBudget { t, .. }
            | OdeError::Singular { t } => t,
        }
    }

    /// Same error reported on a time axis shifted by `offset`.
    pub fn shifted(self, offset: f64) -> Self {
        match self {
            OdeError::StepUnderflow { t } => OdeError::StepUnderflow { t: t + offset },
            OdeError::TooManyFailures { t } => OdeError::TooManyFailures { t: t + offset },
            OdeError::StepBudget { t, max_steps } => OdeError::StepBudget { t: t + offset, max_steps },
            OdeError::Singular { t } => OdeError::Singular { t: t + offset },
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct BdfStats {
    pub steps: usize,
    pub rhs_evals: usize,
    pub jacobians: usize,
    pub factorizations: usize,
    pub rejected: usize,
}

fn rms_norm(x: &[f64], scale: &[f64]) -> f64 {
    let n = x.len().max(1);
    (x.iter().zip(scale).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Columns `0..=order` of the step-rescaling matrix.
fn compute_r(order: usize, factor: f64) -> Vec<Vec<f64>> {
    let m = order + 1;
    let mut r = vec![vec![0.0; m]; m];
    for j in 0..m {
        r[0][j] = 1.0;
    }
    for i in 1..m {
        for j in 1..m {
            let entry = (i as f64 - 1.0 - factor * j as f64) / i as f64;
            r[i][j] = r[i - 1][j] * entry;
        }
    }
    r
}

/// Rescales the difference array to a step `factor` times the current one.
fn change_d(d: &mut [Vec<f64>], order: usize, factor: f64) {
    let r = compute_r(order, factor);
    let u = compute_r(order, 1.0);
    let m = order + 1;
    let mut ru = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            ru[i][j] = (0..m).map(|k| r[i][k] * u[k][j]).sum();
        }
    }
    let n = d[0].len();
    let mut out = vec![vec![0.0; n]; m];
    for (j, row) in out.iter_mut().enumerate() {
        for (i, di) in d.iter().enumerate().take(m) {
            let w = ru[i][j];
            if w != 0.0 {
                for (o, v) in row.iter_mut().zip(di) {
                    *o += w * v;
                }
            }
        }
    }
    for (j, row) in out.into_iter().enumerate() {
        d[j] = row;
    }
}

/// One BDF integration from `t0` towards `t_bound`.
pub struct Bdf<P: StiffProblem> {
    opts: BdfOptions,
    t: f64,
    t_old: f64,
    t_bound: f64,
    h_abs: f64,
    order: usize,
    n_equal_steps: usize,
    d: Vec<Vec<f64>>,
    gamma: [f64; MAX_ORDER + 1],
    error_const: [f64; MAX_ORDER + 2],
    newton_tol: f64,
    jac: Option<P::Jacobian>,
    lu: Option<P::Factor>,
    jac_is_current: bool,
    stats: BdfStats,
    // scratch
    f: Vec<f64>,
    scale: Vec<f64>,
    dy: Vec<f64>,
}

impl<P: StiffProblem> Bdf<P> {
    pub fn new(problem: &mut P, t0: f64, y0: &[f64], t_bound: f64, opts: BdfOptions) -> Self {
        let n = problem.dim();
        assert_eq!(y0.len(), n);
        assert!(t_bound > t0, "integration interval must be non-empty");
        let mut gamma = [0.0; MAX_ORDER + 1];
        for k in 1..=MAX_ORDER {
            gamma[k] = gamma[k - 1] + 1.0 / k as f64;
        }
        let mut error_const = [0.0; MAX_ORDER + 2];
        for (k, e) in error_const.iter_mut().enumerate() {
            *e = 1.0 / (k as f64 + 1.0);
        }
        let mut f = vec![0.0; n];
        problem.rhs(t0, y0, &mut f);
        let h_abs = opts.h0.min(opts.hmax).min(t_bound - t0);
        let mut d = vec![vec![0.0; n]; MAX_ORDER + 3];
        d[0].copy_from_slice(y0);
        for (di, fi) in d[1].iter_mut().zip(&f) {
            *di = fi * h_abs;
        }
        let eps = f64::EPSILON;
        let newton_tol = (10.0 * eps / opts.reltol).max(0.03f64.min(opts.reltol.sqrt()));
        Self {
            opts,
            t: t0,
            t_old: t0,
            t_bound,
            h_abs,
            order: 1,
            n_equal_steps: 0,
            d,
            gamma,
            error_const,
            newton_tol,
            jac: None,
            lu: None,
            jac_is_current: false,
            stats: BdfStats { rhs_evals: 1, ..Default::default() },
            f,
            scale: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn t_old(&self) -> f64 {
        self.t_old
    }

    pub fn y(&self) -> &[f64] {
        &self.d[0]
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn stats(&self) -> BdfStats {
        self.stats
    }

    pub fn finished(&self) -> bool {
        self.t >= self.t_bound
    }

    /// Interpolated solution at `t` in `[t_old, t]` for the requested indices.
    pub fn dense(&self, t: f64, indices: &[usize], out: &mut [f64]) {
        let h = self.h_abs;
        let order = self.order;
        let mut p = [0.0; MAX_ORDER + 1];
        let mut acc = 1.0;
        for j in 0..order {
            let shift = self.t - h * j as f64;
            acc *= (t - shift) / (h * (j as f64 + 1.0));
            p[j] = acc;
        }
        for (o, &idx) in out.iter_mut().zip(indices) {
            let mut v = self.d[0][idx];
            for j in 1..=order {
                v += self.d[j][idx] * p[j - 1];
            }
            *o = v;
        }
    }

    fn refresh_jacobian(&mut self, problem: &mut P, t: f64, y: &[f64]) {
        problem.rhs(t, y, &mut self.f);
        self.stats.rhs_evals += 1;
        self.jac = Some(problem.jacobian(t, y, &self.f));
        self.stats.jacobians += 1;
        self.jac_is_current = true;
    }

    /// Newton solve of the BDF corrector. Returns (converged, iterations, y, d).
    fn solve_corrector(
        &mut self,
        problem: &mut P,
        t_new: f64,
        y_predict: &[f64],
        c: f64,
        psi: &[f64],
    ) -> (bool, usize, Vec<f64>, Vec<f64>) {
        let n = y_predict.len();
        let mut y = y_predict.to_vec();
        let mut d = vec![0.0; n];
        let mut dy_norm_old: Option<f64> = None;
        let mut converged = false;
        let mut iters = 0;
        let lu = self.lu.as_ref().expect("factored iteration matrix");
        for k in 0..NEWTON_MAXITER {
            iters = k + 1;
            problem.rhs(t_new, &y, &mut self.f);
            self.stats.rhs_evals += 1;
            if !self.f.iter().all(|v| v.is_finite()) {
                break;
            }
            for i in 0..n {
                self.dy[i] = c * self.f[i] - psi[i] - d[i];
            }
            lu.solve(&mut self.dy);
            let dy_norm = rms_norm(&self.dy, &self.scale);
            if !dy_norm.is_finite() {
                break;
            }
            let rate = dy_norm_old.map(|old| dy_norm / old);
            if let Some(rate) = rate {
                if rate >= 1.0
                    || rate.powi((NEWTON_MAXITER - k) as i32) / (1.0 - rate) * dy_norm > self.newton_tol
                {
                    break;
                }
            }
            for i in 0..n {
                y[i] += self.dy[i];
                d[i] += self.dy[i];
            }
            if dy_norm == 0.0 || rate.is_some_and(|r| r / (1.0 - r) * dy_norm < self.newton_tol) {
                converged = true;
                break;
            }
            dy_norm_old = Some(dy_norm);
        }
        (converged, iters, y, d)
    }

    /// Takes one accepted step (possibly shortened to land on `t_bound`).
    pub fn step(&mut self, problem: &mut P) -> Result<(), OdeError> {
        if self.stats.steps >= self.opts.max_steps {
            return Err(OdeError::StepBudget { t: self.t, max_steps: self.opts.max_steps });
        }
        let t = self.t;
        let n = self.d[0].len();
        let min_step = 10.0 * ((t.abs() * f64::EPSILON).max(f64::MIN_POSITIVE));
        let mut h_abs = self.h_abs;
        if h_abs > self.opts.hmax {
            change_d(&mut self.d, self.order, self.opts.hmax / h_abs);
            h_abs = self.opts.hmax;
            self.n_equal_steps = 0;
            self.lu = None;
        } else if h_abs < min_step {
            // Headroom so the floor, which grows with t, does not clamp every step.
            change_d(&mut self.d, self.order, 2.0 * min_step / h_abs);
            h_abs = 2.0 * min_step;
            self.n_equal_steps = 0;
            self.lu = None;
        }
        let order = self.order;
        self.jac_is_current = false;
        let mut rejections = 0;
        let (t_new, y_new, d_corr, error_norm, safety) = loop {
            if h_abs < min_step {
                return Err(OdeError::StepUnderflow { t });
            }
            if rejections > MAX_REJECTIONS {
                return Err(OdeError::TooManyFailures { t });
            }
            let mut t_new = t + h_abs;
            if t_new >= self.t_bound {
                t_new = self.t_bound;
                let factor = (t_new - t) / h_abs;
                if factor != 1.0 {
                    change_d(&mut self.d, order, factor);
                    self.n_equal_steps = 0;
                    self.lu = None;
                }
            }
            let h = t_new - t;
            h_abs = h;

            let mut y_predict = vec![0.0; n];
            for di in self.d.iter().take(order + 1) {
                for (p, v) in y_predict.iter_mut().zip(di) {
                    *p += v;
                }
            }
            for i in 0..n {
                self.scale[i] = self.opts.abstol + self.opts.reltol * y_predict[i].abs();
            }
            let alpha = self.gamma[order];
            let mut psi = vec![0.0; n];
            for j in 1..=order {
                let g = self.gamma[j] / alpha;
                for (p, v) in psi.iter_mut().zip(&self.d[j]) {
                    *p += g * v;
                }
            }
            let c = h / alpha;

            let mut outcome = None;
            loop {
                if self.jac.is_none() {
                    self.refresh_jacobian(problem, t_new, &y_predict);
                }
                if self.lu.is_none() {
                    let jac = self.jac.as_ref().unwrap();
                    match problem.factor(jac, c) {
                        Some(lu) => self.lu = Some(lu),
                        None => return Err(OdeError::Singular { t }),
                    }
                    self.stats.factorizations += 1;
                }
                let (converged, iters, y, d) = self.solve_corrector(problem, t_new, &y_predict, c, &psi);
                if converged {
                    outcome = Some((iters, y, d));
                    break;
                }
                if self.jac_is_current {
                    break;
                }
                self.refresh_jacobian(problem, t_new, &y_predict);
                self.lu = None;
            }

            let Some((iters, y_new, d)) = outcome else {
                h_abs *= 0.5;
                change_d(&mut self.d, order, 0.5);
                self.n_equal_steps = 0;
                self.lu = None;
                self.stats.rejected += 1;
                rejections += 1;
                continue;
            };

            let safety = 0.9 * (2 * NEWTON_MAXITER + 1) as f64 / (2 * NEWTON_MAXITER + iters) as f64;
            for i in 0..n {
                self.scale[i] = self.opts.abstol + self.opts.reltol * y_new[i].abs();
            }
            let ec = self.error_const[order];
            let error_norm = (d.iter().zip(&self.scale).map(|(v, s)| (ec * v / s).powi(2)).sum::<f64>()
                / n.max(1) as f64)
                .sqrt();
            if error_norm > 1.0 || !error_norm.is_finite() {
                let factor = if error_norm.is_finite() {
                    MIN_FACTOR.max(safety * error_norm.powf(-1.0 / (order as f64 + 1.0)))
                } else {
                    MIN_FACTOR
                };
                h_abs *= factor;
                change_d(&mut self.d, order, factor);
                self.n_equal_steps = 0;
                self.stats.rejected += 1;
                rejections += 1;
                continue;
            }
            break (t_new, y_new, d, error_norm, safety);
        };

        self.stats.steps += 1;
        self.n_equal_steps += 1;
        self.t_old = t;
        self.t = t_new;
        self.h_abs = h_abs;

        // D^{j+1} y_n = D^j y_n - D^j y_{n-1}; d_corr = D^{k+1} y_n.
        for i in 0..n {
            self.d[order + 2][i] = d_corr[i] - self.d[order + 1][i];
            self.d[order + 1][i] = d_corr[i];
        }
        for j in (0..=order).rev() {
            let (lo, hi) = self.d.split_at_mut(j + 1);
            for (a, b) in lo[j].iter_mut().zip(&hi[0]) {
                *a += b;
            }
        }
        debug_assert!(self.d[0].iter().zip(&y_new).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs())));

        if self.n_equal_steps < order + 1 {
            return Ok(());
        }

        let error_m_norm = if order > 1 {
            let ec = self.error_const[order - 1];
            rms_norm(&self.d[order].iter().map(|v| ec * v).collect::<Vec<_>>(), &self.scale)
        } else {
            f64::INFINITY
        };
        let error_p_norm = if order < MAX_ORDER {
            let ec = self.error_const[order + 1];
            rms_norm(&self.d[order + 2].iter().map(|v| ec * v).collect::<Vec<_>>(), &self.scale)
        } else {
            f64::INFINITY
        };
        let norms = [error_m_norm, error_norm, error_p_norm];
        let mut best = 0;
        let mut best_factor = f64::NEG_INFINITY;
        for (k, e) in norms.iter().enumerate() {
            let f = if *e == 0.0 { f64::INFINITY } else { e.powf(-1.0 / (order + k) as f64) };
            if f > best_factor {
                best_factor = f;
                best = k;
            }
        }
        let new_order = order + best - 1;
        let cap = if self.stats.steps <= STARTUP_STEPS { MAX_FACTOR_STARTUP } else { MAX_FACTOR };
        let factor = cap.min(safety * best_factor);
        self.order = new_order;
        self.h_abs *= factor;
        change_d(&mut self.d, new_order, factor);
        self.n_equal_steps = 0;
        self.lu = None;
        Ok(())
    }
}

/// Dense Jacobian helper for small systems (tests, diagnostics).
pub mod dense {
    use super::{LinearSolve, StiffProblem};
    use crate::linalg::DenseLu;

    impl LinearSolve for DenseLu {
        fn solve(&self, b: &mut [f64]) {
            DenseLu::solve(self, b)
        }
    }

    /// Wraps a closure `f(t, y, dy)` with a forward-difference dense Jacobian.
    pub struct DenseProblem<F> {
        pub n: usize,
        pub f: F,
    }

    impl<F: FnMut(f64, &[f64], &mut [f64])> StiffProblem for DenseProblem<F> {
        type Jacobian = Vec<f64>;
        type Factor = DenseLu;

        fn dim(&self) -> usize {
            self.n
        }

        fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
            (self.f)(t, y, dy)
        }

        fn jacobian(&mut self, t: f64, y: &[f64], f0: &[f64]) -> Vec<f64> {
            let n = self.n;
            let mut jac = vec![0.0; n * n];
            let mut yp = y.to_vec();
            let mut fp = vec![0.0; n];
            for j in 0..n {
                let delta = f64::EPSILON.sqrt() * y[j].abs().max(1e-6);
                yp[j] = y[j] + delta;
                (self.f)(t, &yp, &mut fp);
                for i in 0..n {
                    jac[i * n + j] = (fp[i] - f0[i]) / delta;
                }
                yp[j] = y[j];
            }
            jac
        }

        fn factor(&mut self, jac: &Vec<f64>, c: f64) -> Option<DenseLu> {
            let n = self.n;
            let mut m: Vec<f64> = jac.iter().map(|v| -c * v).collect();
            for i in 0..n {
                m[i * n + i] += 1.0;
            }
            DenseLu::factor(n, m)
        }
    }
}
