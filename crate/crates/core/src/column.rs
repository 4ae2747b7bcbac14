//! General rate model of one packed column with steric mass-action binding.
//!
//! Bulk phase: cell-centred finite volumes along the axis with Danckwerts
//! inlet flux and zero-gradient outlet. Particles: `Nr` equal-volume spherical
//! shells with a film resistance at the surface. Binding is kinetic and fully
//! coupled; the bound salt is algebraic and not part of the ODE state.
//!
//! The ODE state is ordered cell by cell. Each cell block holds the bulk
//! concentrations (`M+1`) followed, for every shell from the particle centre
//! outwards, by the pore concentrations (`M+1`) and the bound proteins (`M`).

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{BandLu, BandMatrix, DenseLu};
use crate::model::{
    ColumnState, ModelError, SmaBinding, SystemConfig, NEGATIVE_HARD_LIMIT, NEGATIVE_TOLERANCE,
};
use crate::ode::{Bdf, BdfOptions, BdfStats, LinearSolve, OdeError, StiffProblem};
use crate::profile::{sample_count, InletProfile, OutletRecord, ProfileError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColumnError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error("interstitial velocity must be positive and finite, got {0}")]
    Velocity(f64),
    #[error("state contains NaN or infinite values")]
    NonFinite,
    #[error("free ligand concentration {0} is negative: ionic capacity exceeded")]
    Capacity(f64),
    #[error("concentration {value} at t = {t} is below the hard limit")]
    Negative { value: f64, t: f64 },
    #[error("state time {state} does not match inlet start {inlet}")]
    TimeMismatch { state: f64, inlet: f64 },
    #[error("inlet has {found} components, expected {expected}")]
    InletWidth { expected: usize, found: usize },
    #[error("integration failed: {0}")]
    Integrator(#[from] OdeError),
}

/// Face reconstruction for the convective flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convection {
    Upwind1,
    /// Third-order WENO reconstruction on interior faces.
    #[default]
    Weno3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub nz: usize,
    pub nr: usize,
    pub abstol: f64,
    pub reltol: f64,
    pub h0: f64,
    pub hmax: f64,
    pub max_steps: usize,
    pub convection: Convection,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            nz: 40,
            nr: 10,
            abstol: 1e-10,
            reltol: 1e-6,
            h0: 1e-14,
            hmax: 5e6,
            max_steps: 500_000,
            convection: Convection::default(),
        }
    }
}

impl SolverSettings {
    pub fn with_grid(mut self, nz: usize, nr: usize) -> Self {
        self.nz = nz;
        self.nr = nr;
        self
    }

    pub fn validate(&self) -> Result<(), ColumnError> {
        let bad = |m: String| Err(ColumnError::Settings(m));
        if self.nz < 2 || self.nr < 1 {
            return bad(format!("grid {}x{} too small", self.nz, self.nr));
        }
        if !(self.abstol > 0.0 && self.reltol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(self.h0 > 0.0 && self.hmax >= self.h0) {
            return bad(format!("need hmax >= h0 > 0, got h0 = {}, hmax = {}", self.h0, self.hmax));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    fn bdf(&self) -> BdfOptions {
        BdfOptions { abstol: self.abstol, reltol: self.reltol, h0: self.h0, hmax: self.hmax, max_steps: self.max_steps }
    }
}

/// Bound-phase rates of all proteins together with the bound salt.
#[derive(Debug, Clone, PartialEq)]
pub struct SmaFlux {
    pub rates: Vec<f64>,
    pub bound_salt: f64,
}

/// Mass-action rates `dq_i/dt` for one particle location.
///
/// `cp` and `q` hold all `M+1` components; `q[0]` is ignored and recomputed.
pub fn sma_flux(cp: &[f64], q: &[f64], binding: &SmaBinding) -> Result<SmaFlux, ColumnError> {
    let free = binding.free_ligand(q);
    if free < NEGATIVE_TOLERANCE {
        return Err(ColumnError::Capacity(free));
    }
    let mut rates = vec![0.0; binding.proteins()];
    let kin = Kinetics::new(binding);
    kin.rates(cp, &q[1..], &mut rates);
    Ok(SmaFlux { rates, bound_salt: binding.bound_salt(q) })
}

#[derive(Debug, Clone)]
struct Kinetics {
    lambda: f64,
    ka: Vec<f64>,
    kd: Vec<f64>,
    nu: Vec<f64>,
    steric: Vec<f64>,
}

impl Kinetics {
    fn new(b: &SmaBinding) -> Self {
        Self {
            lambda: b.ionic_capacity,
            ka: b.ka.clone(),
            kd: b.kd.clone(),
            nu: b.nu.clone(),
            steric: b.nu.iter().zip(&b.sigma).map(|(n, s)| n + s).collect(),
        }
    }

    /// `q` holds proteins only. Negative bases of the fractional powers are clamped to zero.
    #[inline]
    fn rates(&self, cp: &[f64], q: &[f64], out: &mut [f64]) {
        let mut free = self.lambda;
        for (s, qj) in self.steric.iter().zip(q) {
            free -= s * qj;
        }
        let lf = free.max(0.0).ln();
        let ls = cp[0].max(0.0).ln();
        for j in 0..q.len() {
            let nu = self.nu[j];
            out[j] = self.ka[j] * cp[j + 1] * (nu * lf).exp() - self.kd[j] * q[j] * (nu * ls).exp();
        }
    }
}

#[inline]
fn weno3(cm: f64, c0: f64, cp: f64) -> f64 {
    const EPS: f64 = 1e-10;
    let b0 = (cp - c0) * (cp - c0);
    let b1 = (c0 - cm) * (c0 - cm);
    let a0 = (2.0 / 3.0) / ((EPS + b0) * (EPS + b0));
    let a1 = (1.0 / 3.0) / ((EPS + b1) * (EPS + b1));
    (a0 * 0.5 * (c0 + cp) + a1 * (1.5 * c0 - 0.5 * cm)) / (a0 + a1)
}

/// Discretization of one column at a fixed flow rate.
#[derive(Debug, Clone)]
pub struct ColumnModel {
    nz: usize,
    nr: usize,
    nc: usize,
    np: usize,
    m: usize,
    block: usize,
    u: f64,
    dz: f64,
    dax: f64,
    convection: Convection,
    film_bulk: Vec<f64>,
    film_pore: Vec<f64>,
    diff_in: Vec<f64>,
    diff_out: Vec<f64>,
    beta_p: f64,
    kin: Kinetics,
    // holdup weights
    eps_c: f64,
    eps_p: f64,
    area: f64,
}

impl ColumnModel {
    pub fn new(config: &SystemConfig, nz: usize, nr: usize, velocity: f64, convection: Convection) -> Self {
        let g = config.geometry();
        let nc = config.ncomp();
        let np = config.proteins();
        let m = nc + np;
        let rp = g.particle_radius();
        let eps_p = g.particle_porosity;
        let eps_c = g.column_porosity;

        let faces: Vec<f64> = (0..=nr).map(|s| rp * (s as f64 / nr as f64).cbrt()).collect();
        let centres: Vec<f64> = (0..nr).map(|s| 0.5 * (faces[s] + faces[s + 1])).collect();
        let vol: Vec<f64> = (0..nr).map(|s| (faces[s + 1].powi(3) - faces[s].powi(3)) / 3.0).collect();
        let outer_gap = rp - centres[nr - 1];

        let dp = config.pore_diffusion();
        let kf = config.film_transfer();
        let mut film_bulk = vec![0.0; nc];
        let mut film_pore = vec![0.0; nc];
        let mut diff_in = vec![0.0; nr * nc];
        let mut diff_out = vec![0.0; nr * nc];
        for i in 0..nc {
            let keff = if kf[i] > 0.0 { 1.0 / (1.0 / kf[i] + outer_gap / (eps_p * dp[i])) } else { 0.0 };
            film_bulk[i] = (1.0 - eps_c) / eps_c * 3.0 / rp * keff;
            film_pore[i] = keff * rp * rp / (eps_p * vol[nr - 1]);
            // A pore-excluded component never enters the particle.
            let d = if kf[i] > 0.0 { dp[i] } else { 0.0 };
            for s in 0..nr {
                if s > 0 {
                    diff_in[s * nc + i] = d * faces[s] * faces[s] / ((centres[s] - centres[s - 1]) * vol[s]);
                }
                if s + 1 < nr {
                    diff_out[s * nc + i] =
                        d * faces[s + 1] * faces[s + 1] / ((centres[s + 1] - centres[s]) * vol[s]);
                }
            }
        }

        Self {
            nz,
            nr,
            nc,
            np,
            m,
            block: nc + nr * m,
            u: velocity,
            dz: g.length / nz as f64,
            dax: config.transport().axial_dispersion,
            convection,
            film_bulk,
            film_pore,
            diff_in,
            diff_out,
            beta_p: (1.0 - eps_p) / eps_p,
            kin: Kinetics::new(config.binding()),
            eps_c,
            eps_p,
            area: g.cross_section(),
        }
    }

    pub fn dim(&self) -> usize {
        self.nz * self.block
    }

    pub fn outlet_indices(&self) -> Vec<usize> {
        (0..self.nc).map(|i| (self.nz - 1) * self.block + i).collect()
    }

    pub fn pack(&self, s: &ColumnState) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        for k in 0..self.nz {
            let base = k * self.block;
            y[base..base + self.nc].copy_from_slice(&s.c[k * self.nc..(k + 1) * self.nc]);
            for r in 0..self.nr {
                let sb = base + self.nc + r * self.m;
                let p = s.particle_index(k, r, 0);
                y[sb..sb + self.nc].copy_from_slice(&s.cp[p..p + self.nc]);
                y[sb + self.nc..sb + self.m].copy_from_slice(&s.q[p + 1..p + self.nc]);
            }
        }
        y
    }

    pub fn unpack(&self, y: &[f64], t: f64) -> ColumnState {
        let mut s = ColumnState::zeros(self.nz, self.nr, self.nc);
        s.t = t;
        for k in 0..self.nz {
            let base = k * self.block;
            s.c[k * self.nc..(k + 1) * self.nc].copy_from_slice(&y[base..base + self.nc]);
            for r in 0..self.nr {
                let sb = base + self.nc + r * self.m;
                let p = s.particle_index(k, r, 0);
                s.cp[p..p + self.nc].copy_from_slice(&y[sb..sb + self.nc]);
                s.q[p + 1..p + self.nc].copy_from_slice(&y[sb + self.nc..sb + self.m]);
                s.q[p] = self.kin.lambda
                    - (0..self.np).map(|j| self.kin.nu[j] * y[sb + self.nc + j]).sum::<f64>();
            }
        }
        s
    }

    /// Method-of-lines right-hand side for inlet concentrations `cin`.
    pub fn rhs(&self, cin: &[f64], y: &[f64], dy: &mut [f64]) {
        self.rhs_impl(cin, y, dy, true);
    }

    /// With `coupled = false` the pore rows omit the binding sink, which turns
    /// them into the rates of the shell totals `c_p + β q` (proteins) and
    /// `c_p,0 - β Σ ν q` (salt). Those are what the Jacobian is built from.
    fn rhs_impl(&self, cin: &[f64], y: &[f64], dy: &mut [f64], coupled: bool) {
        let (nz, nc, nr, m, b) = (self.nz, self.nc, self.nr, self.m, self.block);
        let (u, dz, dax) = (self.u, self.dz, self.dax);

        for i in 0..nc {
            let c = |k: usize| y[k * b + i];
            let mut f_in = u * cin[i];
            for k in 0..nz {
                let f_out = if k + 1 == nz {
                    u * c(k)
                } else {
                    let v = match self.convection {
                        Convection::Upwind1 => c(k),
                        Convection::Weno3 if k == 0 => c(0),
                        Convection::Weno3 => weno3(c(k - 1), c(k), c(k + 1)),
                    };
                    u * v - dax * (c(k + 1) - c(k)) / dz
                };
                dy[k * b + i] = -(f_out - f_in) / dz;
                f_in = f_out;
            }
        }

        for k in 0..nz {
            let base = k * b;
            let outer = base + nc + (nr - 1) * m;
            for s in 0..nr {
                let sb = base + nc + s * m;
                for i in 0..nc {
                    let mut d = 0.0;
                    if s > 0 {
                        d += self.diff_in[s * nc + i] * (y[sb - m + i] - y[sb + i]);
                    }
                    if s + 1 < nr {
                        d += self.diff_out[s * nc + i] * (y[sb + m + i] - y[sb + i]);
                    }
                    dy[sb + i] = d;
                }
            }
            for i in 0..nc {
                let flux = y[base + i] - y[outer + i];
                dy[base + i] -= self.film_bulk[i] * flux;
                dy[outer + i] += self.film_pore[i] * flux;
            }
            for s in 0..nr {
                let sb = base + nc + s * m;
                let (head, tail) = dy.split_at_mut(sb + nc);
                let dq = &mut tail[..self.np];
                self.kin.rates(&y[sb..sb + nc], &y[sb + nc..sb + m], dq);
                if !coupled {
                    continue;
                }
                let dcp = &mut head[sb..sb + nc];
                for j in 0..self.np {
                    dcp[j + 1] -= self.beta_p * dq[j];
                    dcp[0] += self.beta_p * self.kin.nu[j] * dq[j];
                }
            }
        }
    }

    /// Moles of every component held in the column.
    pub fn holdup(&self, s: &ColumnState) -> Vec<f64> {
        let mut out = vec![0.0; self.nc];
        let w = 1.0 / self.nr as f64;
        for k in 0..self.nz {
            for i in 0..self.nc {
                let mut cp = 0.0;
                let mut q = 0.0;
                for r in 0..self.nr {
                    cp += s.pore(k, r, i);
                    q += s.bound(k, r, i);
                }
                out[i] += self.eps_c * s.bulk(k, i)
                    + (1.0 - self.eps_c) * (self.eps_p * cp * w + (1.0 - self.eps_p) * q * w);
            }
        }
        let cell = self.area * self.dz;
        out.iter_mut().for_each(|v| *v *= cell);
        out
    }

    fn bulk_colors(&self) -> usize {
        match self.convection {
            Convection::Upwind1 => 3,
            Convection::Weno3 => 4,
        }
    }
}

/// Right-hand side of the discretized model for a given state snapshot.
/// The bound-salt slot of the result holds `dq_0/dt`.
pub fn assemble_rhs(
    state: &ColumnState,
    cin: &[f64],
    velocity: f64,
    config: &SystemConfig,
    convection: Convection,
) -> Result<ColumnState, ColumnError> {
    if !(velocity > 0.0 && velocity.is_finite()) {
        return Err(ColumnError::Velocity(velocity));
    }
    if !state.is_finite() || cin.iter().any(|v| !v.is_finite()) {
        return Err(ColumnError::NonFinite);
    }
    let model = ColumnModel::new(config, state.nz(), state.nr(), velocity, convection);
    let y = model.pack(state);
    let mut dy = vec![0.0; y.len()];
    model.rhs(cin, &y, &mut dy);
    let mut out = model.unpack(&dy, state.t);
    // unpack added Λ to the algebraic slot; the rate of q_0 is -Σ ν dq.
    for v in out.q.chunks_mut(model.nc) {
        v[0] -= model.kin.lambda;
    }
    Ok(out)
}

/// Structured finite-difference Jacobian.
#[derive(Debug, Clone)]
pub struct ColumnJacobian {
    /// Bulk row `(k, i)` w.r.t. bulk `(k + d, i)`, `d` in `-2..=1`.
    jbb: Vec<f64>,
    /// Bulk row `(k, i)` w.r.t. the outer pore `(k, i)`.
    jbp: Vec<f64>,
    /// Outer pore row `(k, i)` w.r.t. bulk `(k, i)`.
    jpb: Vec<f64>,
    /// Dense `m x m` blocks of each shell.
    pdiag: Vec<f64>,
    /// Pore `(s, i)` w.r.t. pore `(s - 1, i)` and `(s + 1, i)`.
    plow: Vec<f64>,
    pup: Vec<f64>,
}

/// Factored `I - cJ`, held as `T (I - cJ)` where `T` replaces each pore row by
/// its shell-total row so the fast binding exchange never cancels numerically.
/// Block Thomas over shells inside each cell, banded Schur complement for the
/// bulk unknowns.
pub struct ColumnFactor {
    nz: usize,
    nr: usize,
    nc: usize,
    m: usize,
    block: usize,
    beta_p: f64,
    nu: Vec<f64>,
    shell_lu: Vec<DenseLu>,
    x: Vec<f64>,
    lower: Vec<f64>,
    z: Vec<f64>,
    e: Vec<f64>,
    g: Vec<f64>,
    schur: Option<BandLu>,
}

impl ColumnFactor {
    fn particle_solve(&self, k: usize, v: &mut [f64]) {
        let (nr, nc, m) = (self.nr, self.nc, self.m);
        for s in 0..nr {
            if s > 0 {
                for i in 0..nc {
                    let l = self.lower[(k * nr + s) * nc + i];
                    v[s * m + i] -= l * v[(s - 1) * m + i];
                }
            }
            self.shell_lu[k * nr + s].solve(&mut v[s * m..(s + 1) * m]);
        }
        for s in (0..nr - 1).rev() {
            let xs = &self.x[(k * nr + s) * m * nc..(k * nr + s + 1) * m * nc];
            let (lo, hi) = v.split_at_mut((s + 1) * m);
            let next = &hi[..nc];
            for r in 0..m {
                let mut acc = 0.0;
                for i in 0..nc {
                    acc += xs[r * nc + i] * next[i];
                }
                lo[s * m + r] -= acc;
            }
        }
    }
}

impl LinearSolve for ColumnFactor {
    fn solve(&self, b: &mut [f64]) {
        let (nz, nc, nr, m, bl) = (self.nz, self.nc, self.nr, self.m, self.block);
        let plen = nr * m;
        let mut xb = vec![0.0; nz * nc];
        for k in 0..nz {
            let base = k * bl;
            for s in 0..nr {
                let sb = base + nc + s * m;
                for j in 0..nc - 1 {
                    let bq = b[sb + nc + j];
                    b[sb + j + 1] += self.beta_p * bq;
                    b[sb] -= self.beta_p * self.nu[j] * bq;
                }
            }
            self.particle_solve(k, &mut b[base + nc..base + bl]);
            for i in 0..nc {
                xb[k * nc + i] = b[base + i] - self.e[k * nc + i] * b[base + nc + (nr - 1) * m + i];
            }
        }
        self.schur.as_ref().expect("factored").solve(&mut xb);
        for k in 0..nz {
            let base = k * bl;
            for j in 0..nc {
                let gx = self.g[k * nc + j] * xb[k * nc + j];
                if gx != 0.0 {
                    let zj = &self.z[(k * nc + j) * plen..(k * nc + j + 1) * plen];
                    for (v, zv) in b[base + nc..base + bl].iter_mut().zip(zj) {
                        *v -= gx * zv;
                    }
                }
                b[base + j] = xb[k * nc + j];
            }
        }
    }
}

/// The column model bound to an inlet profile over one integration segment.
/// Time is local: `t = 0` is the segment start, which keeps the integrator's
/// step floor independent of the absolute time.
pub struct ColumnProblem<'a> {
    model: &'a ColumnModel,
    inlet: &'a InletProfile,
    segment: (f64, f64),
    cin: Vec<f64>,
    work_y: Vec<f64>,
    work_f: Vec<f64>,
}

impl<'a> ColumnProblem<'a> {
    pub fn new(model: &'a ColumnModel, inlet: &'a InletProfile, segment: (f64, f64)) -> Self {
        let n = model.dim();
        Self { model, inlet, segment, cin: vec![0.0; model.nc], work_y: vec![0.0; n], work_f: vec![0.0; n] }
    }
}

fn perturbation(y: f64) -> f64 {
    let d = f64::EPSILON.sqrt() * y.abs().max(1.0);
    // Make the step exactly representable.
    (y + d) - y
}

impl StiffProblem for ColumnProblem<'_> {
    type Jacobian = ColumnJacobian;
    type Factor = ColumnFactor;

    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.inlet.eval_segment(self.segment.0 + t, self.segment.0, self.segment.1, &mut self.cin);
        self.model.rhs(&self.cin, y, dy);
    }

    fn jacobian(&mut self, t: f64, y: &[f64], _f: &[f64]) -> ColumnJacobian {
        let md = self.model;
        let (nz, nc, nr, m, b) = (md.nz, md.nc, md.nr, md.m, md.block);
        let mut jac = ColumnJacobian {
            jbb: vec![0.0; nz * nc * 4],
            jbp: vec![0.0; nz * nc],
            jpb: vec![0.0; nz * nc],
            pdiag: vec![0.0; nz * nr * m * m],
            plow: vec![0.0; nz * nr * nc],
            pup: vec![0.0; nz * nr * nc],
        };
        self.inlet.eval_segment(self.segment.0 + t, self.segment.0, self.segment.1, &mut self.cin);
        let mut yp = std::mem::take(&mut self.work_y);
        let mut f1 = std::mem::take(&mut self.work_f);
        yp.copy_from_slice(y);
        let mut f0 = vec![0.0; y.len()];
        md.rhs_impl(&self.cin, y, &mut f0, false);

        let reach: i64 = if md.bulk_colors() == 4 { 2 } else { 1 };
        let colors = md.bulk_colors();
        for g in 0..colors {
            for k in (g..nz).step_by(colors) {
                for i in 0..nc {
                    let idx = k * b + i;
                    yp[idx] = y[idx] + perturbation(y[idx]);
                }
            }
            md.rhs_impl(&self.cin, &yp, &mut f1, false);
            for k in (g..nz).step_by(colors) {
                for i in 0..nc {
                    let idx = k * b + i;
                    let h = yp[idx] - y[idx];
                    yp[idx] = y[idx];
                    for d in -1..=reach {
                        let row = k as i64 + d;
                        if row < 0 || row >= nz as i64 {
                            continue;
                        }
                        let r = row as usize;
                        let ri = r * b + i;
                        jac.jbb[(r * nc + i) * 4 + (2 - d) as usize] = (f1[ri] - f0[ri]) / h;
                    }
                    let pr = k * b + nc + (nr - 1) * m + i;
                    jac.jpb[k * nc + i] = (f1[pr] - f0[pr]) / h;
                }
            }
        }

        let shell_colors = nr.min(3);
        for g in 0..shell_colors {
            for l in 0..m {
                for k in 0..nz {
                    for s in (g..nr).step_by(shell_colors) {
                        let idx = k * b + nc + s * m + l;
                        yp[idx] = y[idx] + perturbation(y[idx]);
                    }
                }
                md.rhs_impl(&self.cin, &yp, &mut f1, false);
                for k in 0..nz {
                    for s in (g..nr).step_by(shell_colors) {
                        let sb = k * b + nc + s * m;
                        let idx = sb + l;
                        let h = yp[idx] - y[idx];
                        yp[idx] = y[idx];
                        let blk = (k * nr + s) * m * m;
                        for r in 0..m {
                            jac.pdiag[blk + r * m + l] = (f1[sb + r] - f0[sb + r]) / h;
                        }
                        if l < nc {
                            if s > 0 {
                                let row = sb - m + l;
                                jac.pup[(k * nr + s - 1) * nc + l] = (f1[row] - f0[row]) / h;
                            }
                            if s + 1 < nr {
                                let row = sb + m + l;
                                jac.plow[(k * nr + s + 1) * nc + l] = (f1[row] - f0[row]) / h;
                            }
                            if s + 1 == nr {
                                let row = k * b + l;
                                jac.jbp[k * nc + l] = (f1[row] - f0[row]) / h;
                            }
                        }
                    }
                }
            }
        }
        self.work_y = yp;
        self.work_f = f1;
        jac
    }

    fn factor(&mut self, jac: &ColumnJacobian, c: f64) -> Option<ColumnFactor> {
        let md = self.model;
        let (nz, nc, nr, m) = (md.nz, md.nc, md.nr, md.m);
        let plen = nr * m;
        let mut shell_lu = Vec::with_capacity(nz * nr);
        let mut x = vec![0.0; nz * nr * m * nc];
        let lower: Vec<f64> = jac.plow.iter().map(|v| -c * v).collect();
        for k in 0..nz {
            for s in 0..nr {
                let blk = (k * nr + s) * m * m;
                let mut a: Vec<f64> = jac.pdiag[blk..blk + m * m].iter().map(|v| -c * v).collect();
                for r in 0..m {
                    a[r * m + r] += 1.0;
                }
                for j in 0..md.np {
                    a[(j + 1) * m + nc + j] += md.beta_p;
                    a[nc + j] -= md.beta_p * md.kin.nu[j];
                }
                if s > 0 {
                    let xp = &x[(k * nr + s - 1) * m * nc..(k * nr + s) * m * nc];
                    for i in 0..nc {
                        let l = lower[(k * nr + s) * nc + i];
                        for j in 0..nc {
                            a[i * m + j] -= l * xp[i * nc + j];
                        }
                    }
                }
                let lu = DenseLu::factor(m, a)?;
                if s + 1 < nr {
                    let xs = &mut x[(k * nr + s) * m * nc..(k * nr + s + 1) * m * nc];
                    let mut col = vec![0.0; m];
                    for i in 0..nc {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        col[i] = -c * jac.pup[(k * nr + s) * nc + i];
                        lu.solve(&mut col);
                        for r in 0..m {
                            xs[r * nc + i] = col[r];
                        }
                    }
                }
                shell_lu.push(lu);
            }
        }

        let mut fac = ColumnFactor {
            nz,
            nr,
            nc,
            m,
            block: md.block,
            beta_p: md.beta_p,
            nu: md.kin.nu.clone(),
            shell_lu,
            x,
            lower,
            z: vec![0.0; nz * nc * plen],
            e: jac.jbp.iter().map(|v| -c * v).collect(),
            g: jac.jpb.iter().map(|v| -c * v).collect(),
            schur: None,
        };
        for k in 0..nz {
            for j in 0..nc {
                let mut v = vec![0.0; plen];
                v[(nr - 1) * m + j] = 1.0;
                fac.particle_solve(k, &mut v);
                fac.z[(k * nc + j) * plen..(k * nc + j + 1) * plen].copy_from_slice(&v);
            }
        }

        let reach = if md.bulk_colors() == 4 { 2 } else { 1 };
        let mut s = BandMatrix::zeros(nz * nc, reach * nc, nc);
        for k in 0..nz {
            for i in 0..nc {
                let row = k * nc + i;
                for d in -(reach as i64)..=1 {
                    let col = k as i64 + d;
                    if col < 0 || col >= nz as i64 {
                        continue;
                    }
                    let mut v = -c * jac.jbb[row * 4 + (d + 2) as usize];
                    if d == 0 {
                        v += 1.0;
                    }
                    s.add(row, col as usize * nc + i, v);
                }
                let ei = fac.e[row];
                if ei != 0.0 {
                    for j in 0..nc {
                        let w = fac.z[(k * nc + j) * plen + (nr - 1) * m + i];
                        s.add(row, k * nc + j, -ei * w * fac.g[k * nc + j]);
                    }
                }
            }
        }
        fac.schur = Some(s.factor()?);
        Some(fac)
    }
}

/// Moles held in the column per component.
pub fn holdup(state: &ColumnState, config: &SystemConfig) -> Vec<f64> {
    ColumnModel::new(config, state.nz(), state.nr(), 1.0, Convection::Upwind1).holdup(state)
}

/// Summary of one `integrate_column` call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub segments: usize,
    pub bdf: BdfStats,
}

impl IntegrationStats {
    fn absorb(&mut self, s: BdfStats) {
        self.segments += 1;
        self.bdf.steps += s.steps;
        self.bdf.rhs_evals += s.rhs_evals;
        self.bdf.jacobians += s.jacobians;
        self.bdf.factorizations += s.factorizations;
        self.bdf.rejected += s.rejected;
    }
}

/// Advances `state` over the inlet's interval and samples the outlet.
pub fn integrate_column(
    state: &ColumnState,
    inlet: &InletProfile,
    velocity: f64,
    settings: &SolverSettings,
    config: &SystemConfig,
) -> Result<(ColumnState, OutletRecord), ColumnError> {
    integrate_column_with_stats(state, inlet, velocity, settings, config).map(|(s, r, _)| (s, r))
}

pub fn integrate_column_with_stats(
    state: &ColumnState,
    inlet: &InletProfile,
    velocity: f64,
    settings: &SolverSettings,
    config: &SystemConfig,
) -> Result<(ColumnState, OutletRecord, IntegrationStats), ColumnError> {
    settings.validate()?;
    if !(velocity > 0.0 && velocity.is_finite()) {
        return Err(ColumnError::Velocity(velocity));
    }
    let nc = config.ncomp();
    if inlet.ncomp() != nc {
        return Err(ColumnError::InletWidth { expected: nc, found: inlet.ncomp() });
    }
    let (t0, t1) = (inlet.t_start(), inlet.t_end());
    if (state.t - t0).abs() > 1e-9 * t0.abs().max(1.0) {
        return Err(ColumnError::TimeMismatch { state: state.t, inlet: t0 });
    }
    if !state.is_finite() {
        return Err(ColumnError::NonFinite);
    }

    let model = ColumnModel::new(config, state.nz(), state.nr(), velocity, settings.convection);
    let mut y = model.pack(state);
    let dt = inlet.sample_dt();
    let n = sample_count(t0, t1, dt);
    let mut record = OutletRecord::zeros("outlet", t0, dt, nc, n);
    let out_idx = model.outlet_indices();
    let time = |j: usize| (t0 + j as f64 * dt).min(t1);
    let slack = 1e-9 * t1.abs().max(1.0);

    let mut bounds = vec![t0];
    bounds.extend(inlet.restart_times());
    bounds.push(t1);

    let mut next = 0;
    let mut stats = IntegrationStats::default();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        while next < n && time(next) <= a + slack {
            for (i, &idx) in out_idx.iter().enumerate() {
                record.row_mut(next)[i] = y[idx];
            }
            next += 1;
        }
        let mut problem = ColumnProblem::new(&model, inlet, (a, b));
        let mut bdf = Bdf::new(&mut problem, 0.0, &y, b - a, settings.bdf());
        while !bdf.finished() {
            bdf.step(&mut problem).map_err(|e| e.shifted(a))?;
            let reached = if bdf.finished() { b + slack } else { a + bdf.t() };
            while next < n && time(next) <= reached {
                let ts = (time(next) - a).clamp(bdf.t_old(), bdf.t());
                bdf.dense(ts, &out_idx, record.row_mut(next));
                next += 1;
            }
        }
        y.copy_from_slice(bdf.y());
        stats.absorb(bdf.stats());
    }
    while next < n {
        for (i, &idx) in out_idx.iter().enumerate() {
            record.row_mut(next)[i] = y[idx];
        }
        next += 1;
    }

    let mut out = model.unpack(&y, t1);
    if !out.is_finite() {
        return Err(ColumnError::NonFinite);
    }
    let free = out.min_free_ligand(config.binding());
    let lambda = config.binding().ionic_capacity;
    if free < NEGATIVE_HARD_LIMIT * lambda {
        return Err(ColumnError::Capacity(free));
    }
    clamp_negatives(out.c.iter_mut().chain(out.cp.iter_mut()), t1)?;
    clamp_negatives(out.q.chunks_mut(nc).flat_map(|q| q[1..].iter_mut()), t1)?;
    let mut rec_vals: Vec<f64> = record.data().to_vec();
    clamp_negatives(rec_vals.iter_mut(), t1)?;
    let record = OutletRecord::from_rows("outlet", t0, dt, nc, rec_vals);
    Ok((out, record, stats))
}

fn clamp_negatives<'a>(values: impl Iterator<Item = &'a mut f64>, t: f64) -> Result<(), ColumnError> {
    let mut worst = 0.0f64;
    for v in values {
        if *v < NEGATIVE_TOLERANCE {
            if *v < NEGATIVE_HARD_LIMIT {
                return Err(ColumnError::Negative { value: *v, t });
            }
            worst = worst.min(*v);
            *v = 0.0;
        }
    }
    if worst < 0.0 {
        log::warn!("clamped negative concentrations down to {worst:e} at t = {t}");
    }
    Ok(())
}

/// Debug dump: `z_index,r_index,component,phase,value` (bulk rows leave `r_index` empty).
pub fn write_state_csv<W: Write>(state: &ColumnState, labels: &[String], mut w: W) -> io::Result<()> {
    writeln!(w, "z_index,r_index,component,phase,value")?;
    for z in 0..state.nz() {
        for i in 0..state.ncomp() {
            writeln!(w, "{z},,{},bulk,{:?}", labels[i], state.bulk(z, i))?;
        }
        for r in 0..state.nr() {
            for i in 0..state.ncomp() {
                writeln!(w, "{z},{r},{},pore,{:?}", labels[i], state.pore(z, r, i))?;
            }
            for i in 0..state.ncomp() {
                writeln!(w, "{z},{r},{},bound,{:?}", labels[i], state.bound(z, r, i))?;
            }
        }
    }
    Ok(())
}
