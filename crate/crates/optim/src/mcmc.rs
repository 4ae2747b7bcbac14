//! Random-walk Metropolis with one delayed-rejection stage and an adaptive
//! proposal covariance, run on the likelihood `exp(-H/2)` of the penalised
//! objective under an increasing penalty schedule.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geweke::geweke;
use crate::objective::{log_likelihood, penalty_objective};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("parameter {name}: bounds [{lower}, {upper}] are not increasing")]
    Bounds { name: String, lower: f64, upper: f64 },
    #[error("parameter {name}: value {value} lies outside [{lower}, {upper}]")]
    Value { name: String, value: f64, lower: f64, upper: f64 },
    #[error("invalid optimization settings: {0}")]
    Settings(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameter {
    /// What the entry sets, interpreted by the caller.
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    /// Hold the entry at this value instead of sampling it.
    #[serde(default)]
    pub fixed: Option<f64>,
    /// Starting value; the box centre by default.
    #[serde(default)]
    pub initial: Option<f64>,
}

impl Parameter {
    pub fn start(&self) -> f64 {
        self.fixed.or(self.initial).unwrap_or(0.5 * (self.lower + self.upper))
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    /// Initial random-walk step as a fraction of each box width.
    pub proposal_scale: f64,
    /// Step shrink factor of the delayed-rejection stage.
    pub dr_scale: f64,
    /// Iterations before the covariance adapts; `10·d` when unset.
    pub adapt_start: Option<usize>,
    /// Added to `H` when the evaluation did not reach steady state.
    pub nonconverged_penalty: f64,
    /// Stop once `|z|` of the post-burn-in objective trace falls below this.
    pub geweke_stop: Option<f64>,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { proposal_scale: 0.05, dr_scale: 0.25, adapt_start: None, nonconverged_penalty: 10.0, geweke_stop: Some(1e-4) }
    }
}

fn default_sigma() -> Vec<f64> {
    (0..5).map(|k| 10f64.powi(k)).collect()
}

fn default_burn_in() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationProblem {
    pub parameters: Vec<Parameter>,
    /// Purity thresholds, one per constrained target.
    pub epsilon: Vec<f64>,
    /// Penalty factors, each used for an equal share of the iterations.
    #[serde(default = "default_sigma")]
    pub sigma: Vec<f64>,
    pub samples: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default)]
    pub sampler: SamplerSettings,
}

impl OptimizationProblem {
    pub fn validate(&self) -> Result<(), ProblemError> {
        for p in &self.parameters {
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return Err(ProblemError::Bounds { name: p.name.clone(), lower: p.lower, upper: p.upper });
            }
            for v in [p.fixed, p.initial].into_iter().flatten() {
                if !(v >= p.lower && v <= p.upper) {
                    return Err(ProblemError::Value { name: p.name.clone(), value: v, lower: p.lower, upper: p.upper });
                }
            }
        }
        if self.parameters.iter().all(|p| p.fixed.is_some()) {
            return Err(ProblemError::Settings("no free parameter".into()));
        }
        if self.epsilon.iter().any(|e| !(*e >= 0.0 && *e < 1.0)) {
            return Err(ProblemError::Settings(format!("thresholds {:?} must lie in [0, 1)", self.epsilon)));
        }
        if self.sigma.is_empty() || !(self.sigma[0] > 0.0) || self.sigma.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ProblemError::Settings(format!("penalty schedule {:?} must increase from a positive start", self.sigma)));
        }
        if self.samples == 0 {
            return Err(ProblemError::Settings("need at least one sample".into()));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < 1.0) {
            return Err(ProblemError::Settings(format!("burn-in fraction {} must lie in [0, 1)", self.burn_in)));
        }
        let s = &self.sampler;
        if !(s.proposal_scale > 0.0 && s.dr_scale > 0.0 && s.dr_scale < 1.0 && s.nonconverged_penalty >= 0.0) {
            return Err(ProblemError::Settings(format!("bad sampler settings {s:?}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.parameters.len()
    }

    pub fn burn_in_iterations(&self) -> usize {
        (self.burn_in * self.samples as f64).floor() as usize
    }

    /// Penalty factor in force at iteration `iter` (1-based; 0 is the start point).
    pub fn sigma_at(&self, iter: usize) -> f64 {
        let stage_len = self.samples.div_ceil(self.sigma.len()).max(1);
        let stage = (iter.saturating_sub(1) / stage_len).min(self.sigma.len() - 1);
        self.sigma[stage]
    }
}

/// Indicators returned by one process simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Target purities, in the order of the thresholds.
    pub purity: Vec<f64>,
    pub yield_value: f64,
    pub converged: bool,
    /// Switches simulated to reach steady state, for SMB evaluations.
    pub switches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub iter: usize,
    /// 1 for the first proposal of an iteration, 2 for the delayed-rejection one.
    pub stage: u8,
    pub theta: Vec<f64>,
    pub h: f64,
    pub log_l: f64,
    pub sigma: f64,
    pub evaluation: Option<Evaluation>,
    pub accepted: bool,
    pub burn_in: bool,
}

impl ChainSample {
    /// `(purity of the first target, yield)` when the evaluation succeeded.
    pub fn objectives(&self) -> Option<(f64, f64)> {
        self.evaluation.as_ref().and_then(|e| e.purity.first().map(|p| (*p, e.yield_value)))
    }

    pub fn feasible(&self, epsilon: &[f64]) -> bool {
        self.evaluation.as_ref().is_some_and(|e| e.purity.iter().zip(epsilon).all(|(p, eps)| p >= eps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    /// Every evaluation in the order made, the start point first.
    pub samples: Vec<ChainSample>,
    /// Chain position after each iteration, the start point first.
    pub states: Vec<Vec<f64>>,
    /// Objective of each chain position under the penalty in force.
    pub state_h: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub burn_in: usize,
    /// Simulations actually run; repeated points come from the cache.
    pub simulations: usize,
    pub geweke_z: Option<f64>,
    pub stopped_early: bool,
}

impl ChainResult {
    /// Accepted proposals over proposals made, delayed-rejection stages
    /// included; this is the rate seen in the chain log.
    pub fn acceptance_rate(&self) -> f64 {
        let proposals = self.samples.len().saturating_sub(1);
        if proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / proposals as f64
        }
    }

    /// Iterations that moved the chain.
    pub fn move_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }

    /// Post-burn-in evaluations with indicators, for Pareto extraction.
    pub fn retained(&self) -> impl Iterator<Item = &ChainSample> {
        self.samples.iter().filter(|s| !s.burn_in && s.evaluation.is_some())
    }

    /// Chain positions after burn-in.
    pub fn post_burn_in(&self) -> &[Vec<f64>] {
        &self.states[(self.burn_in + 1).min(self.states.len())..]
    }
}

/// Fold `v` into `[lo, hi]` by mirror reflection at the bounds.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let mut t = (v - lo).rem_euclid(2.0 * w);
    if t > w {
        t = 2.0 * w - t;
    }
    lo + t
}

fn key(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

fn acceptance(h_from: f64, h_to: f64) -> f64 {
    if h_to.is_nan() || h_to == f64::INFINITY {
        0.0
    } else if h_from == f64::INFINITY || h_from.is_nan() {
        1.0
    } else {
        (-(h_to - h_from) / 2.0).exp().min(1.0)
    }
}

struct Proposal {
    free: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    chol: DMatrix<f64>,
}

impl Proposal {
    fn draw(&self, x: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_iterator(self.free.len(), (0..self.free.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &self.chol * z;
        let mut y = x.to_vec();
        for (k, &i) in self.free.iter().enumerate() {
            y[i] = reflect(x[i] + scale * step[k], self.lower[i], self.upper[i]);
        }
        y
    }

    /// Log density of a first-stage step from `a` to `b`, up to a constant.
    fn log_q(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| b[i] - a[i]));
        match self.chol.solve_lower_triangular(&d) {
            Some(u) => -0.5 * u.norm_squared(),
            None => f64::NEG_INFINITY,
        }
    }
}

struct Evaluator<'a, F> {
    f: F,
    problem: &'a OptimizationProblem,
    cache: HashMap<Vec<u64>, Option<Evaluation>>,
    simulations: usize,
}

impl<F: FnMut(&[f64]) -> Result<Evaluation, String>> Evaluator<'_, F> {
    fn get(&mut self, theta: &[f64]) -> Option<Evaluation> {
        if let Some(e) = self.cache.get(&key(theta)) {
            return e.clone();
        }
        self.simulations += 1;
        let e = match (self.f)(theta) {
            Ok(e) if e.yield_value.is_finite() && e.purity.iter().all(|p| p.is_finite()) => Some(e),
            Ok(e) => {
                log::warn!("non-finite indicators at {theta:?}: {e:?}");
                None
            }
            Err(msg) => {
                log::warn!("evaluation failed at {theta:?}: {msg}");
                None
            }
        };
        self.cache.insert(key(theta), e.clone());
        e
    }

    fn objective(&self, e: &Option<Evaluation>, sigma: f64) -> f64 {
        match e {
            None => f64::INFINITY,
            Some(e) => {
                let mut h = penalty_objective(&e.purity, e.yield_value, &self.problem.epsilon, sigma);
                if !e.converged {
                    h += self.problem.sampler.nonconverged_penalty;
                }
                h
            }
        }
    }
}

/// Samples the penalised design space. `evaluate` runs one process
/// simulation; its failures become samples with infinite objective.
pub fn mcmc_sample<F>(problem: &OptimizationProblem, evaluate: F, seed: u64) -> Result<ChainResult, ProblemError>
where
    F: FnMut(&[f64]) -> Result<Evaluation, String>,
{
    problem.validate()?;
    if problem.epsilon.is_empty() {
        log::info!("no purity threshold: sampling the yield alone");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = &problem.parameters;
    let free: Vec<usize> = (0..params.len()).filter(|&i| params[i].fixed.is_none()).collect();
    let d = free.len();
    let settings = &problem.sampler;
    let adapt_start = settings.adapt_start.unwrap_or(10 * d);
    let burn_in = problem.burn_in_iterations();
    let widths: Vec<f64> = free.iter().map(|&i| params[i].width()).collect();
    let mut proposal = Proposal {
        free: free.clone(),
        lower: params.iter().map(|p| p.lower).collect(),
        upper: params.iter().map(|p| p.upper).collect(),
        chol: DMatrix::from_diagonal(&DVector::from_iterator(d, widths.iter().map(|w| settings.proposal_scale * w))),
    };
    let mut eval = Evaluator { f: evaluate, problem, cache: HashMap::new(), simulations: 0 };

    let mut x: Vec<f64> = params.iter().map(Parameter::start).collect();
    let mut ex = eval.get(&x);
    let mut sigma = problem.sigma_at(0);
    let mut hx = eval.objective(&ex, sigma);
    let mut samples = vec![ChainSample {
        iter: 0,
        stage: 1,
        theta: x.clone(),
        h: hx,
        log_l: log_likelihood(hx),
        sigma,
        evaluation: ex.clone(),
        accepted: true,
        burn_in: burn_in > 0,
    }];
    let mut states = vec![x.clone()];
    let mut state_h = vec![hx];
    // Running moments of the free coordinates of the chain.
    let mut mean = DVector::from_iterator(d, free.iter().map(|&i| x[i]));
    let mut m2 = DMatrix::<f64>::zeros(d, d);
    let mut accepted = 0;
    let mut stopped_early = false;
    let mut geweke_z = None;
    let check_every = (problem.samples / 10).max(1);

    for iter in 1..=problem.samples {
        let s = problem.sigma_at(iter);
        if s != sigma {
            sigma = s;
            hx = eval.objective(&ex, sigma);
        }
        let in_burn = iter <= burn_in;
        let mut record = |theta: &[f64], stage: u8, h: f64, e: &Option<Evaluation>, acc: bool| {
            samples.push(ChainSample {
                iter,
                stage,
                theta: theta.to_vec(),
                h,
                log_l: log_likelihood(h),
                sigma,
                evaluation: e.clone(),
                accepted: acc,
                burn_in: in_burn,
            });
        };

        let y1 = proposal.draw(&x, 1.0, &mut rng);
        let e1 = eval.get(&y1);
        let h1 = eval.objective(&e1, sigma);
        let a1 = acceptance(hx, h1);
        let u: f64 = rng.random();
        if u < a1 {
            record(&y1, 1, h1, &e1, true);
            (x, ex, hx) = (y1, e1, h1);
            accepted += 1;
        } else {
            record(&y1, 1, h1, &e1, false);
            let y2 = proposal.draw(&x, settings.dr_scale, &mut rng);
            let e2 = eval.get(&y2);
            let h2 = eval.objective(&e2, sigma);
            let a2 = if !h2.is_finite() {
                0.0
            } else if !hx.is_finite() {
                1.0
            } else {
                let back = acceptance(h2, h1);
                if back >= 1.0 {
                    0.0
                } else {
                    let log_ratio = -(h2 - hx) / 2.0 + proposal.log_q(&y2, &y1) - proposal.log_q(&x, &y1)
                        + (1.0 - back).ln()
                        - (1.0 - a1).ln();
                    log_ratio.exp().min(1.0)
                }
            };
            let u: f64 = rng.random();
            let acc = u < a2;
            record(&y2, 2, h2, &e2, acc);
            if acc {
                (x, ex, hx) = (y2, e2, h2);
                accepted += 1;
            }
        }
        states.push(x.clone());
        state_h.push(hx);

        // Welford update of the chain moments; adaptation stops after burn-in.
        let xf = DVector::from_iterator(d, free.iter().map(|&i| x[i]));
        let n = states.len() as f64;
        let delta = &xf - &mean;
        mean += &delta / n;
        m2 += &delta * (&xf - &mean).transpose();
        if iter >= adapt_start && iter <= burn_in.max(adapt_start) {
            let mut cov = &m2 / (n - 1.0) * (2.38f64.powi(2) / d as f64);
            for (k, w) in widths.iter().enumerate() {
                cov[(k, k)] += (1e-6 * w).powi(2);
            }
            if let Some(c) = cov.cholesky() {
                proposal.chol = c.l();
            }
        }

        if let Some(threshold) = settings.geweke_stop {
            let post = state_h.get(burn_in + 1..).unwrap_or_default();
            if iter > burn_in && iter % check_every == 0 && post.len() >= 20 && post.iter().all(|h| h.is_finite()) {
                if let Ok(z) = geweke(post, 0.1, 0.5) {
                    geweke_z = Some(z);
                    if z.abs() < threshold {
                        log::info!("Geweke |z| = {:e} below {threshold:e} at iteration {iter}", z.abs());
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    let iterations = states.len() - 1;
    Ok(ChainResult {
        samples,
        states,
        state_h,
        iterations,
        accepted,
        burn_in,
        simulations: eval.simulations,
        geweke_z,
        stopped_early,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

/// `iter,accepted,theta_0..theta_d,H,logL,purity,yield,css_switches`, one
/// row per evaluation.
pub fn write_chain_csv<W: Write>(samples: &[ChainSample], mut w: W) -> io::Result<()> {
    let d = samples.first().map_or(0, |s| s.theta.len());
    let mut header = String::from("iter,accepted");
    for k in 0..d {
        header.push_str(&format!(",theta_{k}"));
    }
    header.push_str(",H,logL,purity,yield,css_switches");
    writeln!(w, "{header}")?;
    for s in samples {
        let mut line = format!("{},{}", s.iter, u8::from(s.accepted));
        for v in &s.theta {
            line.push_str(&format!(",{v:?}"));
        }
        let obj = s.objectives();
        let switches = s.evaluation.as_ref().and_then(|e| e.switches).map(|k| k.to_string()).unwrap_or_default();
        line.push_str(&format!(
            ",{:?},{:?},{},{},{}",
            s.h,
            s.log_l,
            fmt_opt(obj.map(|o| o.0)),
            fmt_opt(obj.map(|o| o.1)),
            switches
        ));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_stays_in_box() {
        assert_eq!(reflect(1.2, 0.0, 1.0), 0.8);
        assert!((reflect(-0.3, 0.0, 1.0) - 0.3).abs() < 1e-15);
        assert!((reflect(2.5, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(reflect(0.4, 0.0, 1.0), 0.4);
    }

    #[test]
    fn acceptance_rules() {
        assert_eq!(acceptance(1.0, 0.5), 1.0);
        assert!((acceptance(0.0, 2.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(acceptance(0.0, f64::INFINITY), 0.0);
        assert_eq!(acceptance(f64::INFINITY, 3.0), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn acceptance_is_metropolis_ratio(h in -50.0..50.0f64, h2 in -50.0..50.0f64) {
            let a = acceptance(h, h2);
            proptest::prop_assert!((a - (-(h2 - h) / 2.0).exp().min(1.0)).abs() < 1e-15);
            if h2 <= h {
                proptest::prop_assert_eq!(a, 1.0);
            }
        }
    }

    #[test]
    fn schedule_stages() {
        let p = OptimizationProblem {
            parameters: vec![Parameter { name: "x".into(), lower: 0.0, upper: 1.0, fixed: None, initial: None }],
            epsilon: vec![0.5],
            sigma: default_sigma(),
            samples: 100,
            burn_in: 0.5,
            sampler: SamplerSettings::default(),
        };
        p.validate().unwrap();
        assert_eq!(p.sigma_at(1), 1.0);
        assert_eq!(p.sigma_at(20), 1.0);
        assert_eq!(p.sigma_at(21), 10.0);
        assert_eq!(p.sigma_at(100), 1e4);
        let mut bad = p.clone();
        bad.sigma = vec![1.0, 1.0];
        assert!(bad.validate().is_err());
        bad = p.clone();
        bad.parameters[0].upper = 0.0;
        assert!(bad.validate().is_err());
    }
}
