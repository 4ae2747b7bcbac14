//! Mode dispatch and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use smbforge_core::batch::{run_batch, write_chromatogram_csv};
use smbforge_core::indicators::{batch_performance, run_to_css, write_report_csv, BatchOutcome, CssOutcome};
use smbforge_core::model::SystemConfig;
use smbforge_core::network::{build_scheme, initialize_smb, write_withdrawals_csv, ProcessScheme};
use smbforge_core::profile::OutletRecord;
use smbforge_optim::{mcmc_sample, pareto_front, write_chain_csv, write_pareto_csv, ChainResult, Evaluation};

use crate::config::{Mode, Process, RunConfig, SelfTest};

/// Where and how a run executes; the seed is already folded into the config.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub threads: usize,
    /// Path the configuration was read from, for the manifest.
    pub config_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub mode: String,
    pub config: Option<PathBuf>,
    pub files: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    pub resolved_config: RunConfig,
    pub summary: Value,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }
}

fn labels(cfg: &RunConfig) -> Vec<String> {
    cfg.system.components.names().to_vec()
}

pub struct BatchRun {
    pub record: OutletRecord,
    pub outcome: Option<BatchOutcome>,
}

/// Runs the batch protocol and pools it when a pooling block is given.
pub fn simulate_batch(cfg: &RunConfig, sys: &SystemConfig) -> Result<BatchRun> {
    let protocol = cfg.protocol.as_ref().ok_or_else(|| anyhow!("no protocol block"))?;
    let record = run_batch(protocol, sys, &cfg.solver).context("batch simulation")?;
    let outcome = match &cfg.pooling {
        Some(p) => {
            let target = cfg.component_index(&p.component)?;
            Some(batch_performance(&record, protocol, sys, target, p.mu).context("batch indicators")?)
        }
        None => None,
    };
    Ok(BatchRun { record, outcome })
}

pub struct SmbRun {
    pub scheme: ProcessScheme,
    pub outcome: CssOutcome,
}

/// Runs the SMB scheme from clean columns to cyclic steady state.
pub fn simulate_smb(cfg: &RunConfig, sys: &SystemConfig, history_limit: Option<usize>) -> Result<SmbRun> {
    let spec = cfg.scheme.as_ref().ok_or_else(|| anyhow!("no scheme block"))?;
    let scheme = build_scheme(spec, sys.proteins())?;
    let initial = initialize_smb(&scheme, sys, &cfg.solver)?;
    let mut css = cfg.css.clone();
    if history_limit.is_some() {
        css.history_limit = history_limit;
    }
    let outcome = run_to_css(initial, &scheme, &cfg.solver, &css, sys).context("SMB simulation")?;
    if !outcome.converged {
        log::warn!("no cyclic steady state after {} switches (distance {:e})", outcome.switches, outcome.distance);
    }
    Ok(SmbRun { scheme, outcome })
}

/// Indicators of one parameter vector for the optimizer.
pub fn evaluate(cfg: &RunConfig, theta: &[f64]) -> Result<Evaluation> {
    let opt = cfg.optimization.as_ref().ok_or_else(|| anyhow!("no optimization block"))?;
    if let Some(SelfTest::Gaussian) = opt.self_test {
        let r2: f64 = theta.iter().map(|v| v * v).sum();
        return Ok(Evaluation { purity: vec![1.0; opt.problem.epsilon.len()], yield_value: -r2, converged: true, switches: None });
    }
    let cfg = cfg.with_parameters(theta)?;
    let sys = cfg.system_config()?;
    match cfg.process()? {
        Process::Batch => {
            let run = simulate_batch(&cfg, &sys)?;
            let target = cfg.component_index(&cfg.pooling.as_ref().unwrap().component)?;
            let outcome = run.outcome.unwrap();
            Ok(Evaluation {
                purity: vec![outcome.purity(target)],
                yield_value: outcome.yield_of(target),
                converged: true,
                switches: None,
            })
        }
        Process::Smb => {
            let run = simulate_smb(&cfg, &sys, Some(2))?;
            let target = cfg.target.as_ref().unwrap();
            let i = cfg.component_index(&target.component)? - 1;
            let rec = run
                .outcome
                .performance
                .iter()
                .find(|r| r.node == target.node)
                .ok_or_else(|| anyhow!("no indicators for {}", target.node))?;
            Ok(Evaluation {
                purity: vec![rec.purity[i]],
                yield_value: rec.yields[i],
                converged: run.outcome.converged,
                switches: Some(run.outcome.switches),
            })
        }
    }
}

fn run_simulate_batch(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let sys = cfg.system_config()?;
    let run = simulate_batch(cfg, &sys)?;
    let labels = labels(cfg);
    let window = run.outcome.as_ref().and_then(|o| o.window.as_ref());
    out.csv("chromatogram.csv", |w| write_chromatogram_csv(&run.record, &labels, window, w))?;
    let mut summary = json!({ "samples": run.record.len() });
    if let (Some(outcome), Some(pool)) = (&run.outcome, &cfg.pooling) {
        let records: Vec<_> = outcome.record.iter().cloned().collect();
        out.csv("indicators.csv", |w| write_report_csv(&records, &labels, None, w))?;
        let target = cfg.component_index(&pool.component)?;
        summary["target"] = json!(pool.component);
        summary["purity"] = json!(outcome.purity(target));
        summary["yield"] = json!(outcome.yield_of(target));
        summary["pool_window"] = json!(outcome.window);
    }
    Ok(summary)
}

fn run_simulate_smb(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let sys = cfg.system_config()?;
    let run = simulate_smb(cfg, &sys, None)?;
    let labels = labels(cfg);
    let o = &run.outcome;
    out.csv("withdrawals.csv", |w| write_withdrawals_csv(&o.state.history, &labels, w))?;
    out.csv("css.csv", |w| {
        use std::io::Write;
        writeln!(w, "switch,distance")?;
        for (k, d) in o.distances.iter().enumerate() {
            writeln!(w, "{},{d:?}", k + 2)?;
        }
        Ok(())
    })?;
    out.csv("indicators.csv", |w| write_report_csv(&o.performance, &labels, Some(o.switches), w))?;
    let mut summary = json!({
        "switches": o.switches,
        "converged": o.converged,
        "css_distance": o.distance,
        "product_ports": run.scheme.product_ports(),
    });
    if let Some(t) = &cfg.target {
        let i = cfg.component_index(&t.component)? - 1;
        if let Some(r) = o.performance.iter().find(|r| r.node == t.node) {
            summary["target"] = json!({ "node": t.node, "component": t.component, "purity": r.purity[i], "yield": r.yields[i] });
        }
    }
    Ok(summary)
}

fn run_chains(cfg: &RunConfig, threads: usize) -> Result<Vec<ChainResult>> {
    let opt = cfg.optimization.as_ref().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let chains: Vec<Result<ChainResult>> = pool.install(|| {
        (0..opt.chains as u64)
            .into_par_iter()
            .map(|k| {
                let f = |theta: &[f64]| evaluate(cfg, theta).map_err(|e| format!("{e:#}"));
                let chain = mcmc_sample(&opt.problem, f, cfg.seed.wrapping_add(k))?;
                log::info!(
                    "chain {k}: {} iterations, {} simulations, acceptance {:.3}",
                    chain.iterations,
                    chain.simulations,
                    chain.acceptance_rate()
                );
                Ok(chain)
            })
            .collect()
    });
    chains.into_iter().collect()
}

fn run_optimize(cfg: &RunConfig, out: &mut Outputs, threads: usize) -> Result<Value> {
    let opt = cfg.optimization.as_ref().unwrap();
    let chains = run_chains(cfg, threads)?;
    let mut points = Vec::new();
    let mut thetas = Vec::new();
    let mut per_chain = Vec::new();
    for (k, chain) in chains.iter().enumerate() {
        let name = if chains.len() == 1 { "chain.csv".to_string() } else { format!("chain_{k}.csv") };
        out.csv(&name, |w| write_chain_csv(&chain.samples, w))?;
        for s in chain.retained() {
            if let Some(p) = s.objectives() {
                points.push(p);
                thetas.push(s.theta.clone());
            }
        }
        let best = chain
            .retained()
            .filter(|s| s.feasible(&opt.problem.epsilon))
            .filter_map(|s| s.objectives().map(|o| (o, s.theta.clone())))
            .max_by(|a, b| a.0 .1.total_cmp(&b.0 .1));
        per_chain.push(json!({
            "seed": cfg.seed.wrapping_add(k as u64),
            "iterations": chain.iterations,
            "acceptance_rate": chain.acceptance_rate(),
            "move_rate": chain.move_rate(),
            "simulations": chain.simulations,
            "geweke_z": chain.geweke_z,
            "stopped_early": chain.stopped_early,
            "best_feasible": best.map(|((p, y), t)| json!({ "purity": p, "yield": y, "theta": t })),
        }));
    }
    let front = pareto_front(&points);
    out.csv("pareto.csv", |w| write_pareto_csv(&front, &points, &thetas, w))?;
    let names: Vec<&str> = opt.problem.parameters.iter().map(|p| p.name.as_str()).collect();
    Ok(json!({ "parameters": names, "chains": per_chain, "pareto_points": front.len() }))
}

/// Chain positions after each iteration, rebuilt from a chain log.
pub fn read_chain_states(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading chain {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| anyhow!("chain file has no {name} column"));
    let iter_col = col("iter")?;
    let acc_col = col("accepted")?;
    let theta_cols: Vec<usize> = (0..dim).map(|k| col(&format!("theta_{k}"))).collect::<Result<_>>()?;
    if headers.iter().any(|h| h == format!("theta_{dim}")) {
        bail!("chain has more than {dim} parameters");
    }
    let mut states: Vec<Vec<f64>> = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let field = |c: usize| row.get(c).ok_or_else(|| anyhow!("chain row {} is short", line + 2));
        let iter: usize = field(iter_col)?.parse().with_context(|| format!("chain row {}", line + 2))?;
        let accepted = field(acc_col)? == "1";
        let theta: Vec<f64> = theta_cols
            .iter()
            .map(|&c| field(c)?.parse::<f64>().with_context(|| format!("chain row {}", line + 2)))
            .collect::<Result<_>>()?;
        match iter.cmp(&states.len()) {
            std::cmp::Ordering::Equal => {
                let prev = states.last().cloned();
                states.push(if accepted || prev.is_none() { theta } else { prev.unwrap() });
            }
            std::cmp::Ordering::Less if iter + 1 == states.len() => {
                if accepted {
                    *states.last_mut().unwrap() = theta;
                }
            }
            _ => bail!("chain row {} has iteration {iter} out of order", line + 2),
        }
    }
    if states.is_empty() {
        bail!("chain {} is empty", path.display());
    }
    Ok(states)
}

fn run_predictive(cfg: &RunConfig, out: &mut Outputs, threads: usize) -> Result<Value> {
    let opt = cfg.optimization.as_ref().unwrap();
    let pred = cfg.predictive.as_ref().unwrap();
    if pred.draws == 0 {
        return Ok(json!({ "draws": 0 }));
    }
    let states = read_chain_states(&pred.chain, opt.problem.dim())?;
    let iterations = states.len() - 1;
    let burn = (pred.burn_in.unwrap_or(opt.problem.burn_in) * iterations as f64).floor() as usize;
    let pool_states = &states[(burn + 1).min(iterations)..];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = (0..pred.draws).map(|_| rng.random_range(0..pool_states.len())).collect();

    let process = cfg.process()?;
    let threadpool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let members: Vec<Result<(Vec<OutletRecord>, Evaluation)>> = threadpool.install(|| {
        picks
            .par_iter()
            .map(|&i| {
                let member = cfg.with_parameters(&pool_states[i])?;
                let sys = member.system_config()?;
                match process {
                    Process::Batch => {
                        let run = simulate_batch(&member, &sys)?;
                        let target = member.component_index(&member.pooling.as_ref().unwrap().component)?;
                        let o = run.outcome.unwrap();
                        let e = Evaluation { purity: vec![o.purity(target)], yield_value: o.yield_of(target), converged: true, switches: None };
                        Ok((vec![run.record], e))
                    }
                    Process::Smb => {
                        let run = simulate_smb(&member, &sys, Some(2))?;
                        let target = member.target.as_ref().unwrap();
                        let c = member.component_index(&target.component)? - 1;
                        let rec = run.outcome.performance.iter().find(|r| r.node == target.node).unwrap();
                        let e = Evaluation {
                            purity: vec![rec.purity[c]],
                            yield_value: rec.yields[c],
                            converged: run.outcome.converged,
                            switches: Some(run.outcome.switches),
                        };
                        let last = run.outcome.state.history.last().unwrap();
                        let t0 = last.t_start;
                        let recs = last.withdrawals.iter().map(|w| w.shifted(w.t_start() - t0)).collect();
                        Ok((recs, e))
                    }
                }
            })
            .collect()
    });
    let members: Vec<(Vec<OutletRecord>, Evaluation)> = members.into_iter().collect::<Result<_>>()?;

    let labels = labels(cfg);
    out.csv("members.csv", |w| {
        use std::io::Write;
        let mut header = String::from("member,chain_state");
        for k in 0..opt.problem.dim() {
            header.push_str(&format!(",theta_{k}"));
        }
        header.push_str(",purity,yield,css_switches");
        writeln!(w, "{header}")?;
        for (m, ((_, e), &i)) in members.iter().zip(&picks).enumerate() {
            let mut line = format!("{m},{}", burn + 1 + i);
            for v in &pool_states[i] {
                line.push_str(&format!(",{v:?}"));
            }
            let k = e.switches.map(|k| k.to_string()).unwrap_or_default();
            line.push_str(&format!(",{:?},{:?},{k}", e.purity[0], e.yield_value));
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    out.csv("ensemble.csv", |w| {
        use std::io::Write;
        writeln!(w, "member,time_s,node,component,conc_mol_m3")?;
        for (m, (recs, _)) in members.iter().enumerate() {
            for rec in recs {
                for j in 0..rec.len() {
                    for (i, label) in labels.iter().enumerate() {
                        writeln!(w, "{m},{:?},{},{label},{:?}", rec.time(j), rec.node, rec.get(j, i))?;
                    }
                }
            }
        }
        Ok(())
    })?;
    let purities: Vec<f64> = members.iter().map(|(_, e)| e.purity[0]).collect();
    let yields: Vec<f64> = members.iter().map(|(_, e)| e.yield_value).collect();
    Ok(json!({ "draws": pred.draws, "pool": pool_states.len(), "purity": purities, "yield": yields }))
}

/// Runs `mode` and writes its outputs, the resolved configuration and the
/// manifest into `opts.out`.
pub fn run(mode: Mode, cfg: &RunConfig, opts: &RunOptions) -> Result<Manifest> {
    cfg.validate_for(mode)?;
    let started = Instant::now();
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let mut out = Outputs { dir: opts.out.clone(), files: Vec::new() };
    let threads = opts.threads.max(1);
    let manifest_only = mode == Mode::PredictiveCheck && cfg.predictive.as_ref().is_some_and(|p| p.draws == 0);
    if !manifest_only {
        out.write("resolved_config.json", to_json(cfg)?.as_bytes())?;
    }
    let summary = match mode {
        Mode::SimulateBatch => run_simulate_batch(cfg, &mut out)?,
        Mode::SimulateSmb => run_simulate_smb(cfg, &mut out)?,
        Mode::Optimize => run_optimize(cfg, &mut out, threads)?,
        Mode::PredictiveCheck => run_predictive(cfg, &mut out, threads)?,
    };
    let mut manifest = Manifest {
        mode: mode.to_string(),
        config: opts.config_path.clone(),
        files: out.files.clone(),
        seed: cfg.seed,
        threads,
        wall_time_s: 0.0,
        resolved_config: cfg.clone(),
        summary,
    };
    manifest.files.push("manifest.json".into());
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    out.write("manifest.json", to_json(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Machine-readable failure report written next to the outputs.
pub fn error_report(mode: Mode, err: &anyhow::Error) -> Value {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    json!({ "status": "error", "mode": mode.to_string(), "error": chain.first(), "causes": &chain[1..] })
}
