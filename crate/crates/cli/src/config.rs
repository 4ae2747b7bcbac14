//! Run configurations: JSON documents with `"schema": 1`, optionally built
//! from other files listed under `include`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use smbforge_core::batch::BatchProtocol;
use smbforge_core::column::SolverSettings;
use smbforge_core::indicators::CssSettings;
use smbforge_core::model::{SystemConfig, SystemSpec};
use smbforge_core::network::{build_scheme, SchemeSpec};
use smbforge_optim::OptimizationProblem;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SimulateBatch,
    SimulateSmb,
    Optimize,
    PredictiveCheck,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::SimulateBatch => "simulate-batch",
            Mode::SimulateSmb => "simulate-smb",
            Mode::Optimize => "optimize",
            Mode::PredictiveCheck => "predictive-check",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: at `{key}`: {message}")]
    Key { path: PathBuf, key: String, message: String },
    #[error("mode {mode} needs a `{block}` block")]
    Missing { mode: Mode, block: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("include cycle through {0}")]
    Cycle(PathBuf),
}

/// Pooling of a batch chromatogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pooling {
    pub component: String,
    pub mu: f64,
}

/// Withdrawal stream and component an SMB design is judged by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmbTarget {
    pub node: String,
    pub component: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTest {
    /// Standard normal target, `H = |θ|²`; no simulation.
    Gaussian,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optimization {
    /// Parameter names are JSON pointers into this configuration, e.g.
    /// `/protocol/dt1`, unless a self test is selected.
    pub problem: OptimizationProblem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_test: Option<SelfTest>,
    /// Independent chains, seeded `seed`, `seed + 1`, ...
    #[serde(default = "one")]
    pub chains: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictive {
    /// Chain log written by the optimize mode.
    pub chain: PathBuf,
    /// Number of parameter vectors drawn.
    pub draws: usize,
    /// Fraction of the chain discarded before drawing; the problem's burn-in by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub system: SystemSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<BatchProtocol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeSpec>,
    #[serde(default)]
    pub css: CssSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<SmbTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization: Option<Optimization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictive: Option<Predictive>,
    #[serde(default)]
    pub seed: u64,
}

/// Which process an optimization or predictive check simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Process {
    Batch,
    Smb,
}

impl RunConfig {
    pub fn system_config(&self) -> Result<SystemConfig, ConfigError> {
        self.system.validate().map_err(|e| ConfigError::Invalid(format!("system: {e}")))
    }

    pub fn component_index(&self, name: &str) -> Result<usize, ConfigError> {
        match self.system.components.index_of(name) {
            Some(0) => Err(ConfigError::Invalid(format!("component {name} is the salt, not a protein"))),
            Some(i) => Ok(i),
            None => Err(ConfigError::Invalid(format!("unknown component {name}"))),
        }
    }

    pub fn process(&self) -> Result<Process, ConfigError> {
        match (&self.protocol, &self.scheme) {
            (Some(_), None) => Ok(Process::Batch),
            (None, Some(_)) => Ok(Process::Smb),
            (Some(_), Some(_)) => Err(ConfigError::Invalid("give either `protocol` or `scheme`, not both".into())),
            (None, None) => Err(ConfigError::Invalid("need a `protocol` or a `scheme` block".into())),
        }
    }

    fn validate_process(&self, process: Process, mode: Mode, needs_target: bool) -> Result<(), ConfigError> {
        let sys = self.system_config()?;
        self.solver.validate().map_err(|e| ConfigError::Invalid(format!("solver: {e}")))?;
        match process {
            Process::Batch => {
                let p = self.protocol.as_ref().ok_or(ConfigError::Missing { mode, block: "protocol" })?;
                p.validate(&sys).map_err(|e| ConfigError::Invalid(format!("protocol: {e}")))?;
                match &self.pooling {
                    Some(pool) => {
                        self.component_index(&pool.component)?;
                        if !(pool.mu > 0.0) {
                            return Err(ConfigError::Invalid(format!("pooling threshold {} must be positive", pool.mu)));
                        }
                    }
                    None if needs_target => return Err(ConfigError::Missing { mode, block: "pooling" }),
                    None => {}
                }
            }
            Process::Smb => {
                let spec = self.scheme.as_ref().ok_or(ConfigError::Missing { mode, block: "scheme" })?;
                let scheme = build_scheme(spec, sys.proteins()).map_err(|e| ConfigError::Invalid(format!("scheme: {e}")))?;
                match &self.target {
                    Some(t) => {
                        self.component_index(&t.component)?;
                        if !scheme.product_ports().contains(&t.node) {
                            return Err(ConfigError::Invalid(format!(
                                "target node {} is not a product withdrawal; choose one of {:?}",
                                t.node,
                                scheme.product_ports()
                            )));
                        }
                    }
                    None if needs_target => return Err(ConfigError::Missing { mode, block: "target" }),
                    None => {}
                }
            }
        }
        Ok(())
    }

    /// Checks that the blocks `mode` needs are present and valid.
    pub fn validate_for(&self, mode: Mode) -> Result<(), ConfigError> {
        if self.schema != SCHEMA {
            return Err(ConfigError::Invalid(format!("unsupported schema {}, expected {SCHEMA}", self.schema)));
        }
        if let Some(m) = self.mode {
            if m != mode {
                return Err(ConfigError::Invalid(format!("configuration is for mode {m}, not {mode}")));
            }
        }
        match mode {
            Mode::SimulateBatch => {
                if self.protocol.is_none() {
                    return Err(ConfigError::Missing { mode, block: "protocol" });
                }
                self.validate_process(Process::Batch, mode, false)
            }
            Mode::SimulateSmb => {
                if self.scheme.is_none() {
                    return Err(ConfigError::Missing { mode, block: "scheme" });
                }
                self.validate_process(Process::Smb, mode, false)
            }
            Mode::Optimize | Mode::PredictiveCheck => {
                let opt = self.optimization.as_ref().ok_or(ConfigError::Missing { mode, block: "optimization" })?;
                opt.problem.validate().map_err(|e| ConfigError::Invalid(format!("optimization: {e}")))?;
                if opt.chains == 0 {
                    return Err(ConfigError::Invalid("optimization needs at least one chain".into()));
                }
                if mode == Mode::PredictiveCheck {
                    let pred = self.predictive.as_ref().ok_or(ConfigError::Missing { mode, block: "predictive" })?;
                    if let Some(b) = pred.burn_in {
                        if !(0.0..1.0).contains(&b) {
                            return Err(ConfigError::Invalid(format!("predictive burn-in {b} must lie in [0, 1)")));
                        }
                    }
                    if opt.self_test.is_some() {
                        return Err(ConfigError::Invalid("predictive checks need a process, not a self test".into()));
                    }
                }
                if opt.self_test.is_some() {
                    return Ok(());
                }
                if opt.problem.epsilon.len() != 1 {
                    return Err(ConfigError::Invalid("process designs take exactly one purity threshold".into()));
                }
                let process = self.process()?;
                self.validate_process(process, mode, true)?;
                let value = serde_json::to_value(self).expect("configuration serializes");
                for p in &opt.problem.parameters {
                    match value.pointer(&p.name) {
                        Some(Value::Number(_)) => {}
                        Some(_) => return Err(ConfigError::Invalid(format!("parameter {} does not point at a number", p.name))),
                        None => {
                            return Err(ConfigError::Invalid(format!(
                                "parameter {} does not name a configuration entry (use a JSON pointer such as /protocol/dt1)",
                                p.name
                            )))
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Copy with the optimization parameters set to `theta`.
    pub fn with_parameters(&self, theta: &[f64]) -> Result<RunConfig, ConfigError> {
        let opt = self.optimization.as_ref().ok_or(ConfigError::Invalid("no optimization block".into()))?;
        let mut value = serde_json::to_value(self).expect("configuration serializes");
        for (p, &v) in opt.problem.parameters.iter().zip(theta) {
            let slot = value
                .pointer_mut(&p.name)
                .ok_or_else(|| ConfigError::Invalid(format!("parameter {} does not name a configuration entry", p.name)))?;
            *slot = serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| ConfigError::Invalid(format!("{} = {v}", p.name)))?;
        }
        serde_json::from_value(value).map_err(|e| ConfigError::Invalid(format!("parameters give an invalid configuration: {e}")))
    }
}

/// Objects merge key by key, anything else is replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// The document at `path` with its includes merged underneath it, in order.
fn resolve(path: &Path, stack: &mut Vec<PathBuf>) -> Result<Value, ConfigError> {
    let canonical = path.canonicalize().map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    if stack.contains(&canonical) {
        return Err(ConfigError::Cycle(canonical));
    }
    stack.push(canonical.clone());
    let mut doc = read_json(path)?;
    let dir = canonical.parent().map(Path::to_path_buf).unwrap_or_default();
    let includes = match doc.as_object_mut().map(|o| o.remove("include")) {
        Some(Some(Value::Array(list))) => list,
        Some(Some(Value::String(one))) => vec![Value::String(one)],
        Some(None) => Vec::new(),
        Some(Some(_)) => {
            return Err(ConfigError::Key { path: path.to_path_buf(), key: "include".into(), message: "expected a list of paths".into() })
        }
        None => return Err(ConfigError::Invalid(format!("{}: top level must be an object", path.display()))),
    };
    // Relative chain paths refer to the file that names them.
    if let Some(Value::String(chain)) = doc.pointer_mut("/predictive/chain") {
        let p = dir.join(&*chain);
        *chain = p.to_string_lossy().into_owned();
    }
    let mut merged = Value::Object(Map::new());
    for inc in includes {
        let Value::String(rel) = inc else {
            return Err(ConfigError::Key { path: path.to_path_buf(), key: "include".into(), message: "expected a path".into() });
        };
        merge(&mut merged, resolve(&dir.join(rel), stack)?);
    }
    merge(&mut merged, doc);
    stack.pop();
    Ok(merged)
}

/// Loads, merges and type-checks a configuration. Mode-specific checks are
/// left to [`RunConfig::validate_for`].
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let value = resolve(path, &mut Vec::new())?;
    parse_value(path, value)
}

pub fn parse_value(path: &Path, value: Value) -> Result<RunConfig, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Key {
        path: path.to_path_buf(),
        key: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

/// Loads and validates a configuration for `mode`.
pub fn parse_config(path: &Path, mode: Mode) -> Result<RunConfig, ConfigError> {
    let cfg = load_config(path)?;
    cfg.validate_for(mode)?;
    Ok(cfg)
}
