//! Simulated moving bed topologies and their switch-by-switch simulation.
//!
//! A sub-unit is a closed ring of columns. Node `k` is the inlet of column
//! `k`; ports sit on nodes and advance one column downstream at every switch.
//! Zone `k` is the group of columns after port `k`. Within a switch the
//! columns of a ring are solved one after another in flow order, starting at
//! the column behind the first port (a desorbent). The stream closing the ring
//! is the loop-closing outlet stored from the previous switch.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::column::{holdup, integrate_column, ColumnError, SolverSettings};
use crate::model::{fresh_state, ColumnState, ModelError, SystemConfig};
use crate::profile::OutletRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("zone {zone} has non-positive flow rate {flow:e}")]
    ZoneFlow { zone: String, flow: f64 },
    #[error("port {port} has negative flow rate {flow:e}")]
    PortFlow { port: String, flow: f64 },
    #[error("flow balance violated: {0}")]
    Balance(String),
    #[error("invalid scheme: {0}")]
    Scheme(String),
    #[error("bypass node needs the source stream")]
    BypassStream,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("column {column} of {unit} failed in switch {switch}: {source}")]
    Column { unit: String, column: usize, switch: usize, source: ColumnError },
}

/// What happens at a node. Concentration vectors include the salt first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Feed { conc: Vec<f64>, flow: f64 },
    Desorbent { conc: Vec<f64>, flow: f64 },
    Raffinate { flow: f64 },
    Extract { flow: f64 },
    /// Inflow made of another port's withdrawal diluted with buffer.
    BypassDilution {
        source: String,
        source_flow: f64,
        dilute_flow: f64,
        buffer_salt: f64,
        /// Salt level of the diluted stream, used for initialisation and,
        /// when `regulated`, imposed on the stream.
        salt_level: f64,
        regulated: bool,
    },
    None,
}

impl NodeRole {
    pub fn inflow(&self) -> f64 {
        match self {
            NodeRole::Feed { flow, .. } | NodeRole::Desorbent { flow, .. } => *flow,
            NodeRole::BypassDilution { source_flow, dilute_flow, .. } => source_flow + dilute_flow,
            _ => 0.0,
        }
    }

    pub fn outflow(&self) -> f64 {
        match self {
            NodeRole::Raffinate { flow } | NodeRole::Extract { flow } => *flow,
            _ => 0.0,
        }
    }

    pub fn is_withdrawal(&self) -> bool {
        matches!(self, NodeRole::Raffinate { .. } | NodeRole::Extract { .. })
    }

    /// Salt level this port imposes on the zone behind it, if any.
    fn salt_level(&self) -> Option<f64> {
        match self {
            NodeRole::Feed { conc, .. } | NodeRole::Desorbent { conc, .. } => Some(conc[0]),
            NodeRole::BypassDilution { salt_level, .. } => Some(*salt_level),
            _ => None,
        }
    }
}

fn flows_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Mixing balance at a node: the column inlet concentrations from the
/// upstream outlet. Withdrawals only split the flow.
pub fn node_balance(c_out: &[f64], q_up: f64, role: &NodeRole, q_down: f64) -> Result<Vec<f64>, NetworkError> {
    if !(q_down > 0.0) {
        return Err(NetworkError::Balance(format!("downstream flow {q_down:e} is not positive")));
    }
    let expected = q_up + role.inflow() - role.outflow();
    if !flows_match(expected, q_down) {
        return Err(NetworkError::Balance(format!("{q_up:e} in, {q_down:e} out at {role:?}")));
    }
    match role {
        NodeRole::Feed { conc, flow } | NodeRole::Desorbent { conc, flow } => {
            if conc.len() != c_out.len() {
                return Err(NetworkError::Scheme(format!("port stream has {} components", conc.len())));
            }
            Ok(c_out.iter().zip(conc).map(|(c, f)| (c * q_up + f * flow) / q_down).collect())
        }
        NodeRole::BypassDilution { .. } => Err(NetworkError::BypassStream),
        _ => Ok(c_out.to_vec()),
    }
}

/// Bypass stream diluted from `q_source` to `q_target` with buffer of salt
/// level `buffer_salt`; proteins are only diluted.
pub fn dilute_bypass(c_out: &[f64], q_source: f64, q_target: f64, buffer_salt: f64) -> Result<Vec<f64>, NetworkError> {
    if !(q_source > 0.0 && q_target >= q_source) {
        return Err(NetworkError::Balance(format!("cannot dilute {q_source:e} to {q_target:e}")));
    }
    let q_dilute = q_target - q_source;
    let mut c: Vec<f64> = c_out.iter().map(|v| v * q_source / q_target).collect();
    c[0] = (c_out[0] * q_source + buffer_salt * q_dilute) / q_target;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub name: String,
    pub role: NodeRole,
}

/// One closed ring of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubUnit {
    pub name: String,
    /// Columns per zone; zone `k` follows port `k`.
    pub zone_columns: Vec<usize>,
    pub zone_names: Vec<String>,
    pub zone_flows: Vec<f64>,
    pub ports: Vec<Port>,
}

impl SubUnit {
    pub fn columns(&self) -> usize {
        self.zone_columns.iter().sum()
    }

    /// Position of port `k` relative to the first port, in columns.
    pub fn port_offset(&self, k: usize) -> usize {
        self.zone_columns[..k].iter().sum()
    }

    /// Zone holding the column at flow-order position `r`.
    pub fn zone_of(&self, r: usize) -> usize {
        let mut acc = 0;
        for (k, n) in self.zone_columns.iter().enumerate() {
            acc += n;
            if r < acc {
                return k;
            }
        }
        unreachable!("position {r} beyond ring of {acc} columns")
    }

    fn validate(&self, ncomp: usize) -> Result<(), NetworkError> {
        let k = self.ports.len();
        if k == 0 || self.zone_columns.len() != k || self.zone_flows.len() != k || self.zone_names.len() != k {
            return Err(NetworkError::Scheme(format!("{}: ports, zones and flows must pair up", self.name)));
        }
        if self.zone_columns.contains(&0) {
            return Err(NetworkError::Scheme(format!("{}: every zone needs at least one column", self.name)));
        }
        if !matches!(self.ports[0].role, NodeRole::Desorbent { .. }) {
            return Err(NetworkError::Scheme(format!("{}: the first port must be a desorbent", self.name)));
        }
        for (name, &q) in self.zone_names.iter().zip(&self.zone_flows) {
            if !(q > 0.0 && q.is_finite()) {
                return Err(NetworkError::ZoneFlow { zone: name.clone(), flow: q });
            }
        }
        for p in &self.ports {
            for f in [p.role.inflow(), p.role.outflow()] {
                if !(f >= 0.0 && f.is_finite()) {
                    return Err(NetworkError::PortFlow { port: p.name.clone(), flow: f });
                }
            }
            if let NodeRole::Feed { conc, .. } | NodeRole::Desorbent { conc, .. } = &p.role {
                if conc.len() != ncomp || conc.iter().any(|c| !(*c >= 0.0)) {
                    return Err(NetworkError::Scheme(format!("{}: bad concentrations {conc:?}", p.name)));
                }
            }
            if let NodeRole::BypassDilution { source_flow, dilute_flow, buffer_salt, salt_level, .. } = &p.role {
                if !(*source_flow > 0.0 && *dilute_flow >= 0.0 && *buffer_salt >= 0.0 && *salt_level >= 0.0) {
                    return Err(NetworkError::PortFlow { port: p.name.clone(), flow: *dilute_flow });
                }
            }
        }
        for j in 0..k {
            let before = self.zone_flows[(j + k - 1) % k];
            let role = &self.ports[j].role;
            let after = before + role.inflow() - role.outflow();
            if !flows_match(after, self.zone_flows[j]) {
                return Err(NetworkError::Balance(format!(
                    "{} port {}: {before:e} + {:e} - {:e} != zone {} flow {:e}",
                    self.name,
                    self.ports[j].name,
                    role.inflow(),
                    role.outflow(),
                    self.zone_names[j],
                    self.zone_flows[j]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    FourZone,
    Cascade,
    EightZone,
}

/// Validated process topology with its operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessScheme {
    pub kind: SchemeKind,
    pub units: Vec<SubUnit>,
    pub switch_time: f64,
    pub samples_per_switch: usize,
    /// `(unit, port)` of the process feed the yields refer to.
    pub feed_port: (usize, usize),
}

impl ProcessScheme {
    pub fn validate(&self, ncomp: usize) -> Result<(), NetworkError> {
        if !(self.switch_time > 0.0 && self.switch_time.is_finite()) {
            return Err(NetworkError::Scheme(format!("switch time {} must be positive", self.switch_time)));
        }
        if self.samples_per_switch < 2 {
            return Err(NetworkError::Scheme("need at least two samples per switch".into()));
        }
        for u in &self.units {
            u.validate(ncomp)?;
        }
        let (fu, fp) = self.feed_port;
        if !matches!(self.units.get(fu).and_then(|u| u.ports.get(fp)).map(|p| &p.role), Some(NodeRole::Feed { .. })) {
            return Err(NetworkError::Scheme("process feed must be a feed port".into()));
        }
        // Bypass sources must be withdrawals solved earlier in the switch.
        for (ui, u) in self.units.iter().enumerate() {
            for (pi, p) in u.ports.iter().enumerate() {
                let NodeRole::BypassDilution { source, source_flow, .. } = &p.role else { continue };
                let Some((su, sp)) = self.find_port(source) else {
                    return Err(NetworkError::Scheme(format!("bypass source {source} does not exist")));
                };
                let src = &self.units[su].ports[sp];
                if !src.role.is_withdrawal() || (su, self.units[su].port_offset(sp)) >= (ui, u.port_offset(pi)) {
                    return Err(NetworkError::Scheme(format!("bypass source {source} must be an upstream withdrawal")));
                }
                if !flows_match(src.role.outflow(), *source_flow) {
                    return Err(NetworkError::Balance(format!("bypass {} takes {source_flow:e} from {source}", p.name)));
                }
            }
        }
        Ok(())
    }

    pub fn find_port(&self, name: &str) -> Option<(usize, usize)> {
        self.units
            .iter()
            .enumerate()
            .find_map(|(ui, u)| u.ports.iter().position(|p| p.name == name).map(|pi| (ui, pi)))
    }

    pub fn total_columns(&self) -> usize {
        self.units.iter().map(SubUnit::columns).sum()
    }

    pub fn sample_dt(&self) -> f64 {
        self.switch_time / self.samples_per_switch as f64
    }

    pub fn feed(&self) -> (f64, &[f64]) {
        let (u, p) = self.feed_port;
        match &self.units[u].ports[p].role {
            NodeRole::Feed { conc, flow } => (*flow, conc),
            _ => unreachable!("validated feed port"),
        }
    }

    /// Withdrawal ports not consumed by a bypass.
    pub fn product_ports(&self) -> Vec<String> {
        let consumed: Vec<&str> = self
            .units
            .iter()
            .flat_map(|u| &u.ports)
            .filter_map(|p| match &p.role {
                NodeRole::BypassDilution { source, .. } => Some(source.as_str()),
                _ => None,
            })
            .collect();
        self.units
            .iter()
            .flat_map(|u| &u.ports)
            .filter(|p| p.role.is_withdrawal() && !consumed.contains(&p.name.as_str()))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Flow leaving through port `name`.
    pub fn port_flow(&self, name: &str) -> Option<f64> {
        self.find_port(name).map(|(u, p)| self.units[u].ports[p].role.outflow())
    }
}

/// Port flows and salt levels of a four-zone unit; the raffinate closes the balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitFlows {
    pub zone1_flow: f64,
    pub feed_flow: f64,
    pub desorbent_flow: f64,
    pub extract_flow: f64,
    pub feed_salt: f64,
    pub desorbent_salt: f64,
}

impl UnitFlows {
    pub fn raffinate_flow(&self) -> f64 {
        self.desorbent_flow + self.feed_flow - self.extract_flow
    }

    /// Zone flows I to IV.
    pub fn zone_flows(&self) -> [f64; 4] {
        let q2 = self.zone1_flow - self.extract_flow;
        let q3 = q2 + self.feed_flow;
        let q4 = self.zone1_flow - self.desorbent_flow;
        [self.zone1_flow, q2, q3, q4]
    }
}

/// Operating point of the integrated eight-zone ring; the second raffinate
/// closes the balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EightZoneFlows {
    pub zone1_flow: f64,
    pub desorbent1_flow: f64,
    pub extract1_flow: f64,
    pub feed1_flow: f64,
    pub raffinate1_flow: f64,
    pub desorbent2_flow: f64,
    pub extract2_flow: f64,
    pub feed2_flow: f64,
    pub feed1_salt: f64,
    pub desorbent1_salt: f64,
    pub feed2_salt: f64,
    pub desorbent2_salt: f64,
}

impl EightZoneFlows {
    pub fn raffinate2_flow(&self) -> f64 {
        self.desorbent1_flow + self.feed1_flow + self.desorbent2_flow + self.feed2_flow
            - self.raffinate1_flow
            - self.extract1_flow
            - self.extract2_flow
    }

    /// Zone flows I to VIII.
    pub fn zone_flows(&self) -> [f64; 8] {
        let q1 = self.zone1_flow;
        let q2 = q1 - self.extract1_flow;
        let q3 = q2 + self.feed1_flow;
        let q4 = q3 - self.raffinate1_flow;
        let q5 = q4 + self.desorbent2_flow;
        let q6 = q5 - self.extract2_flow;
        let q7 = q6 + self.feed2_flow;
        let q8 = q1 - self.desorbent1_flow;
        [q1, q2, q3, q4, q5, q6, q7, q8]
    }
}

/// How the bypass stream is conditioned before it enters its feed port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dilution {
    /// Salt level of the diluting buffer.
    pub buffer_salt: f64,
    /// Impose the configured feed salt level on the diluted stream instead
    /// of the mixing value.
    pub regulate_salt: bool,
}

impl Default for Dilution {
    fn default() -> Self {
        Self { buffer_salt: 0.0, regulate_salt: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    FourZone { unit: UnitFlows },
    Cascade { first: UnitFlows, second: UnitFlows },
    EightZone { flows: EightZoneFlows },
}

/// Configuration-level description of an SMB process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub switch_time: f64,
    /// Columns per zone: four entries (shared by both cascade units) or eight.
    pub zone_columns: Vec<usize>,
    /// Protein concentrations of the process feed.
    pub feed: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples_per_switch: usize,
    #[serde(default)]
    pub dilution: Dilution,
    pub layout: Layout,
}

fn default_samples() -> usize {
    200
}

const ROMAN: [&str; 8] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII"];

fn with_salt(salt: f64, proteins: &[f64]) -> Vec<f64> {
    std::iter::once(salt).chain(proteins.iter().copied()).collect()
}

fn four_zone_unit(name: &str, prefix: &str, zones: &[usize], f: &UnitFlows, feed: NodeRole, np: usize) -> SubUnit {
    let port = |n: &str, role| Port { name: format!("{prefix}{n}"), role };
    SubUnit {
        name: name.into(),
        zone_columns: zones.to_vec(),
        zone_names: ROMAN[..4].iter().map(|z| format!("{prefix}{z}")).collect(),
        zone_flows: f.zone_flows().to_vec(),
        ports: vec![
            port("D", NodeRole::Desorbent { conc: with_salt(f.desorbent_salt, &vec![0.0; np]), flow: f.desorbent_flow }),
            port("E", NodeRole::Extract { flow: f.extract_flow }),
            port("F", feed),
            port("R", NodeRole::Raffinate { flow: f.raffinate_flow() }),
        ],
    }
}

/// Builds and validates the topology for a system with `proteins` proteins.
pub fn build_scheme(spec: &SchemeSpec, proteins: usize) -> Result<ProcessScheme, NetworkError> {
    if spec.feed.len() != proteins {
        return Err(NetworkError::Scheme(format!("feed has {} entries for {proteins} proteins", spec.feed.len())));
    }
    let zones = &spec.zone_columns;
    let want = if matches!(spec.layout, Layout::EightZone { .. }) { 8 } else { 4 };
    if zones.len() != want {
        return Err(NetworkError::Scheme(format!("expected {want} zone column counts, got {}", zones.len())));
    }
    let (kind, units) = match &spec.layout {
        Layout::FourZone { unit } => {
            let feed = NodeRole::Feed { conc: with_salt(unit.feed_salt, &spec.feed), flow: unit.feed_flow };
            (SchemeKind::FourZone, vec![four_zone_unit("unit", "", zones, unit, feed, proteins)])
        }
        Layout::Cascade { first, second } => {
            let feed = NodeRole::Feed { conc: with_salt(first.feed_salt, &spec.feed), flow: first.feed_flow };
            let u1 = four_zone_unit("U1", "U1:", zones, first, feed, proteins);
            let q_r = first.raffinate_flow();
            let bypass = NodeRole::BypassDilution {
                source: "U1:R".into(),
                source_flow: q_r,
                dilute_flow: second.feed_flow - q_r,
                buffer_salt: spec.dilution.buffer_salt,
                salt_level: second.feed_salt,
                regulated: spec.dilution.regulate_salt,
            };
            if second.feed_flow < q_r {
                return Err(NetworkError::PortFlow { port: "U2:F dilution".into(), flow: second.feed_flow - q_r });
            }
            let u2 = four_zone_unit("U2", "U2:", zones, second, bypass, proteins);
            (SchemeKind::Cascade, vec![u1, u2])
        }
        Layout::EightZone { flows: f } => {
            let zero = vec![0.0; proteins];
            let port = |n: &str, role| Port { name: n.into(), role };
            let q_dilute = f.feed2_flow - f.raffinate1_flow;
            if q_dilute < 0.0 {
                return Err(NetworkError::PortFlow { port: "F2 dilution".into(), flow: q_dilute });
            }
            let unit = SubUnit {
                name: "ring".into(),
                zone_columns: zones.clone(),
                zone_names: ROMAN.iter().map(|z| z.to_string()).collect(),
                zone_flows: f.zone_flows().to_vec(),
                ports: vec![
                    port("D1", NodeRole::Desorbent { conc: with_salt(f.desorbent1_salt, &zero), flow: f.desorbent1_flow }),
                    port("E1", NodeRole::Extract { flow: f.extract1_flow }),
                    port("F1", NodeRole::Feed { conc: with_salt(f.feed1_salt, &spec.feed), flow: f.feed1_flow }),
                    port("R1", NodeRole::Raffinate { flow: f.raffinate1_flow }),
                    port("D2", NodeRole::Desorbent { conc: with_salt(f.desorbent2_salt, &zero), flow: f.desorbent2_flow }),
                    port("E2", NodeRole::Extract { flow: f.extract2_flow }),
                    port(
                        "F2",
                        NodeRole::BypassDilution {
                            source: "R1".into(),
                            source_flow: f.raffinate1_flow,
                            dilute_flow: q_dilute,
                            buffer_salt: spec.dilution.buffer_salt,
                            salt_level: f.feed2_salt,
                            regulated: spec.dilution.regulate_salt,
                        },
                    ),
                    port("R2", NodeRole::Raffinate { flow: f.raffinate2_flow() }),
                ],
            };
            (SchemeKind::EightZone, vec![unit])
        }
    };
    let feed_port = (0, units[0].ports.iter().position(|p| matches!(p.role, NodeRole::Feed { .. })).unwrap());
    let scheme = ProcessScheme {
        kind,
        units,
        switch_time: spec.switch_time,
        samples_per_switch: spec.samples_per_switch,
        feed_port,
    };
    scheme.validate(proteins + 1)?;
    Ok(scheme)
}

/// Streams seen during one switch.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchRecord {
    /// Zero-based switch number.
    pub switch: usize,
    pub t_start: f64,
    /// Withdrawn streams by port name, in flow order.
    pub withdrawals: Vec<OutletRecord>,
}

impl SwitchRecord {
    pub fn get(&self, port: &str) -> Option<&OutletRecord> {
        self.withdrawals.iter().find(|r| r.node == port)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SMBState {
    /// Column states per sub-unit, indexed by physical position.
    pub columns: Vec<Vec<ColumnState>>,
    /// Completed switches.
    pub switches: usize,
    /// Loop-closing outlet of the last switch, per sub-unit.
    pub recycle: Vec<OutletRecord>,
    pub history: Vec<SwitchRecord>,
}

impl SMBState {
    /// Port offset of sub-unit `unit` in columns.
    pub fn offset(&self, scheme: &ProcessScheme, unit: usize) -> usize {
        self.switches % scheme.units[unit].columns()
    }

    pub fn time(&self, scheme: &ProcessScheme) -> f64 {
        self.switches as f64 * scheme.switch_time
    }

    /// Moles held in all columns plus the stored recycle streams.
    pub fn holdup(&self, scheme: &ProcessScheme, config: &SystemConfig) -> Vec<f64> {
        let mut total = vec![0.0; config.ncomp()];
        for cols in &self.columns {
            for c in cols {
                for (t, h) in total.iter_mut().zip(holdup(c, config)) {
                    *t += h;
                }
            }
        }
        for (u, rec) in scheme.units.iter().zip(&self.recycle) {
            let q = *u.zone_flows.last().unwrap();
            for (i, t) in total.iter_mut().enumerate() {
                let s = rec.series(i);
                *t += q * s.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() * rec.dt();
            }
        }
        total
    }
}

/// Columns filled with the salt of the nearest upstream inflow port and no protein.
pub fn initialize_smb(
    scheme: &ProcessScheme,
    config: &SystemConfig,
    settings: &SolverSettings,
) -> Result<SMBState, NetworkError> {
    scheme.validate(config.ncomp())?;
    let mut columns = Vec::new();
    let mut recycle = Vec::new();
    for u in &scheme.units {
        let mut salt = u.ports[0].role.salt_level().unwrap();
        let mut cols = Vec::with_capacity(u.columns());
        for (k, &n) in u.zone_columns.iter().enumerate() {
            if let Some(s) = u.ports[k].role.salt_level() {
                salt = s;
            }
            for _ in 0..n {
                cols.push(fresh_state(config, settings.nz, settings.nr, salt)?);
            }
        }
        let last = cols.last().unwrap().outlet().to_vec();
        recycle.push(OutletRecord::constant("recycle", 0.0, scheme.switch_time, scheme.sample_dt(), &last));
        columns.push(cols);
    }
    Ok(SMBState { columns, switches: 0, recycle, history: Vec::new() })
}

fn map_rows(rec: &OutletRecord, node: &str, f: impl Fn(&[f64]) -> Result<Vec<f64>, NetworkError>) -> Result<OutletRecord, NetworkError> {
    let mut data = Vec::with_capacity(rec.data().len());
    for j in 0..rec.len() {
        data.extend(f(rec.row(j))?);
    }
    Ok(OutletRecord::from_rows(node, rec.t_start(), rec.dt(), rec.ncomp(), data))
}

/// Integrates one switching interval and advances all ports by one column.
pub fn advance_switch(
    state: &SMBState,
    scheme: &ProcessScheme,
    settings: &SolverSettings,
    config: &SystemConfig,
) -> Result<SMBState, NetworkError> {
    let t0 = state.time(scheme);
    let t1 = (state.switches + 1) as f64 * scheme.switch_time;
    let dt = scheme.sample_dt();
    let geometry = config.geometry();
    let mut next = state.clone();
    let mut withdrawals: Vec<OutletRecord> = Vec::new();

    for (ui, unit) in scheme.units.iter().enumerate() {
        let n = unit.columns();
        let start = state.offset(scheme, ui);
        let last_zone = unit.zone_flows.len() - 1;
        let mut stream = state.recycle[ui].shifted(t0);
        let mut q_up = unit.zone_flows[last_zone];
        for r in 0..n {
            let col = (start + r) % n;
            let zone = unit.zone_of(r);
            let q = unit.zone_flows[zone];
            let port = (0..unit.ports.len()).find(|&k| unit.port_offset(k) == r).map(|k| &unit.ports[k]);
            let inlet = match port.map(|p| &p.role) {
                None => stream.clone(),
                Some(NodeRole::BypassDilution { source, source_flow, buffer_salt, salt_level, regulated, .. }) => {
                    let src = withdrawals.iter().find(|w| &w.node == source).ok_or(NetworkError::BypassStream)?;
                    let diluted = map_rows(src, "bypass", |c| {
                        let mut v = dilute_bypass(c, *source_flow, port.unwrap().role.inflow(), *buffer_salt)?;
                        if *regulated {
                            v[0] = *salt_level;
                        }
                        Ok(v)
                    })?;
                    let role = port.unwrap().role.inflow();
                    let feed_rows = diluted;
                    let mut data = Vec::with_capacity(stream.data().len());
                    for j in 0..stream.len() {
                        let feed = NodeRole::Feed { conc: feed_rows.row(j).to_vec(), flow: role };
                        data.extend(node_balance(stream.row(j), q_up, &feed, q)?);
                    }
                    OutletRecord::from_rows("inlet", t0, dt, stream.ncomp(), data)
                }
                Some(role) => {
                    if role.is_withdrawal() {
                        let mut w = stream.clone();
                        w.node = port.unwrap().name.clone();
                        withdrawals.push(w);
                    }
                    map_rows(&stream, "inlet", |c| node_balance(c, q_up, role, q))?
                }
            };
            let profile = inlet.to_profile(t1, dt).map_err(|e| NetworkError::Column {
                unit: unit.name.clone(),
                column: col,
                switch: state.switches,
                source: e.into(),
            })?;
            let (s, rec) = integrate_column(&state.columns[ui][col], &profile, geometry.velocity(q), settings, config)
                .map_err(|source| NetworkError::Column { unit: unit.name.clone(), column: col, switch: state.switches, source })?;
            next.columns[ui][col] = s;
            stream = rec;
            q_up = q;
        }
        stream.node = "recycle".into();
        next.recycle[ui] = stream;
    }
    next.switches += 1;
    next.history.push(SwitchRecord { switch: state.switches, t_start: t0, withdrawals });
    Ok(next)
}

/// `switch,time_s,node,component,conc_mol_m3` for every stored switch.
pub fn write_withdrawals_csv<W: Write>(history: &[SwitchRecord], labels: &[String], mut w: W) -> io::Result<()> {
    writeln!(w, "switch,time_s,node,component,conc_mol_m3")?;
    for s in history {
        for rec in &s.withdrawals {
            for j in 0..rec.len() {
                for (i, label) in labels.iter().enumerate() {
                    writeln!(w, "{},{:?},{},{},{:?}", s.switch, rec.time(j), rec.node, label, rec.get(j, i))?;
                }
            }
        }
    }
    Ok(())
}
