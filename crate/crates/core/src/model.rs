//! Physical parameter bundle and discretized column state.
//!
//! Component index 0 is always the salt counter-ion; proteins occupy
//! indices `1..=M`. All quantities are SI (m, s, mol/m³).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Concentrations down to this value are treated as solver noise.
pub const NEGATIVE_TOLERANCE: f64 = -1e-8;
/// Below this the state is considered broken rather than noisy.
pub const NEGATIVE_HARD_LIMIT: f64 = -1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("`{field}` has {found} entries, expected {expected}")]
    DimensionMismatch { field: &'static str, expected: usize, found: usize },
    #[error("`{field}` = {value} is out of range: {reason}")]
    OutOfRange { field: &'static str, value: f64, reason: &'static str },
    #[error("component label `{0}` is used twice")]
    DuplicateLabel(String),
    #[error("need the salt plus at least one protein, got {0} component(s)")]
    TooFewComponents(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

fn positive(field: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { field, value, reason: "must be positive and finite" })
    }
}

fn non_negative(field: &'static str, value: f64) -> Result<(), ModelError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { field, value, reason: "must be non-negative and finite" })
    }
}

fn open_unit(field: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { field, value, reason: "must lie in (0, 1)" })
    }
}

fn length(field: &'static str, v: &[f64], expected: usize) -> Result<(), ModelError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { field, expected, found: v.len() })
    }
}

/// Component labels; the first entry is the salt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ComponentSet {
    names: Vec<String>,
}

impl ComponentSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, ModelError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(ModelError::TooFewComponents(names.len()));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(ModelError::DuplicateLabel(a.clone()));
            }
        }
        Ok(Self { names })
    }

    /// Number of proteins, `M`.
    pub fn proteins(&self) -> usize {
        self.names.len() - 1
    }

    /// Total number of components including salt, `M + 1`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ComponentSet {
    type Error = ModelError;
    fn try_from(v: Vec<String>) -> Result<Self, ModelError> {
        ComponentSet::new(v)
    }
}

impl From<ComponentSet> for Vec<String> {
    fn from(c: ComponentSet) -> Self {
        c.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnGeometry {
    pub length: f64,
    pub diameter: f64,
    pub particle_diameter: f64,
    pub column_porosity: f64,
    pub particle_porosity: f64,
}

impl ColumnGeometry {
    pub fn particle_radius(&self) -> f64 {
        0.5 * self.particle_diameter
    }

    pub fn cross_section(&self) -> f64 {
        std::f64::consts::PI * self.diameter * self.diameter / 4.0
    }

    /// Empty-bed volume `V_c`.
    pub fn volume(&self) -> f64 {
        self.cross_section() * self.length
    }

    /// Volumetric flow `Q = ε_c u A` for interstitial velocity `u`.
    pub fn flow_rate(&self, velocity: f64) -> f64 {
        self.column_porosity * velocity * self.cross_section()
    }

    pub fn velocity(&self, flow_rate: f64) -> f64 {
        flow_rate / (self.column_porosity * self.cross_section())
    }

    fn validate(&self) -> Result<(), ModelError> {
        positive("length", self.length)?;
        positive("diameter", self.diameter)?;
        positive("particle_diameter", self.particle_diameter)?;
        open_unit("column_porosity", self.column_porosity)?;
        open_unit("particle_porosity", self.particle_porosity)
    }
}

/// Mass transfer coefficients. Per-protein arrays; the salt reuses the value of
/// the first protein unless an override is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportParams {
    pub axial_dispersion: f64,
    pub pore_diffusion: Vec<f64>,
    /// A zero entry marks a component that cannot enter the pores.
    pub film_transfer: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt_pore_diffusion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt_film_transfer: Option<f64>,
}

impl TransportParams {
    /// Same coefficients for every protein.
    pub fn uniform(proteins: usize, axial_dispersion: f64, pore_diffusion: f64, film_transfer: f64) -> Self {
        Self {
            axial_dispersion,
            pore_diffusion: vec![pore_diffusion; proteins],
            film_transfer: vec![film_transfer; proteins],
            salt_pore_diffusion: None,
            salt_film_transfer: None,
        }
    }
}

/// Steric mass-action parameters, one entry per protein.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmaBinding {
    pub ionic_capacity: f64,
    pub ka: Vec<f64>,
    pub kd: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SmaBinding {
    pub fn proteins(&self) -> usize {
        self.ka.len()
    }

    /// Free ligand `Λ - Σ (ν_i + σ_i) q_i` for bound protein concentrations `q[1..]`.
    pub fn free_ligand(&self, q: &[f64]) -> f64 {
        self.ionic_capacity
            - (0..self.proteins()).map(|i| (self.nu[i] + self.sigma[i]) * q[i + 1]).sum::<f64>()
    }

    /// Bound salt `q_0 = Λ - Σ ν_i q_i`, i.e. free ligand plus sterically shielded sites.
    pub fn bound_salt(&self, q: &[f64]) -> f64 {
        self.ionic_capacity - (0..self.proteins()).map(|i| self.nu[i] * q[i + 1]).sum::<f64>()
    }
}

/// Serializable form of a full parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub components: ComponentSet,
    pub geometry: ColumnGeometry,
    pub transport: TransportParams,
    pub binding: SmaBinding,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<SystemConfig, ModelError> {
        validate_system(
            self.geometry.clone(),
            self.transport.clone(),
            self.binding.clone(),
            self.components.clone(),
        )
    }
}

/// Validated, immutable parameter bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    spec: SystemSpec,
    pore_diffusion: Vec<f64>,
    film_transfer: Vec<f64>,
}

impl SystemConfig {
    pub fn components(&self) -> &ComponentSet {
        &self.spec.components
    }

    pub fn geometry(&self) -> &ColumnGeometry {
        &self.spec.geometry
    }

    pub fn transport(&self) -> &TransportParams {
        &self.spec.transport
    }

    pub fn binding(&self) -> &SmaBinding {
        &self.spec.binding
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn ncomp(&self) -> usize {
        self.spec.components.len()
    }

    pub fn proteins(&self) -> usize {
        self.spec.components.proteins()
    }

    /// Pore diffusion per component, salt included.
    pub fn pore_diffusion(&self) -> &[f64] {
        &self.pore_diffusion
    }

    /// Film mass transfer per component, salt included.
    pub fn film_transfer(&self) -> &[f64] {
        &self.film_transfer
    }

    /// Copy with the binding replaced (used by tests and sensitivity studies).
    pub fn with_binding(&self, binding: SmaBinding) -> Result<Self, ModelError> {
        validate_system(self.spec.geometry.clone(), self.spec.transport.clone(), binding, self.spec.components.clone())
    }

    pub fn with_transport(&self, transport: TransportParams) -> Result<Self, ModelError> {
        validate_system(self.spec.geometry.clone(), transport, self.spec.binding.clone(), self.spec.components.clone())
    }
}

pub fn validate_system(
    geometry: ColumnGeometry,
    transport: TransportParams,
    binding: SmaBinding,
    components: ComponentSet,
) -> Result<SystemConfig, ModelError> {
    let m = components.proteins();
    geometry.validate()?;

    positive("axial_dispersion", transport.axial_dispersion)?;
    length("pore_diffusion", &transport.pore_diffusion, m)?;
    length("film_transfer", &transport.film_transfer, m)?;
    for &v in &transport.pore_diffusion {
        positive("pore_diffusion", v)?;
    }
    for &v in &transport.film_transfer {
        non_negative("film_transfer", v)?;
    }
    if let Some(v) = transport.salt_pore_diffusion {
        positive("salt_pore_diffusion", v)?;
    }
    if let Some(v) = transport.salt_film_transfer {
        non_negative("salt_film_transfer", v)?;
    }

    positive("ionic_capacity", binding.ionic_capacity)?;
    length("ka", &binding.ka, m)?;
    length("kd", &binding.kd, m)?;
    length("nu", &binding.nu, m)?;
    length("sigma", &binding.sigma, m)?;
    for &v in &binding.ka {
        non_negative("ka", v)?;
    }
    for &v in &binding.kd {
        non_negative("kd", v)?;
    }
    for &v in &binding.nu {
        positive("nu", v)?;
    }
    for &v in &binding.sigma {
        non_negative("sigma", v)?;
    }

    let mut pore_diffusion = Vec::with_capacity(m + 1);
    pore_diffusion.push(transport.salt_pore_diffusion.unwrap_or(transport.pore_diffusion[0]));
    pore_diffusion.extend_from_slice(&transport.pore_diffusion);
    let mut film_transfer = Vec::with_capacity(m + 1);
    film_transfer.push(transport.salt_film_transfer.unwrap_or(transport.film_transfer[0]));
    film_transfer.extend_from_slice(&transport.film_transfer);

    Ok(SystemConfig {
        spec: SystemSpec { components, geometry, transport, binding },
        pore_diffusion,
        film_transfer,
    })
}

/// Discretized state of one column: bulk `c[z][i]`, pore `cp[z][r][i]`,
/// bound `q[z][r][i]` (with `q[..][..][0]` the bound salt).
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnState {
    nz: usize,
    nr: usize,
    ncomp: usize,
    pub c: Vec<f64>,
    pub cp: Vec<f64>,
    pub q: Vec<f64>,
    pub t: f64,
}

impl ColumnState {
    pub fn zeros(nz: usize, nr: usize, ncomp: usize) -> Self {
        Self {
            nz,
            nr,
            ncomp,
            c: vec![0.0; nz * ncomp],
            cp: vec![0.0; nz * nr * ncomp],
            q: vec![0.0; nz * nr * ncomp],
            t: 0.0,
        }
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    #[inline]
    pub fn bulk_index(&self, z: usize, i: usize) -> usize {
        z * self.ncomp + i
    }

    #[inline]
    pub fn particle_index(&self, z: usize, r: usize, i: usize) -> usize {
        (z * self.nr + r) * self.ncomp + i
    }

    pub fn bulk(&self, z: usize, i: usize) -> f64 {
        self.c[self.bulk_index(z, i)]
    }

    pub fn pore(&self, z: usize, r: usize, i: usize) -> f64 {
        self.cp[self.particle_index(z, r, i)]
    }

    pub fn bound(&self, z: usize, r: usize, i: usize) -> f64 {
        self.q[self.particle_index(z, r, i)]
    }

    /// Outlet (last cell) bulk concentrations.
    pub fn outlet(&self) -> &[f64] {
        let z = self.nz - 1;
        &self.c[z * self.ncomp..(z + 1) * self.ncomp]
    }

    /// Largest violation of the free-ligand constraint (most negative `q̄0`), if any.
    pub fn min_free_ligand(&self, binding: &SmaBinding) -> f64 {
        self.q.chunks(self.ncomp).map(|q| binding.free_ligand(q)).fold(f64::INFINITY, f64::min)
    }

    pub fn min_concentration(&self) -> f64 {
        let m = self.c.iter().chain(&self.cp).copied().fold(f64::INFINITY, f64::min);
        let mq = self.q.chunks(self.ncomp).flat_map(|q| q[1..].iter().copied()).fold(f64::INFINITY, f64::min);
        m.min(mq)
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().chain(&self.cp).chain(&self.q).all(|v| v.is_finite())
    }
}

/// Empty column equilibrated with salt at `salt`: no protein anywhere and all
/// ligands occupied by salt counter-ions.
pub fn fresh_state(config: &SystemConfig, nz: usize, nr: usize, salt: f64) -> Result<ColumnState, ModelError> {
    if nz < 2 {
        return Err(ModelError::InvalidGrid(format!("need at least 2 axial cells, got {nz}")));
    }
    if nr < 1 {
        return Err(ModelError::InvalidGrid(format!("need at least 1 particle shell, got {nr}")));
    }
    non_negative("salt", salt)?;
    let ncomp = config.ncomp();
    let mut s = ColumnState::zeros(nz, nr, ncomp);
    for z in 0..nz {
        let k = s.bulk_index(z, 0);
        s.c[k] = salt;
        for r in 0..nr {
            let k = s.particle_index(z, r, 0);
            s.cp[k] = salt;
            s.q[k] = config.binding().ionic_capacity;
        }
    }
    Ok(s)
}

/// Reference parameter block for RNase, cytochrome c and lysozyme on SP Sepharose FF.
pub fn reference_system() -> SystemConfig {
    validate_system(
        ColumnGeometry {
            length: 1.4e-2,
            diameter: 1e-2,
            particle_diameter: 9.0e-5,
            column_porosity: 0.37,
            particle_porosity: 0.75,
        },
        TransportParams::uniform(3, 5.75e-8, 6.07e-11, 6.90e-6),
        SmaBinding {
            ionic_capacity: 1200.0,
            ka: vec![7.70, 1.59, 35.5],
            kd: vec![1000.0, 1000.0, 1000.0],
            nu: vec![3.70, 5.29, 4.70],
            sigma: vec![10.0, 10.6, 11.83],
        },
        ComponentSet::new(["salt", "RNase", "cyt", "lyz"]).unwrap(),
    )
    .expect("reference parameters are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_block_is_valid() {
        let cfg = reference_system();
        assert_eq!(cfg.proteins(), 3);
        assert_eq!(cfg.pore_diffusion(), &[6.07e-11; 4]);
        assert_eq!(cfg.film_transfer(), &[6.90e-6; 4]);
        assert_eq!(cfg.binding().ka, vec![7.70, 1.59, 35.5]);
    }

    #[test]
    fn porosity_out_of_range_names_field() {
        let cfg = reference_system();
        let mut g = cfg.geometry().clone();
        g.column_porosity = 1.2;
        let err = validate_system(g, cfg.transport().clone(), cfg.binding().clone(), cfg.components().clone())
            .unwrap_err();
        assert!(matches!(err, ModelError::OutOfRange { field: "column_porosity", .. }), "{err}");
    }

    #[test]
    fn short_binding_array_is_a_dimension_error() {
        let cfg = reference_system();
        let mut b = cfg.binding().clone();
        b.ka = vec![7.70, 1.59];
        let err = cfg.with_binding(b).unwrap_err();
        assert_eq!(err, ModelError::DimensionMismatch { field: "ka", expected: 3, found: 2 });
    }

    #[test]
    fn negative_rate_rejected() {
        let cfg = reference_system();
        let mut b = cfg.binding().clone();
        b.kd[1] = -1.0;
        assert!(matches!(cfg.with_binding(b), Err(ModelError::OutOfRange { field: "kd", .. })));
    }

    #[test]
    fn labels_must_be_unique() {
        assert_eq!(ComponentSet::new(["salt", "a", "a"]).unwrap_err(), ModelError::DuplicateLabel("a".into()));
        assert!(ComponentSet::new(["salt"]).is_err());
    }

    #[test]
    fn validation_is_pure() {
        assert_eq!(reference_system(), reference_system());
    }

    #[test]
    fn fresh_state_layout() {
        let cfg = reference_system();
        let s = fresh_state(&cfg, 40, 10, 50.0).unwrap();
        assert_eq!(s.c.len(), 40 * 4);
        assert_eq!(s.cp.len(), 40 * 10 * 4);
        assert_eq!(s.q.len(), 40 * 10 * 4);
        for z in 0..40 {
            assert_eq!(s.bulk(z, 0), 50.0);
            for i in 1..4 {
                assert_eq!(s.bulk(z, i), 0.0);
            }
            for r in 0..10 {
                assert_eq!(s.pore(z, r, 0), 50.0);
                assert_eq!(s.bound(z, r, 0), 1200.0);
                // Electro-neutrality holds exactly for the empty column.
                let q = &s.q[s.particle_index(z, r, 0)..s.particle_index(z, r, 0) + 4];
                assert_eq!(cfg.binding().free_ligand(q), 1200.0);
                assert_eq!(cfg.binding().bound_salt(q), q[0]);
            }
        }
    }

    #[test]
    fn fresh_state_without_salt() {
        let cfg = reference_system();
        let s = fresh_state(&cfg, 5, 2, 0.0).unwrap();
        assert!(s.c.iter().chain(&s.cp).all(|&v| v == 0.0));
        assert!((0..5).all(|z| (0..2).all(|r| s.bound(z, r, 0) == 1200.0)));
    }

    #[test]
    fn fresh_state_rejects_bad_grid() {
        let cfg = reference_system();
        assert!(matches!(fresh_state(&cfg, 1, 10, 50.0), Err(ModelError::InvalidGrid(_))));
        assert!(matches!(fresh_state(&cfg, 10, 0, 50.0), Err(ModelError::InvalidGrid(_))));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = reference_system().spec().clone();
        let text = serde_json::to_string(&spec).unwrap();
        let back: SystemSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
