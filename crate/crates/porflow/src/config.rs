//! Run configuration: TOML ingestion, validation against the admissibility
//! and bounds gates, bundled presets, and construction of the runtime
//! problem objects.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    ConstantFn, PermTensor, ProblemData, SatFunction, SaturationAffineFn, ZeroFn,
};
use crate::constitutive::{ConstitutiveModel, MaterialParams, RelPermKind};
use crate::mesh::{BoundaryTag, Mesh, MeshSpec};
use crate::mms::MmsCase;
use crate::solver::NewtonConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub key: String,
    pub reason: String,
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation failed:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ValidationIssue>),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulate,
    Verify,
    Convergence,
    ConstitutiveTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub dim: usize,
    pub extents: Vec<f64>,
    pub cells: Vec<usize>,
    /// Side tags in `[x-min, x-max, y-min, y-max]` order.
    pub boundary: Vec<BoundaryTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub gamma_w: f64,
    pub gamma_n: f64,
    pub gamma_wn: f64,
    pub eta_w: f64,
    pub eta_n: f64,
    pub s_eps: f64,
    #[serde(default = "one")]
    pub phi_m: f64,
    #[serde(default)]
    pub c_min: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstitutiveSection {
    pub rel_perm: RelPermKind,
}

impl Default for ConstitutiveSection {
    fn default() -> Self {
        Self {
            rel_perm: RelPermKind::Quadratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldsSection {
    pub porosity: f64,
    pub permeability: f64,
}

impl Default for FieldsSection {
    fn default() -> Self {
        Self {
            porosity: 1.0,
            permeability: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSection {
    UniformMu {
        mu: f64,
    },
    UniformS {
        s: f64,
    },
    /// `mid + amp cos(pi x / Lx)` (times `cos(pi y / Ly)` in 2D).
    CosineS {
        mid: f64,
        amp: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SatSpec {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `a + b S` with the saturation clamped to the residual range.
    AffineInS {
        a: f64,
        b: f64,
    },
}

impl SatSpec {
    fn build(&self) -> Arc<dyn SatFunction> {
        match *self {
            SatSpec::Zero => Arc::new(ZeroFn),
            SatSpec::Constant { value } => Arc::new(ConstantFn(value)),
            SatSpec::AffineInS { a, b } => Arc::new(SaturationAffineFn { a, b }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirichletSpec {
    Constant {
        value: f64,
    },
    /// The potential of a fixed saturation, `mu_w(s)`.
    SaturationPotential {
        s: f64,
    },
}

impl Default for DirichletSpec {
    fn default() -> Self {
        DirichletSpec::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SourcesSection {
    pub q_w: SatSpec,
    pub q_n: SatSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BoundarySection {
    pub phi1: DirichletSpec,
    pub phi3: DirichletSpec,
    pub phi2: SatSpec,
    pub phi4: SatSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub tau: f64,
    pub t_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Field-dump stride in steps (0 disables field dumps).
    pub stride: usize,
    pub dir: Option<String>,
    pub vtk: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            stride: 1,
            dir: None,
            vtk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSection {
    pub points: usize,
}

impl Default for TableSection {
    fn default() -> Self {
        Self { points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmsSection {
    pub s_mid: f64,
    pub s_amp: f64,
    pub p_amp: f64,
    pub decay: f64,
    pub spatial_cells: Vec<usize>,
    pub tau_at_coarsest: f64,
    pub temporal_taus: Vec<f64>,
    pub temporal_cells: usize,
    pub t_final: f64,
}

impl Default for MmsSection {
    fn default() -> Self {
        Self {
            s_mid: 0.5,
            s_amp: 0.25,
            p_amp: 0.2,
            decay: 1.0,
            spatial_cells: vec![16, 32, 64, 128],
            tau_at_coarsest: 0.125,
            temporal_taus: vec![0.1, 0.05, 0.025],
            temporal_cells: 256,
            t_final: 0.5,
        }
    }
}

impl MmsSection {
    pub fn case(&self) -> MmsCase {
        MmsCase {
            s_mid: self.s_mid,
            s_amp: self.s_amp,
            p_amp: self.p_amp,
            decay: self.decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    pub material: MaterialSection,
    #[serde(default)]
    pub constitutive: ConstitutiveSection,
    #[serde(default)]
    pub mesh: Option<MeshSection>,
    #[serde(default)]
    pub fields: FieldsSection,
    #[serde(default)]
    pub initial: Option<InitialSection>,
    #[serde(default)]
    pub sources: SourcesSection,
    #[serde(default)]
    pub boundary: BoundarySection,
    #[serde(default)]
    pub time: Option<TimeSection>,
    #[serde(default)]
    pub solver: NewtonConfig,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub table: TableSection,
    #[serde(default)]
    pub mms: Option<MmsSection>,
}

/// A fully validated simulation problem ready to run.
pub struct BuiltProblem {
    pub mesh: Mesh,
    pub data: ProblemData,
    pub tau: f64,
    pub t_final: f64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Loads from a path, or from a bundled preset via `preset:<name>`.
    pub fn load(path_or_preset: &str) -> Result<Self, ConfigError> {
        let text = if let Some(name) = path_or_preset.strip_prefix("preset:") {
            preset(name)
                .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?
                .to_string()
        } else {
            std::fs::read_to_string(path_or_preset)?
        };
        Self::from_toml(&text)
    }

    /// Builds the constitutive model, collecting validation issues.
    pub fn build_model(&self) -> Result<ConstitutiveModel, ConfigError> {
        let mut issues = Vec::new();
        let m = &self.material;
        let params = match MaterialParams::new(
            m.gamma_w, m.gamma_n, m.gamma_wn, m.eta_w, m.eta_n, m.s_eps, m.phi_m,
        ) {
            Ok(p) => match m.c_min {
                Some(c) => match p.with_c_min(c) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        issues.push(ValidationIssue {
                            key: "material.c_min".into(),
                            reason: e.to_string(),
                        });
                        None
                    }
                },
                None => Some(p),
            },
            Err(e) => {
                issues.push(ValidationIssue {
                    key: "material".into(),
                    reason: e.to_string(),
                });
                None
            }
        };
        match params {
            Some(p) if issues.is_empty() => {
                Ok(ConstitutiveModel::new(p, self.constitutive.rel_perm))
            }
            _ => Err(ConfigError::Invalid(issues)),
        }
    }

    /// Validates everything needed for a simulation run and builds it.
    pub fn build_problem(&self) -> Result<BuiltProblem, ConfigError> {
        let mut issues = Vec::new();
        let model = match self.build_model() {
            Ok(m) => Some(m),
            Err(ConfigError::Invalid(mut v)) => {
                issues.append(&mut v);
                None
            }
            Err(e) => return Err(e),
        };

        let mesh = match &self.mesh {
            Some(section) => match Mesh::build(&MeshSpec {
                dim: section.dim,
                extents: section.extents.clone(),
                cells: section.cells.clone(),
                side_tags: section.boundary.clone(),
            }) {
                Ok(mesh) => Some(mesh),
                Err(e) => {
                    issues.push(ValidationIssue {
                        key: "mesh".into(),
                        reason: e.to_string(),
                    });
                    None
                }
            },
            None => {
                issues.push(ValidationIssue {
                    key: "mesh".into(),
                    reason: "section is required for simulation runs".into(),
                });
                None
            }
        };

        let time = match &self.time {
            Some(t) => {
                if !(t.tau > 0.0 && t.tau.is_finite()) {
                    issues.push(ValidationIssue {
                        key: "time.tau".into(),
                        reason: format!("time step must be positive, got {}", t.tau),
                    });
                }
                if !(t.t_final >= 0.0 && t.t_final.is_finite()) {
                    issues.push(ValidationIssue {
                        key: "time.t_final".into(),
                        reason: format!("final time must be nonnegative, got {}", t.t_final),
                    });
                }
                Some(t.clone())
            }
            None => {
                issues.push(ValidationIssue {
                    key: "time".into(),
                    reason: "section is required for simulation runs".into(),
                });
                None
            }
        };

        if self.initial.is_none() {
            issues.push(ValidationIssue {
                key: "initial".into(),
                reason: "section is required for simulation runs".into(),
            });
        }
        if !(self.fields.porosity > 0.0) {
            issues.push(ValidationIssue {
                key: "fields.porosity".into(),
                reason: "porosity must be positive".into(),
            });
        }
        if !(self.fields.permeability > 0.0) {
            issues.push(ValidationIssue {
                key: "fields.permeability".into(),
                reason: "permeability must be positive".into(),
            });
        }
        if let Err(e) = self.solver.validate() {
            issues.push(ValidationIssue {
                key: "solver".into(),
                reason: e.to_string(),
            });
        }

        // saturation-valued specs must lie strictly inside (0, 1)
        let check_s = |s: f64, key: &str, issues: &mut Vec<ValidationIssue>| {
            if !(s > 0.0 && s < 1.0) {
                issues.push(ValidationIssue {
                    key: key.into(),
                    reason: format!("saturation {s} outside (0, 1)"),
                });
            }
        };
        match self.initial {
            Some(InitialSection::UniformS { s }) => check_s(s, "initial.s", &mut issues),
            Some(InitialSection::CosineS { mid, amp }) => {
                check_s(mid - amp.abs(), "initial", &mut issues);
                check_s(mid + amp.abs(), "initial", &mut issues);
            }
            _ => {}
        }
        for (spec, key) in [
            (&self.boundary.phi1, "boundary.phi1"),
            (&self.boundary.phi3, "boundary.phi3"),
        ] {
            if let DirichletSpec::SaturationPotential { s } = *spec {
                check_s(s, key, &mut issues);
            }
        }

        let (Some(model), Some(mesh), Some(time), Some(initial)) =
            (model, mesh, time, self.initial.clone())
        else {
            return Err(ConfigError::Invalid(issues));
        };
        if !issues.is_empty() {
            return Err(ConfigError::Invalid(issues));
        }

        let dirichlet = |spec: &DirichletSpec| -> crate::assembly::BoundaryValue {
            match *spec {
                DirichletSpec::Constant { value } => Arc::new(move |_: &[f64; 2], _| value),
                DirichletSpec::SaturationPotential { s } => {
                    let v = model
                        .chemical_potential(s)
                        .expect("validated saturation in (0,1)");
                    Arc::new(move |_: &[f64; 2], _| v)
                }
            }
        };

        let lx = mesh.extents()[0];
        let ly = if mesh.dim() == 2 {
            mesh.extents()[1]
        } else {
            1.0
        };
        let dim = mesh.dim();
        let initial_mu: Arc<dyn Fn(&[f64; 2]) -> f64 + Send + Sync> = match initial {
            InitialSection::UniformMu { mu } => Arc::new(move |_: &[f64; 2]| mu),
            InitialSection::UniformS { s } => {
                let v = model
                    .chemical_potential(s)
                    .expect("validated saturation in (0,1)");
                Arc::new(move |_: &[f64; 2]| v)
            }
            InitialSection::CosineS { mid, amp } => Arc::new(move |x: &[f64; 2]| {
                let mut s = mid + amp * (std::f64::consts::PI * x[0] / lx).cos();
                if dim == 2 {
                    s = mid
                        + amp
                            * (std::f64::consts::PI * x[0] / lx).cos()
                            * (std::f64::consts::PI * x[1] / ly).cos();
                }
                model
                    .chemical_potential(s)
                    .expect("validated saturation in (0,1)")
            }),
        };

        let data = ProblemData {
            model,
            porosity: vec![self.fields.porosity; mesh.n_cells()],
            permeability: vec![PermTensor::isotropic(self.fields.permeability); mesh.n_cells()],
            q_w: self.sources.q_w.build(),
            q_n: self.sources.q_n.build(),
            phi2: self.boundary.phi2.build(),
            phi4: self.boundary.phi4.build(),
            phi1: dirichlet(&self.boundary.phi1),
            phi3: dirichlet(&self.boundary.phi3),
            initial_mu,
        };

        Ok(BuiltProblem {
            mesh,
            data,
            tau: time.tau,
            t_final: time.t_final,
        })
    }

    /// Validates the manufactured-solution study parameters.
    pub fn build_mms(&self) -> Result<(MmsCase, MmsSection, ConstitutiveModel), ConfigError> {
        let model = self.build_model()?;
        let mut issues = Vec::new();
        let Some(section) = self.mms.clone() else {
            return Err(ConfigError::Invalid(vec![ValidationIssue {
                key: "mms".into(),
                reason: "section is required for convergence runs".into(),
            }]));
        };
        if section.spatial_cells.is_empty() || section.temporal_taus.is_empty() {
            issues.push(ValidationIssue {
                key: "mms".into(),
                reason: "spatial_cells and temporal_taus must be nonempty".into(),
            });
        }
        let lo = section.s_mid - section.s_amp.abs();
        let hi = section.s_mid + section.s_amp.abs();
        let se = self.material.s_eps;
        if !(lo > se && hi < 1.0 - se) {
            issues.push(ValidationIssue {
                key: "mms".into(),
                reason: format!(
                    "manufactured saturation range [{lo}, {hi}] must stay inside ({se}, {})",
                    1.0 - se
                ),
            });
        }
        if !(section.tau_at_coarsest > 0.0 && section.t_final > 0.0) {
            issues.push(ValidationIssue {
                key: "mms".into(),
                reason: "tau_at_coarsest and t_final must be positive".into(),
            });
        }
        if issues.is_empty() {
            Ok((section.case(), section, model))
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["closed_1d", "closed_2d", "driven_dirichlet_1d", "mms_1d"]
}

pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "closed_1d" => Some(CLOSED_1D),
        "closed_2d" => Some(CLOSED_2D),
        "driven_dirichlet_1d" => Some(DRIVEN_DIRICHLET_1D),
        "mms_1d" => Some(MMS_1D),
        _ => None,
    }
}

const CLOSED_1D: &str = r#"
mode = "simulate"

[material]
gamma_w = 1.0
gamma_n = 1.0
gamma_wn = 0.5
eta_w = 1.0
eta_n = 1.0
s_eps = 0.1
phi_m = 1.0

[constitutive]
rel_perm = "quadratic"

[mesh]
dim = 1
extents = [1.0]
cells = [64]
boundary = ["gamma2", "gamma2"]

[fields]
porosity = 1.0
permeability = 1.0

[initial]
kind = "cosine_s"
mid = 0.5
amp = 0.3

[time]
tau = 0.01
t_final = 1.0

[solver]
abs_tol = 1e-12

[output]
stride = 10
"#;

const CLOSED_2D: &str = r#"
mode = "simulate"

[material]
gamma_w = 1.0
gamma_n = 1.0
gamma_wn = 0.5
eta_w = 1.0
eta_n = 1.0
s_eps = 0.1
phi_m = 1.0

[constitutive]
rel_perm = "quadratic"

[mesh]
dim = 2
extents = [1.0, 1.0]
cells = [16, 16]
boundary = ["gamma2", "gamma2", "gamma2", "gamma2"]

[fields]
porosity = 1.0
permeability = 1.0

[initial]
kind = "cosine_s"
mid = 0.5
amp = 0.3

[time]
tau = 0.01
t_final = 1.0

[solver]
abs_tol = 1e-12

[output]
stride = 20
"#;

const DRIVEN_DIRICHLET_1D: &str = r#"
mode = "simulate"

[material]
gamma_w = 1.0
gamma_n = 1.0
gamma_wn = 0.5
eta_w = 1.0
eta_n = 1.0
s_eps = 0.1
phi_m = 1.0

[constitutive]
rel_perm = "quadratic"

[mesh]
dim = 1
extents = [1.0]
cells = [32]
boundary = ["gamma1", "gamma2"]

[fields]
porosity = 1.0
permeability = 1.0

[initial]
kind = "uniform_s"
s = 0.4

[boundary]
phi1 = { kind = "saturation_potential", s = 0.7 }
phi3 = { kind = "constant", value = 0.0 }

[time]
tau = 0.01
t_final = 0.5

[solver]
abs_tol = 1e-12

[output]
stride = 10
"#;

const MMS_1D: &str = r#"
mode = "convergence"

[material]
gamma_w = 1.0
gamma_n = 1.0
gamma_wn = 0.5
eta_w = 1.0
eta_n = 1.0
s_eps = 0.1
phi_m = 1.0

[constitutive]
rel_perm = "quadratic"

[mms]
s_mid = 0.5
s_amp = 0.25
p_amp = 0.2
decay = 1.0
spatial_cells = [16, 32, 64, 128]
tau_at_coarsest = 0.125
temporal_taus = [0.1, 0.05, 0.025]
temporal_cells = 256
t_final = 0.5

[solver]
abs_tol = 1e-12
"#;
