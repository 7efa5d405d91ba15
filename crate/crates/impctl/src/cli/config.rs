//! Run configuration: TOML sections, defaults, flag overrides and problem
//! resolution.

use serde::{Deserialize, Serialize};

use super::presets::{preset, Preset};
use crate::maxprin::{Direction, DEFAULT_EPS_GRID};
use crate::model::{CoefficientFamily, ConeSpec, Impulse, ImpulseControl, ProblemSpec, Semantics};

/// Failures while resolving a configuration.
#[derive(Debug)]
pub enum ConfigError {
    UnknownPreset(String),
    Malformed(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::UnknownPreset(name) => write!(f, "unknown preset `{name}`"),
            ConfigError::Malformed(msg) => write!(f, "malformed config: {msg}"),
        }
    }
}

/// `[problem]`: scalar problem data and the solver domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub horizon: Option<f64>,
    pub tau0: Option<f64>,
    pub ell0: Option<f64>,
    pub mu: Option<f64>,
    pub semantics: Option<Semantics>,
    pub max_impulses: Option<usize>,
    pub x0: Option<f64>,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
}

/// `[coefficients.*]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    pub drift: Option<CoefficientFamily>,
    pub diffusion: Option<CoefficientFamily>,
}

/// `[costs.*]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    pub running: Option<CoefficientFamily>,
    pub terminal: Option<CoefficientFamily>,
    pub impulse: Option<CoefficientFamily>,
}

/// `[solver]`: QVI grid and iteration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub x_nodes: usize,
    pub t_nodes: usize,
    pub tau_count: usize,
    /// Lattice points per cone ray; derived from the size cap when absent.
    pub per_ray: Option<usize>,
    pub tol: f64,
    pub max_iter: usize,
    pub cfl: f64,
    /// Also solve on the grid with Δx and Δt halved.
    pub refine: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            x_nodes: 200,
            t_nodes: 200,
            tau_count: 5,
            per_ray: None,
            tol: 1e-8,
            max_iter: 50,
            cfl: 0.9,
            refine: true,
        }
    }
}

/// `[simulation]`: Monte Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Paths written to the trajectory dump.
    pub dump_paths: usize,
    /// Basis degree of the adjoint regressions.
    pub degree: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            paths: 10_000,
            steps: 200,
            seed: 0,
            dump_paths: 8,
            degree: 3,
        }
    }
}

/// Where the candidate optimal control comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlSource {
    /// The preset's control if it has one, else the QVI extraction.
    Auto,
    Preset,
    Qvi,
    Explicit,
    None,
}

/// `[control]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub source: ControlSource,
    /// `[[time, size], ...]` for the explicit source.
    pub impulses: Vec<[f64; 2]>,
    /// Fraction of realized paths an extracted impulse must appear on.
    pub min_fraction: f64,
    /// QVI grid used for extraction.
    pub x_nodes: usize,
    pub t_nodes: usize,
    pub paths: usize,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            source: ControlSource::Auto,
            impulses: Vec::new(),
            min_fraction: 0.5,
            x_nodes: 399,
            t_nodes: 399,
            paths: 2000,
        }
    }
}

/// `[perturbation]`: the spike perturbation of the duality and
/// variational-inequality checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSection {
    pub index: usize,
    pub direction: Direction,
    pub eps: f64,
    pub eps_bar: f64,
    pub target: f64,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        PerturbationSection {
            index: 1,
            direction: Direction::Forward,
            eps: 0.05,
            eps_bar: 0.05,
            target: 0.0,
        }
    }
}

/// `[expansion]`: the Taylor-order check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSection {
    pub index: usize,
    pub direction: Direction,
    pub target: f64,
    pub eps_grid: Vec<f64>,
    pub coupling: f64,
    pub m: Vec<u32>,
}

impl Default for ExpansionSection {
    fn default() -> Self {
        ExpansionSection {
            index: 1,
            direction: Direction::Forward,
            target: 0.0,
            eps_grid: DEFAULT_EPS_GRID.to_vec(),
            coupling: 1.0,
            m: vec![1, 2],
        }
    }
}

/// `[mp]`: maximum-principle settings and the tested perturbation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpSection {
    pub eta_points: usize,
    /// Window of the MP1 Hamiltonian average; `0` runs size-only checks.
    pub window: f64,
    /// Size weights `ε` combined with every η of the grid.
    pub size_weights: Vec<f64>,
    /// Moment shifts `ε̄` tried in both directions where admissible.
    pub shifts: Vec<f64>,
}

impl Default for MpSection {
    fn default() -> Self {
        MpSection {
            eta_points: 9,
            window: 0.05,
            size_weights: vec![0.1, 0.05, 0.025],
            shifts: vec![0.05, 0.1],
        }
    }
}

/// `[dpp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DppSection {
    pub points: usize,
    pub delta: f64,
}

impl Default for DppSection {
    fn default() -> Self {
        DppSection {
            points: 20,
            delta: 0.05,
        }
    }
}

/// `[validate]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub samples: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection { samples: 400 }
    }
}

/// Whole configuration file; every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub problem: ProblemSection,
    pub cone: Option<ConeSpec>,
    pub coefficients: CoefficientsSection,
    pub costs: CostsSection,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
    pub control: ControlSection,
    pub perturbation: PerturbationSection,
    pub expansion: ExpansionSection,
    pub mp: MpSection,
    pub dpp: DppSection,
    pub validate: ValidateSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.preset {
            self.preset = Some(p.clone());
        }
        if let Some(s) = o.seed {
            self.simulation.seed = s;
        }
        if let Some(p) = o.paths {
            self.simulation.paths = p;
        }
        if let Some(s) = o.steps {
            self.simulation.steps = s;
        }
    }

    /// True when any problem field overrides the preset data.
    pub fn overrides_problem(&self) -> bool {
        self.problem != ProblemSection::default()
            || self.cone.is_some()
            || self.coefficients != CoefficientsSection::default()
            || self.costs != CostsSection::default()
    }

    /// Builds the problem from the preset (if any) and the file sections.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let base: Option<Preset> = match &self.preset {
            Some(name) => {
                Some(preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?)
            }
            None => None,
        };
        let missing = |what: &str| {
            ConfigError::Malformed(format!("`{what}` is required when no preset is given"))
        };
        let pick = |v: Option<CoefficientFamily>,
                    b: Option<&CoefficientFamily>,
                    what: &str|
         -> Result<CoefficientFamily, ConfigError> {
            v.or_else(|| b.cloned()).ok_or_else(|| missing(what))
        };
        let bs = base.as_ref().map(|p| &p.spec);
        let num = |v: Option<f64>, b: Option<f64>, what: &str| v.or(b).ok_or_else(|| missing(what));
        let p = &self.problem;
        let spec = ProblemSpec {
            dim: 1,
            horizon: num(p.horizon, bs.map(|s| s.horizon), "problem.horizon")?,
            tau0: num(p.tau0, bs.map(|s| s.tau0), "problem.tau0")?,
            drift: pick(
                self.coefficients.drift.clone(),
                bs.map(|s| &s.drift),
                "coefficients.drift",
            )?,
            diffusion: pick(
                self.coefficients.diffusion.clone(),
                bs.map(|s| &s.diffusion),
                "coefficients.diffusion",
            )?,
            running_cost: pick(
                self.costs.running.clone(),
                bs.map(|s| &s.running_cost),
                "costs.running",
            )?,
            terminal_cost: pick(
                self.costs.terminal.clone(),
                bs.map(|s| &s.terminal_cost),
                "costs.terminal",
            )?,
            impulse_cost: pick(
                self.costs.impulse.clone(),
                bs.map(|s| &s.impulse_cost),
                "costs.impulse",
            )?,
            ell0: num(p.ell0, bs.map(|s| s.ell0), "problem.ell0")?,
            mu: num(p.mu, bs.map(|s| s.mu), "problem.mu")?,
            cone: self
                .cone
                .clone()
                .or_else(|| bs.map(|s| s.cone.clone()))
                .ok_or_else(|| missing("cone"))?,
            semantics: p.semantics.or(bs.map(|s| s.semantics)).unwrap_or_default(),
            max_impulses: p.max_impulses.or(bs.map(|s| s.max_impulses)).unwrap_or(20),
        };
        spec.check()
            .map_err(|e| ConfigError::Malformed(e.to_string()))?;
        let x0 = num(p.x0, base.as_ref().map(|b| b.x0[0]), "problem.x0")?;
        let x_min = num(p.x_min, base.as_ref().map(|b| b.x_min), "problem.x_min")?;
        let x_max = num(p.x_max, base.as_ref().map(|b| b.x_max), "problem.x_max")?;
        let exact = !self.overrides_problem();
        let explicit = ImpulseControl {
            start_time: spec.tau0,
            impulses: self
                .control
                .impulses
                .iter()
                .map(|[t, s]| Impulse {
                    time: *t,
                    size: vec![*s],
                })
                .collect(),
        };
        Ok(Resolved {
            preset_control: if exact {
                base.as_ref().and_then(|b| b.control.clone())
            } else {
                None
            },
            closed_form: if exact {
                base.as_ref().and_then(|b| b.closed_form)
            } else {
                None
            },
            spec,
            x0,
            x_min,
            x_max,
            explicit,
        })
    }
}

/// Problem data after merging the preset and the file.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: ProblemSpec,
    pub x0: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub preset_control: Option<ImpulseControl>,
    pub closed_form: Option<fn(f64, f64, f64) -> f64>,
    pub explicit: ImpulseControl,
}
