use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientModel, QuadratureSettings};
use crate::error::{Error, Result};
use crate::fokkerplanck::KS_C_ALPHA_001;
use crate::generators::{default_dictionary, CutoffFunction, TestFunction};
use crate::paths::{Atom, ProcessSpec};
use crate::timechange::{SolverSettings, TimeChangeOptions, DEFAULT_TOL};

pub const SCHEMA: &str = "tclab.scenario/1";

/// Smallest accepted Monte Carlo sample size.
pub const MIN_PATHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Classify,
    Regularity,
    Fp,
    Martingale,
    Spacetime,
    Pathwise,
    Uniqueness,
}

impl CheckKind {
    /// Every check, in execution order.
    pub const ALL: [CheckKind; 7] = [
        CheckKind::Classify,
        CheckKind::Regularity,
        CheckKind::Fp,
        CheckKind::Martingale,
        CheckKind::Spacetime,
        CheckKind::Pathwise,
        CheckKind::Uniqueness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Classify => "classify",
            CheckKind::Regularity => "regularity",
            CheckKind::Fp => "fp",
            CheckKind::Martingale => "martingale",
            CheckKind::Spacetime => "spacetime",
            CheckKind::Pathwise => "pathwise",
            CheckKind::Uniqueness => "uniqueness",
        }
    }

    /// Whether the check consumes the simulated ensemble.
    pub fn needs_ensemble(self) -> bool {
        matches!(self, CheckKind::Fp | CheckKind::Martingale | CheckKind::Spacetime | CheckKind::Uniqueness)
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Report grid: `points` equally spaced times on `[0, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub points: usize,
    /// Defaults to `t0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarlo {
    pub n: usize,
    pub mesh: f64,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_law: Option<Vec<Atom>>,
}

/// Numerical knobs. Every field has a default and can be overridden from the
/// command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub solver_tol: f64,
    pub solver_h_max: f64,
    pub divergence_threshold: f64,
    pub t0_margin: f64,
    /// Martingale and space-time means pass within this many standard errors.
    pub martingale_sigmas: f64,
    pub ks_c_alpha: f64,
    /// Sub-grid refinement of the report grid for time integrals.
    pub subgrid_factor: usize,
    /// Mesh refinement factor of the pathwise and regularity checks.
    pub refinement_factor: usize,
    pub pathwise_slack: f64,
    /// Euler-Maruyama step; defaults to the Monte Carlo mesh.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_step: Option<f64>,
    pub classify_epsilon: f64,
    pub quadrature_cauchy_tol: f64,
    pub quadrature_ratio_tol: f64,
    pub regularity_paths: usize,
    pub regularity_min_consistent: f64,
    pub regularity_min_flagged: f64,
    pub max_retries: u32,
}

impl Default for Tolerances {
    fn default() -> Self {
        let quad = QuadratureSettings::default();
        Self {
            solver_tol: DEFAULT_TOL,
            solver_h_max: SolverSettings::default().h_max,
            divergence_threshold: 1e8,
            t0_margin: 1e-3,
            martingale_sigmas: 3.0,
            ks_c_alpha: KS_C_ALPHA_001,
            subgrid_factor: 4,
            refinement_factor: 4,
            pathwise_slack: 1e-8,
            em_step: None,
            classify_epsilon: 0.5,
            quadrature_cauchy_tol: quad.cauchy_tol,
            quadrature_ratio_tol: quad.ratio_tol,
            regularity_paths: 1000,
            regularity_min_consistent: 0.99,
            regularity_min_flagged: 0.5,
            max_retries: 10,
        }
    }
}

impl Tolerances {
    /// Applies `key=value` pairs separated by commas, e.g.
    /// `solver_tol=1e-10,ks_c_alpha=1.36`. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &str) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for pair in overrides.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, raw) = pair.split_once('=').ok_or_else(|| Error::Config(format!("tolerance override `{pair}` is not key=value")))?;
            let parsed: toml::Table =
                toml::from_str(&format!("v = {}", raw.trim())).map_err(|e| Error::Config(format!("tolerance `{key}`: {e}")))?;
            let key = key.trim().to_string();
            let value = match (&parsed["v"], table.get(&key)) {
                (toml::Value::Integer(i), Some(toml::Value::Float(_))) => toml::Value::Float(*i as f64),
                (v, _) => v.clone(),
            };
            table.insert(key, value);
        }
        let out: Tolerances = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("tolerance overrides: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("solver_tol", self.solver_tol),
            ("solver_h_max", self.solver_h_max),
            ("divergence_threshold", self.divergence_threshold),
            ("martingale_sigmas", self.martingale_sigmas),
            ("ks_c_alpha", self.ks_c_alpha),
            ("classify_epsilon", self.classify_epsilon),
            ("quadrature_cauchy_tol", self.quadrature_cauchy_tol),
            ("quadrature_ratio_tol", self.quadrature_ratio_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tolerances.{name} must be positive, got {v}")));
            }
        }
        if !(self.t0_margin > 0.0 && self.t0_margin < 1.0) {
            return Err(Error::Config("tolerances.t0_margin must lie in (0, 1)".into()));
        }
        if !(self.pathwise_slack >= 0.0) {
            return Err(Error::Config("tolerances.pathwise_slack must be nonnegative".into()));
        }
        if self.subgrid_factor == 0 || self.refinement_factor == 0 || self.regularity_paths == 0 {
            return Err(Error::Config("subgrid_factor, refinement_factor and regularity_paths must be positive".into()));
        }
        for (name, v) in [("regularity_min_consistent", self.regularity_min_consistent), ("regularity_min_flagged", self.regularity_min_flagged)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("tolerances.{name} must lie in [0, 1]")));
            }
        }
        if let Some(step) = self.em_step {
            if !(step > 0.0) {
                return Err(Error::Config("tolerances.em_step must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn timechange_options(&self) -> TimeChangeOptions {
        TimeChangeOptions {
            solver: SolverSettings { tol: self.solver_tol, h_max: self.solver_h_max, ..SolverSettings::default() },
            divergence_threshold: self.divergence_threshold,
            t0_margin: self.t0_margin,
        }
    }

    pub fn quadrature(&self) -> QuadratureSettings {
        QuadratureSettings {
            divergence_threshold: self.divergence_threshold,
            cauchy_tol: self.quadrature_cauchy_tol,
            ratio_tol: self.quadrature_ratio_tol,
            ..QuadratureSettings::default()
        }
    }
}

/// Test function and time profile of the martingale and space-time checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleSettings {
    /// Start times; defaults to `0`, `0.3` and `t0 + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<Vec<f64>>,
    #[serde(default = "default_cutoff")]
    pub cutoff: CutoffFunction,
    #[serde(default = "default_function")]
    pub function: TestFunction,
}

fn default_cutoff() -> CutoffFunction {
    CutoffFunction { t_on: 0.0, t_plateau_end: 0.5, t_off: 1.5 }
}

fn default_function() -> TestFunction {
    TestFunction::gauss_poly(2, 1.0)
}

impl Default for MartingaleSettings {
    fn default() -> Self {
        Self { s0: None, cutoff: default_cutoff(), function: default_function() }
    }
}

/// A declarative scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    pub process: ProcessSpec,
    pub coefficient: CoefficientModel,
    /// Empty selects the default eight-bump dictionary around `x0`.
    #[serde(default)]
    pub dictionary: Vec<TestFunction>,
    pub grid: GridSpec,
    pub monte_carlo: MonteCarlo,
    #[serde(default)]
    pub checks: Vec<CheckKind>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub martingale: MartingaleSettings,
}

impl Scenario {
    /// Parses and validates a TOML scenario.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.schema != SCHEMA {
            return Err(Error::Config(format!("unsupported schema `{}`, expected `{SCHEMA}`", self.schema)));
        }
        self.process.validate().map_err(|e| Error::Config(format!("process: {e}")))?;
        self.coefficient.validate().map_err(|e| Error::Config(format!("coefficient: {e}")))?;
        let mc = &self.monte_carlo;
        if mc.n < MIN_PATHS {
            return Err(Error::Config(format!("monte_carlo.n = {} is below the minimum of {MIN_PATHS}", mc.n)));
        }
        if !(mc.mesh > 0.0 && mc.mesh.is_finite()) {
            return Err(Error::Config(format!("monte_carlo.mesh must be positive, got {}", mc.mesh)));
        }
        if let Some(law) = &mc.initial_law {
            let total: f64 = law.iter().map(|a| a.probability).sum();
            if law.is_empty() || law.iter().any(|a| !(a.probability >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config("monte_carlo.initial_law must be a probability vector".into()));
            }
            for a in law {
                self.process.with_start(a.value).map_err(|e| Error::Config(format!("monte_carlo.initial_law: {e}")))?;
            }
        }
        if self.grid.points < 2 {
            return Err(Error::Config("grid.points must be at least 2".into()));
        }
        let end = self.grid_end();
        if !(end > 0.0 && end <= self.coefficient.t0) {
            return Err(Error::Config(format!("grid.end = {end} must lie in (0, t0 = {}]", self.coefficient.t0)));
        }
        for (i, f) in self.dictionary.iter().enumerate() {
            f.validate().map_err(|e| Error::Config(format!("dictionary[{i}]: {e}")))?;
        }
        self.martingale.cutoff.validate().map_err(|e| Error::Config(format!("martingale.cutoff: {e}")))?;
        self.martingale.function.validate().map_err(|e| Error::Config(format!("martingale.function: {e}")))?;
        if self.spacetime_starts().iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("martingale.s0 values must be finite and nonnegative".into()));
        }
        self.tolerances.validate().map_err(config)?;
        Ok(())
    }

    pub fn grid_end(&self) -> f64 {
        self.grid.end.unwrap_or(self.coefficient.t0)
    }

    /// The report grid refined `factor` times: `points` is `(grid.points - 1)
    /// * factor + 1`. The report grid is every `factor`-th node.
    pub fn fine_grid(&self, factor: usize) -> Vec<f64> {
        let cells = (self.grid.points - 1) * factor;
        let end = self.grid_end();
        let mut g: Vec<f64> = (0..=cells).map(|k| k as f64 * end / cells as f64).collect();
        g[cells] = end;
        g
    }

    pub fn tgrid(&self) -> Vec<f64> {
        self.fine_grid(1)
    }

    pub fn dictionary(&self) -> Vec<TestFunction> {
        if self.dictionary.is_empty() {
            default_dictionary(self.process.x0())
        } else {
            self.dictionary.clone()
        }
    }

    pub fn spacetime_starts(&self) -> Vec<f64> {
        self.martingale.s0.clone().unwrap_or_else(|| vec![0.0, 0.3, self.coefficient.t0 + 1.0])
    }

    /// Requested checks, deduplicated, in execution order.
    pub fn requested(&self) -> Vec<CheckKind> {
        CheckKind::ALL.into_iter().filter(|c| self.checks.contains(c)).collect()
    }
}
