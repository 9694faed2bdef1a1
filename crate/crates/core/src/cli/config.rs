//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::examples::ExampleParams;
use crate::linalg::Norm;
use crate::nonlinearity::Profile;
use crate::rates::{RateKind, RateParams};
use crate::shadow_continuous::ContinuousSolveOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Dichotomy, Lipschitz and norm-lemma certificates only.
    Certify,
    /// Solve for the shadow and verify it.
    #[default]
    Shadow,
    /// Certify and shadow.
    Verify,
    /// Shadow plus the boundary-value oracle (discrete systems).
    OracleCheck,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode {s:?}; expected certify, shadow, verify or oracle-check")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    pub system: SystemSource,
    #[serde(default)]
    pub nonlinearity: Option<NonlinearitySpec>,
    #[serde(default)]
    pub pseudo_orbit: Option<PseudoOrbitSource>,
    #[serde(default)]
    pub solver: ContinuousSolveOptions,
    #[serde(default)]
    pub output: OutputConfig,
    /// Also run the boundary-value oracle.
    #[serde(default)]
    pub oracle_check: bool,
    /// Seed of the sampled certificate checks (Lipschitz bound, norm lemmas).
    #[serde(default)]
    pub certify_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSource {
    Catalog {
        name: String,
        #[serde(default)]
        params: ExampleParams,
    },
    Inline(InlineSystem),
}

/// A discrete system `x_{n+1} = A_n x_n + f_n(x_n)` given by its matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSystem {
    pub dim: usize,
    pub horizon: usize,
    /// One row-major matrix used at every step.
    #[serde(default)]
    pub matrix: Option<Vec<f64>>,
    /// Row-major `A_0, .., A_{N-1}`.
    #[serde(default)]
    pub matrices: Option<Vec<Vec<f64>>>,
    pub projections: ProjectionSpec,
    pub rate: RateSpec,
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectionSpec {
    /// First `stable` coordinates stable, next `unstable` unstable, the rest center.
    Coordinate { stable: usize, unstable: usize },
    /// Constant row-major projections.
    Explicit { p1: Vec<f64>, p2: Vec<f64>, p3: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub kind: RateKind,
    #[serde(default)]
    pub params: RateParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstantsSpec {
    Given {
        big_d: f64,
        lambda: f64,
        d: f64,
    },
    /// Smallest `D` that certifies with the given `lambda` and `d`.
    Fit {
        lambda: f64,
        d: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySpec {
    /// Defaults to the catalog entry's profile, or `zero` for inline systems.
    #[serde(default)]
    pub profile: Option<Profile>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PseudoOrbitSource {
    File(String),
    Generate(GenerateSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    #[serde(default)]
    pub base: Base,
    /// Initial state of the base orbit; zero by default.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    /// Grid step for continuous systems; defaults to the catalog grid.
    #[serde(default)]
    pub step: Option<f64>,
    /// Grid end for continuous systems; defaults to the catalog grid.
    #[serde(default)]
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    /// Exact orbit (discrete stepping, or RK4 with fine substeps in continuous time).
    #[default]
    Exact,
    /// Explicit Euler on the solve grid; continuous time only.
    Integrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    /// Target weighted defect.
    pub magnitude: f64,
    /// Node of the impulse; default 5.
    #[serde(default)]
    pub index: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Impulse,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out_dir() }
    }
}

fn default_out_dir() -> String {
    "shadow_forge_out".into()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that do not need the system itself.
    pub fn validate(&self) -> Result<()> {
        if let SystemSource::Inline(s) = &self.system {
            if s.matrix.is_some() == s.matrices.is_some() {
                return Err(Error::Config("inline system needs exactly one of `matrix` and `matrices`".into()));
            }
        }
        if let Some(n) = &self.nonlinearity {
            if !(n.c >= 0.0 && n.c.is_finite()) {
                return Err(Error::Config(format!("nonlinearity c must be finite and >= 0, got {}", n.c)));
            }
        }
        if let Some(PseudoOrbitSource::Generate(g)) = &self.pseudo_orbit {
            if let Some(p) = &g.perturbation {
                if !(p.magnitude > 0.0 && p.magnitude.is_finite()) {
                    return Err(Error::Config(format!("perturbation magnitude must be positive, got {}", p.magnitude)));
                }
                if p.kind == PerturbationKind::Noise && p.seed.is_none() {
                    return Err(Error::Config("noise perturbations need a seed".into()));
                }
            }
        }
        if self.solver.solve.tol <= 0.0 || self.solver.solve.max_iter == 0 {
            return Err(Error::Config("solver tol must be positive and max_iter at least 1".into()));
        }
        Ok(())
    }

    /// Applies `--seed` to a random perturbation.
    pub fn set_seed(&mut self, seed: u64) {
        self.certify_seed = seed;
        if let Some(PseudoOrbitSource::Generate(g)) = &mut self.pseudo_orbit {
            if let Some(p) = &mut g.perturbation {
                p.seed = Some(seed);
            }
        }
    }
}
