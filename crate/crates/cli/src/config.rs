//! Experiment configuration files.

use std::path::{Path, PathBuf};

use persist_lab::coeffspec::Family;
use persist_lab::heatfield::SpaceQuadrature;
use persist_lab::kernels::{KernelSpec, SandwichVariant};
use persist_lab::persist::{FitModel, GridPolicy, Interval, RelationInputs};
use persist_lab::sampler::{Coordinate, Grid, WhiteNoiseQuadrature};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    KernelCheck,
    GapReport,
    Sample,
    Persist,
    Fit,
    Relations,
    Heat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub id: String,
    pub seed: u64,
    pub command: CommandName,
    #[serde(default = "empty_object")]
    pub parameters: serde_json::Value,
    /// Sweep roles this experiment's results fill, e.g. `"r1:constant"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roles: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let id_ok = !self.id.is_empty()
            && !self.id.starts_with('.')
            && self.id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !id_ok {
            return Err(CliError::Config(format!("id {:?} must be a plain file name", self.id)));
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be positive".into()));
        }
        self.parsed()?;
        Ok(())
    }

    /// Typed parameters for the command.
    pub fn parsed(&self) -> Result<Command, CliError> {
        fn typed<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T, CliError> {
            serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("parameters: {e}")))
        }
        let p = &self.parameters;
        Ok(match self.command {
            CommandName::KernelCheck => Command::KernelCheck(typed(p)?),
            CommandName::GapReport => Command::GapReport(typed(p)?),
            CommandName::Sample => Command::Sample(typed(p)?),
            CommandName::Persist => Command::Persist(typed(p)?),
            CommandName::Fit => Command::Fit(typed(p)?),
            CommandName::Relations => Command::Relations(typed(p)?),
            CommandName::Heat => Command::Heat(typed(p)?),
        })
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical =
            serde_json::to_vec(&serde_json::to_value(self).expect("config serializes")).expect("value serializes");
        hex(&Sha256::digest(&canonical))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[allow(clippy::large_enum_variant)]
pub enum Command {
    KernelCheck(KernelCheck),
    GapReport(GapParams),
    Sample(SampleParams),
    Persist(PersistParams),
    Fit(FitParams),
    Relations(RelationsParams),
    Heat(HeatParams),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelCheck {
    GammaIdentity {
        alphas: Vec<f64>,
    },
    WhiteNoiseCovariance {
        alphas: Vec<f64>,
        pairs: Vec<(f64, f64)>,
        #[serde(default)]
        quadrature: WhiteNoiseQuadrature,
    },
    Semigroup {
        cases: Vec<(f64, f64, f64)>,
        #[serde(default)]
        quadrature: SpaceQuadrature,
    },
    /// Heat-field temporal correlation in log time against the sech kernel.
    HeatTimeIdentity {
        d: usize,
        log_times: Vec<f64>,
    },
    KernelValues {
        kernel: KernelSpec,
        pairs: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GapParams {
    H2 {
        family: Family,
        degrees: Vec<usize>,
        delta: f64,
        grid_size: usize,
    },
    Hh1 {
        family: Family,
        degrees: Vec<usize>,
        delta: f64,
        grid_size: usize,
    },
    Sandwich {
        family: Family,
        degrees: Vec<usize>,
        ratio_bound: f64,
        delta: f64,
        variant: SandwichVariant,
        grid_size: usize,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridParams {
    Points { points: Vec<f64>, coordinate: Coordinate },
    Uniform { start: f64, end: f64, step: f64, coordinate: Coordinate },
    LogUniform { lo: f64, hi: f64, per_decade: usize, coordinate: Coordinate },
}

impl GridParams {
    pub fn build(&self) -> persist_lab::Result<Grid> {
        match self {
            GridParams::Points { points, coordinate } => Grid::new(points.clone(), *coordinate),
            GridParams::Uniform { start, end, step, coordinate } => Grid::uniform(*start, *end, *step, *coordinate),
            GridParams::LogUniform { lo, hi, per_decade, coordinate } => {
                Grid::log_uniform(*lo, *hi, *per_decade, *coordinate)
            }
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleSource {
    Kernel {
        kernel: KernelSpec,
    },
    Polynomial {
        coefficients: persist_lab::coeffspec::CoefficientSpec,
        #[serde(default = "yes")]
        normalized: bool,
    },
    WhiteNoise {
        alpha: f64,
        #[serde(default)]
        quadrature: WhiteNoiseQuadrature,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleParams {
    pub source: SampleSource,
    pub grid: GridParams,
    pub paths: usize,
    /// Also write the full ensemble as `ensemble.bin`.
    #[serde(default)]
    pub write_ensemble: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PersistTarget {
    Stationary {
        kernel: KernelSpec,
        dt: f64,
        horizons: Vec<f64>,
        #[serde(default)]
        level: f64,
    },
    Polynomial {
        family: Family,
        interval: Interval,
        degrees: Vec<usize>,
        #[serde(default)]
        grid: GridPolicy,
    },
    /// Two standard normals with correlation ρ, both below zero.
    Orthant { rhos: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersistParams {
    pub target: PersistTarget,
    pub paths: usize,
    #[serde(default)]
    pub fit: Option<FitModel>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitPointInput {
    pub scale: f64,
    pub p_hat: f64,
    pub trials: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitParams {
    pub model: FitModel,
    pub points: Vec<FitPointInput>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationsParams {
    pub inputs: RelationInputs,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeatParams {
    Time {
        d: usize,
        x: Vec<f64>,
        t_list: Vec<f64>,
        /// Grid points per unit of `ln t`.
        per_unit: f64,
        paths: usize,
    },
    Space {
        r_list: Vec<f64>,
        dx: f64,
        paths: usize,
    },
    Variance {
        d: usize,
        times: Vec<f64>,
        paths: usize,
    },
}
