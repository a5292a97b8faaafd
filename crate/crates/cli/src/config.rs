use std::path::{Path, PathBuf};

use friendbounds::data::{EdgeSchema, Schema};
use friendbounds::instruments::ProbitSpec;
use friendbounds::montecarlo::McConfig;
use friendbounds::pipeline::EstimationConfig;
use friendbounds::sim::{LinearDgpConfig, SimConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolve `p` against the directory holding the config file.
pub fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config_path.parent().unwrap_or(Path::new(".")).join(p)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: Option<u64>,
    /// Structural generator settings; used unless `linear` is given.
    pub structural: Option<SimConfig>,
    pub linear: Option<LinearDgpConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub individuals: PathBuf,
    #[serde(default)]
    pub edges: Option<PathBuf>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default)]
    pub edge_schema: EdgeSchema,
}

/// Dyadic probit whose predicted in-degree is attached as `pred_indegree`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbitConfig {
    pub spec: ProbitSpec,
    /// Receiver characteristics copied onto each dyad.
    pub receiver_columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub probit: Option<ProbitConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSetConfig {
    pub label: String,
    #[serde(default)]
    pub controls: Vec<String>,
    #[serde(default)]
    pub absorb: Option<String>,
    #[serde(default)]
    pub dummies: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    /// Variables the instrument should not predict.
    pub predetermined: Vec<String>,
    /// Earnings column for the augmentation check; none skips it.
    #[serde(default)]
    pub earnings: Option<String>,
    /// Nested control sets for the residual-variation table.
    #[serde(default)]
    pub residual_sets: Vec<ControlSetConfig>,
    /// CDF thresholds; empty uses the distinct treatment values.
    #[serde(default)]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub seed: Option<u64>,
    pub replications: usize,
    pub structural: Option<SimConfig>,
    pub linear: Option<LinearDgpConfig>,
    /// Defaults depend on the generator.
    pub estimation: Option<EstimationConfig>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            seed: None,
            replications: McConfig::default().replications,
            structural: None,
            linear: None,
            estimation: None,
        }
    }
}

impl MonteCarloConfig {
    pub fn to_mc(&self) -> McConfig {
        let base = match &self.linear {
            Some(l) => McConfig::linear(l.clone()),
            None => McConfig {
                structural: self.structural.clone(),
                ..McConfig::default()
            },
        };
        McConfig {
            replications: self.replications,
            estimation: self.estimation.clone().unwrap_or(base.estimation.clone()),
            ..base
        }
    }
}
