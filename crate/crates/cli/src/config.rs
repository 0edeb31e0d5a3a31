use std::path::{Path, PathBuf};

use phaseshift::dataset::{DEFAULT_EPSILON, DEFAULT_RESOLUTION};
use phaseshift::harmonic::{CostWeights, SystemConfig};
use phaseshift::mlp::{RelabelConfig, TrainConfig};
use phaseshift::optimizer::GaConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "PHASESHIFT_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub weights: CostWeights,
    pub ga: GaConfig,
    pub network: Network,
    pub train: TrainConfig,
    pub relabel: RelabelConfig,
    pub dataset: DatasetSection,
    pub paths: Paths,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Network {
    pub hidden_widths: Vec<usize>,
}

impl Default for Network {
    fn default() -> Self {
        Network {
            hidden_widths: phaseshift::mlp::LayerSpec::PAPER_HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub count: usize,
    pub resolution: f64,
    pub epsilon: f64,
    pub inject_extremes: bool,
    /// Exhaustive-search step in degrees; absent means GA labels only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exhaustive_step_deg: Option<f64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            count: 10_000,
            resolution: DEFAULT_RESOLUTION,
            epsilon: DEFAULT_EPSILON,
            inject_extremes: true,
            exhaustive_step_deg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "dataset.csv".into(),
            model: "model.json".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub split: u64,
    pub evaluation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            dataset: 1,
            split: 1,
            evaluation: 2,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        RunConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn partial_files_override_defaults() {
        let cfg = RunConfig::parse(
            "[system]\nmodule_count = 6\n\n[network]\nhidden_widths = [8, 4]\n\n[train]\nmax_epochs = 3\n\n[relabel]\nrounds = 0\n\n[weights]\nwthd_harmonic_weights = { inverse_power = 1.5 }\n",
        )
        .unwrap();
        assert_eq!(cfg.system.module_count, 6);
        assert_eq!(cfg.system.inductance, 100e-6);
        assert_eq!(cfg.network.hidden_widths, vec![8, 4]);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(cfg.relabel.rounds, 0);
        assert_eq!(cfg.relabel.cost_tolerance, 0.01);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("[system]\nmodule_count = 4\ninductance = \"big\"\n").unwrap_err();
        assert!(err.contains("line 3"), "{err}");
        let err = RunConfig::parse("[sytem]\nmodule_count = 4\n").unwrap_err();
        assert!(err.contains("line 1"), "{err}");
        let err = RunConfig::parse("[ga]\npopulation = 4\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
    }
}
