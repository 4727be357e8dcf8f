//! Resolved per-command settings. Values are layered as built-in default,
//! then the command's table from a config file, then command-line flags.

use std::path::{Path, PathBuf};

use catext_core::mining::{MiningConfig, MiningMode};
use catext_core::toydet::{ScenarioSpec, TrainConfig};
use catext_core::weights::{GompertzParams, Strategy, StrategyConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};
use crate::files;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub input: PathBuf,
    /// Category names moved to the held-out view.
    pub held: Vec<String>,
    /// Base name of the two views; defaults to the input file stem.
    pub name: Option<String>,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            input: PathBuf::new(),
            held: Vec::new(),
            name: None,
        }
    }
}

pub type GenSettings = ScenarioSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub scenario: PathBuf,
    /// Mined annotations (retraining only).
    pub pseudo: Option<PathBuf>,
    /// High-recall mined annotations for the safe-negatives strategy.
    pub high_recall: Option<PathBuf>,
    pub strategy: Strategy,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_steps: Vec<usize>,
    pub seed: u64,
    pub lambda: f64,
    pub beta: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub init_std: f64,
    pub prior: f64,
    pub tau_s: f64,
    pub gompertz_a: f64,
    pub gompertz_b: f64,
    pub gompertz_c: f64,
    pub eta_prime: f64,
}

impl TrainSettings {
    pub fn with_strategy(strategy: Strategy) -> Self {
        let t = TrainConfig::default();
        let s = StrategyConfig::new(strategy);
        TrainSettings {
            scenario: PathBuf::new(),
            pseudo: None,
            high_recall: None,
            strategy,
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_steps: t.lr_steps,
            seed: t.seed,
            lambda: t.lambda,
            beta: t.beta,
            pos_iou: t.pos_iou,
            neg_iou: t.neg_iou,
            init_std: t.init_std,
            prior: t.prior,
            tau_s: s.tau_s,
            gompertz_a: s.gompertz.a,
            gompertz_b: s.gompertz.b,
            gompertz_c: s.gompertz.c,
            eta_prime: s.eta_prime,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_steps: self.lr_steps.clone(),
            seed: self.seed,
            strategy: StrategyConfig {
                strategy: self.strategy,
                tau_s: self.tau_s,
                gompertz: GompertzParams {
                    a: self.gompertz_a,
                    b: self.gompertz_b,
                    c: self.gompertz_c,
                },
                eta_prime: self.eta_prime,
            },
            lambda: self.lambda,
            beta: self.beta,
            pos_iou: self.pos_iou,
            neg_iou: self.neg_iou,
            init_std: self.init_std,
            prior: self.prior,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::with_strategy(Strategy::ConflictFree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineSettings {
    pub scenario: PathBuf,
    pub model: PathBuf,
    pub mode: MiningMode,
    pub passes: usize,
    pub eta: f64,
    pub dropout: f64,
    pub tau_nms: f64,
    pub min_score: f64,
    pub seed: u64,
}

impl Default for MineSettings {
    fn default() -> Self {
        let m = MiningConfig::default();
        MineSettings {
            scenario: PathBuf::new(),
            model: PathBuf::new(),
            mode: m.mode,
            passes: m.passes,
            eta: m.eta,
            dropout: m.dropout,
            tau_nms: m.tau_nms,
            min_score: m.min_score,
            seed: 0,
        }
    }
}

impl MineSettings {
    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            passes: self.passes,
            tau_nms: self.tau_nms,
            eta: self.eta,
            dropout: self.dropout,
            mode: self.mode,
            min_score: self.min_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub scenario: PathBuf,
    pub model: PathBuf,
    pub tau_nms: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            scenario: PathBuf::new(),
            model: PathBuf::new(),
            tau_nms: catext_core::mining::TAU_NMS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    /// `label=path` pairs of eval reports, in table order.
    pub runs: Vec<String>,
}

/// A parsed config file: one table per command name.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub path: Option<PathBuf>,
    tables: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let table: toml::Table = files::read_toml(path)?;
        let Value::Object(tables) = serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))? else {
            unreachable!("a TOML table converts to a JSON object")
        };
        Ok(ConfigFile {
            path: Some(path.to_path_buf()),
            tables,
        })
    }

    fn section(&self, command: &str) -> Result<Map<String, Value>> {
        match self.tables.get(command) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(_) => Err(CliError::Config(format!("`{command}` in the config file must be a table"))),
        }
    }
}

/// Layers `file`'s table for `command` and then `flags` over `defaults`.
pub fn resolve<T>(defaults: T, file: &ConfigFile, command: &str, flags: Map<String, Value>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Value::Object(mut merged) = serde_json::to_value(defaults).map_err(|e| CliError::Config(e.to_string()))? else {
        return Err(CliError::Config("settings must be a table".into()));
    };
    for layer in [file.section(command)?, flags] {
        for (k, v) in layer {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(format!("{command}: {e}")))
}
