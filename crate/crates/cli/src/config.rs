//! Run configuration: built-in presets, overridden by a JSON file, overridden
//! by command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ccpf_hessian::model::BuiltinModel;
use ccpf_hessian::optimize::FitConfig;
use ccpf_hessian::{EstimatorConfig, LevelSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: String,
    pub theta: Vec<f64>,
    /// Discretization level used to simulate data.
    pub level: u32,
    /// Number of observations to simulate.
    pub n: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub fit: FitConfig,
    /// Levels visited by a sweep.
    pub levels: Vec<u32>,
    pub oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: String::new(),
            theta: Vec::new(),
            level: 10,
            n: 10,
            seed: 0,
            estimator: EstimatorConfig::default(),
            fit: FitConfig::default(),
            levels: Vec::new(),
            oracle: false,
        }
    }
}

impl RunConfig {
    /// Parameter values and experiment sizes for a built-in model. Desk scale
    /// shortens the horizon and replicate counts; `paper_scale` restores them.
    /// Fits use fewer replicates per iteration than one-off estimates.
    pub fn preset(model: &str, paper_scale: bool, fitting: bool) -> Result<Self> {
        let m = BuiltinModel::by_name(model)?;
        let theta = m.preset_theta();
        let init = match model {
            "fhn" => vec![0.8; 4],
            _ => vec![0.1; theta.len()],
        };
        let learning_rate = match model {
            "mou2d" => 0.005,
            "fhn" => 0.001,
            _ => 0.002,
        };
        let mut fit = FitConfig {
            init,
            learning_rate,
            reference: Some(theta.clone()),
            tolerance: 0.1,
            ..FitConfig::preset(model)
        };
        let mut estimator = EstimatorConfig { levels: LevelSpec::Truncated { l_max: 4 }, ..Default::default() };
        let mut config = RunConfig {
            model: model.to_string(),
            theta,
            n: 10,
            levels: (2..=6).collect(),
            ..Default::default()
        };
        if fitting {
            estimator.replicates = 500;
        }
        if paper_scale {
            config.n = 500;
            config.levels = (2..=7).collect();
            estimator.replicates = if fitting { 2000 } else { 10_000 };
            if fitting {
                estimator.levels = LevelSpec::Truncated { l_max: 8 };
            }
            fit.tolerance = 0.02;
            fit.max_iter = 300;
        }
        config.estimator = estimator;
        config.fit = fit;
        Ok(config)
    }
}

/// Reads a JSON config. A run manifest is accepted too: its `config` block is
/// the configuration it was produced with.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let value = match value {
        Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            map.remove("config").unwrap()
        }
        v => v,
    };
    if !value.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(value)
}

/// Recursive merge of JSON objects; values in `top` win. Tagged enums (objects
/// with a `kind` field) are replaced whole.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if !t.contains_key("kind") => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset for `model`, then the file's values on top.
pub fn layered(model: &str, paper_scale: bool, fitting: bool, file: Option<Value>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::preset(model, paper_scale, fitting)?)?;
    if let Some(file) = file {
        merge(&mut value, file);
    }
    let config: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    if config.model != model {
        bail!("config names model {:?} but {model:?} was selected", config.model);
    }
    Ok(config)
}

/// Model named in a JSON config, if any.
pub fn model_in(value: &Value) -> Option<String> {
    value.get("model").and_then(Value::as_str).map(str::to_string)
}
