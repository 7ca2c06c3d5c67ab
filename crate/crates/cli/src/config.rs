use std::path::Path;

use hiu_core::learn::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub layers: Option<usize>,
    pub iterations: Option<usize>,
    pub lambda_c_init: Option<f64>,
    pub lambda_t_init: Option<f64>,
    pub freeze_lambda_c: bool,
    pub freeze_lambda_t: bool,
}

/// Reads a TOML training config (missing keys take their defaults) and
/// applies the overrides.
pub fn load(path: Option<&Path>, over: &Overrides) -> CliResult<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = over.seed {
        config.seed = s;
    }
    if let Some(l) = over.layers {
        config.model.layers = l;
    }
    if let Some(t) = over.iterations {
        config.car.iterations = t;
    }
    if let Some(c) = over.lambda_c_init {
        config.car.lambda_c_init = c;
    }
    if let Some(t) = over.lambda_t_init {
        config.car.lambda_t_init = t;
    }
    config.car.freeze_compat |= over.freeze_lambda_c;
    config.car.freeze_trans |= over.freeze_lambda_t;
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
