//! Experiment configuration: a JSON file with strict keys, flag overrides on
//! top, defaults underneath. Precedence is flags > file > defaults, except
//! the output directory where the BDLAB_OUT environment variable wins.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bdlab_core::{
    gen_leftcontext_task, gen_lookahead_task, ModelConfig, Strategy, TaskData, TrainConfig,
};

use crate::error::{config_err, CliError};

pub const ENV_OUT: &str = "BDLAB_OUT";
pub const DEFAULT_RS: [usize; 4] = [1, 2, 4, 8];

/// Model shape without the data-dependent vocabulary size, which always
/// comes from the generated task's tokenizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub dropout_p: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            n_layers: 6,
            d_ff: 128,
            rope_base: 10_000.0,
            dropout_p: 0.0,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            rope_base: self.rope_base,
            dropout_p: self.dropout_p,
        }
    }
}

/// The experiment file. Unknown keys are rejected; absent keys take the
/// defaults below. The resolved value is echoed into every output artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// "lookahead" or "leftcontext".
    pub task: String,
    pub n_sentences: usize,
    pub data_seed: u64,
    pub pretrain_steps: usize,
    pub out_dir: String,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            task: "lookahead".to_string(),
            n_sentences: 2000,
            data_seed: 42,
            pretrain_steps: 200,
            out_dir: "runs".to_string(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// BDLAB_OUT > --out flag > config file's out_dir.
pub fn resolve_out_dir(cfg_out: &str, flag: Option<&Path>) -> PathBuf {
    if let Ok(env) = std::env::var(ENV_OUT) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    match flag {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(cfg_out),
    }
}

pub fn generate(task: &str, n_sentences: usize, seed: u64) -> Result<TaskData, CliError> {
    match task {
        "lookahead" => Ok(gen_lookahead_task(n_sentences, seed)?),
        "leftcontext" => Ok(gen_leftcontext_task(n_sentences, seed)?),
        other => config_err(format!(
            "unknown task '{other}', expected 'lookahead' or 'leftcontext'"
        )),
    }
}

/// Repetition composes only with causal masking; the unmasking strategies
/// already see the whole sequence, and plain masked IS repeat at r = 0.
pub fn check_strategy_combo(strategy: Strategy, r: usize) -> Result<(), CliError> {
    if r > 0 && strategy != Strategy::Repeat {
        return config_err(format!(
            "--r {r} is only valid with --strategy repeat (got {})",
            strategy.as_str()
        ));
    }
    Ok(())
}

pub fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    s.parse().map_err(CliError::Config)
}
