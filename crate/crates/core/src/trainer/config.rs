use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BatchMode;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Scratch,
    UpcycleFull,
    UpcycleSharedOnly,
}

/// Where training text comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Plain files, concatenated in order. Empty selects the generated corpus.
    pub files: Vec<PathBuf>,
    pub synth_bytes: usize,
    pub synth_seed: u64,
    pub val_ratio: f64,
    /// Cap on validation windows per evaluation (0 = all).
    pub max_val_windows: usize,
    pub batch_mode: BatchMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            files: Vec::new(),
            synth_bytes: 2_000_000,
            synth_seed: 7,
            val_ratio: 0.005,
            max_val_windows: 0,
            batch_mode: BatchMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub min_lr_mult: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub log_routing_on_eval: bool,
    pub init_mode: InitMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_checkpoint_path: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 2.5e-4,
            min_lr_mult: 0.1,
            warmup_steps: 0,
            total_steps: 3000,
            batch_size: 16,
            grad_clip: 0.1,
            weight_decay: 0.01,
            seed: 42,
            checkpoint_every: 300,
            eval_every: 300,
            log_routing_on_eval: true,
            init_mode: InitMode::Scratch,
            dense_checkpoint_path: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if self.checkpoint_every == 0 || self.total_steps % self.checkpoint_every != 0 {
            return bad(format!(
                "checkpoint_every={} must divide total_steps={}",
                self.checkpoint_every, self.total_steps
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_mult) {
            return bad(format!("invalid learning rate {} / min multiplier {}", self.lr, self.min_lr_mult));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip and weight_decay must be non-negative".into());
        }
        if self.init_mode != InitMode::Scratch {
            if self.dense_checkpoint_path.is_none() {
                return bad("upcycling needs dense_checkpoint_path".into());
            }
            if self.model.moe.is_dense() {
                return bad("cannot upcycle into a dense model".into());
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    /// Apply `dotted.key=value` overrides; values parse as TOML and fall
    /// back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<RunConfig> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("invalid override: {e}")))
    }

    /// Short stable digest of the serialised config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}
