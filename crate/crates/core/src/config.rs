//! Run configuration read from TOML, with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetConfig;
use crate::model::TowerConfig;
use crate::synth::WorldConfig;
use crate::text::DEFAULT_VOCAB_SIZE;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected section.key=value")]
    Override(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub user_layers: usize,
    pub user_heads: usize,
    pub ffn_hidden: usize,
    pub item_layers: usize,
    pub item_hidden: usize,
    pub max_history: usize,
    /// Target size of the subword vocabulary.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TowerConfig::desk(DEFAULT_VOCAB_SIZE, 1, 1);
        Self {
            d: t.d,
            user_layers: t.user_layers,
            user_heads: t.user_heads,
            ffn_hidden: t.ffn_hidden,
            item_layers: t.item_layers,
            item_hidden: t.item_hidden,
            max_history: t.max_history,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn tower(&self, vocab_len: usize, n_surfaces: usize, n_devices: usize) -> TowerConfig {
        TowerConfig {
            d: self.d,
            user_layers: self.user_layers,
            user_heads: self.user_heads,
            ffn_hidden: self.ffn_hidden,
            item_layers: self.item_layers,
            item_hidden: self.item_hidden,
            max_history: self.max_history,
            max_positions: self.max_history + 1,
            vocab_size: vocab_len,
            n_surfaces,
            n_devices,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Days at the end of the log held out for testing.
    pub test_days: u32,
    /// nDCG cutoff; 0 means the whole group.
    pub k: usize,
    /// Graded gains (click 1, cart and favourite 2, purchase 3) instead of binary.
    pub graded: bool,
    /// Number of seeds in an ablation, starting at the global seed.
    pub seeds: usize,
    pub recall_pool: usize,
    pub recall_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_days: 10,
            k: 0,
            graded: false,
            seeds: 3,
            recall_pool: 500,
            recall_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses `raw` as a TOML value; anything that is not valid TOML is taken
/// as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigFileError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigFileError::Override(assignment.to_string()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigFileError::Override(assignment.to_string()));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigFileError::Override(assignment.to_string()))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Builds a config from TOML text plus overrides applied in order, both
    /// layered over the defaults so a partial table keeps its other keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigFileError> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigFileError::Parse(e.to_string()))?;
        let mut root = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut root, file);
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigFileError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigFileError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigFileError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        let bad = |m: String| Err(ConfigFileError::Parse(m));
        self.world.validate().map_err(|e| ConfigFileError::Parse(e.to_string()))?;
        self.model
            .tower(self.model.vocab_size, self.world.n_surfaces, self.world.n_devices)
            .validate()
            .map_err(|e| ConfigFileError::Parse(e.to_string()))?;
        if self.eval.test_days == 0 || self.eval.test_days >= self.world.n_days {
            return bad(format!(
                "eval.test_days {} must be in 1..{}",
                self.eval.test_days, self.world.n_days
            ));
        }
        if self.eval.seeds == 0 {
            return bad("eval.seeds must be positive".into());
        }
        if self.dataset.max_history == 0 {
            return bad("dataset.max_history must be positive".into());
        }
        Ok(())
    }

    /// First day of the test period.
    pub fn boundary(&self) -> u32 {
        self.world.n_days - self.eval.test_days
    }

    /// Trainer settings carrying `seed`.
    pub fn trainer_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.trainer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn written_config_reads_back() {
        let mut c = RunConfig::default();
        c.world.n_users = 77;
        c.trainer.finetune.lr.loss_params = 0.5;
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::from_toml(
            "seed = 4\n[world]\nn_users = 10\n",
            &[
                "world.n_users=12".into(),
                "trainer.pretrain.lr.embeddings=0.25".into(),
                "dataset.web_queries=false".into(),
                "out_dir=runs/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.world.n_users, 12);
        assert_eq!(c.trainer.pretrain.lr.embeddings, 0.25);
        let d = TrainConfig::default();
        assert_eq!(c.trainer.pretrain.lr.transformer, d.pretrain.lr.transformer);
        assert_eq!(c.trainer.finetune.lr, d.finetune.lr);
        assert!(!c.dataset.web_queries);
        assert_eq!(c.out_dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[world]\nn_user = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["bogus.key=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["world".into()]).is_err());
        assert!(RunConfig::from_toml("", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        assert!(RunConfig::from_toml("", &["eval.test_days=60".into()]).is_err());
        assert!(RunConfig::from_toml("", &["model.user_heads=3".into()]).is_err());
        assert!(RunConfig::from_toml("", &["world.n_devices=1".into()]).is_err());
    }
}
