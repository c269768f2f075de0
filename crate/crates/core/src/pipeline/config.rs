use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::steering::SteeringConfig;
use crate::synthtask::TaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// EOS profile window before and after the reference boundary.
    pub eos_before: usize,
    pub eos_after: usize,
    pub length_threshold: usize,
    /// Distillation seeds for the ablation tables.
    pub seeds: Vec<u64>,
    /// Ablation config ids to run; empty runs the cumulative and objective rows.
    pub configs: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 96,
            eos_before: 10,
            eos_after: 5,
            length_threshold: 5,
            seeds: vec![0, 1, 2],
            configs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub steering: SteeringConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML; missing fields take defaults. Errors name the offending
    /// field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config {
                field,
                message: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.backbone.validate()?;
        let layout = self.task.layout()?;
        if layout.size() != self.backbone.vocab_size {
            return Err(Error::config(
                "backbone.vocab_size",
                format!("task vocabulary has {} tokens", layout.size()),
            ));
        }
        self.pretrain.validate()?;
        self.steering.validate(self.backbone.n_layers)?;
        self.distill.validate()?;
        if self.eval.max_new_tokens == 0 {
            return Err(Error::config("eval.max_new_tokens", "must be positive"));
        }
        Ok(())
    }

    /// Sets every seed field to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.backbone.seed = seed;
        self.pretrain.seed = seed;
        self.steering.seed = seed;
        self.distill.seed = seed;
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.distill.lr = 5e-4;
        c.eval.seeds = vec![7];
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn malformed_field_is_named() {
        let err = RunConfig::from_toml("[distill]\nepochs = \"five\"\n").unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert_eq!(field, "distill.epochs");
                assert!(message.contains("usize") || message.contains("integer"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = RunConfig::from_toml("[task]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn vocab_size_must_match_task() {
        let mut c = RunConfig::default();
        c.backbone.vocab_size += 1;
        assert!(c.validate().is_err());
    }
}
