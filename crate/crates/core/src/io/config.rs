//! Run configuration: the shipped defaults with an optional user JSON
//! document merged over them. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::benchgen::GenConfig;
use crate::error::{ArfError, Result};
use crate::evaluation::{EvalOptions, SplitKind};
use crate::training::{ModelConfig, TrainConfig};

/// The frozen default configuration.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../configs/default.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub splits: Vec<SplitKind>,
    pub strict_zsl: bool,
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            strict_zsl: self.strict_zsl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalSection,
    pub ensemble: EnsembleSection,
}

/// Recursively overlays `over` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn shipped() -> Self {
        Self::from_overrides(None).expect("shipped config is valid")
    }

    pub fn from_overrides(overrides: Option<Value>) -> Result<Self> {
        let mut base: Value = serde_json::from_str(DEFAULT_CONFIG_JSON)?;
        if let Some(o) = overrides {
            if !o.is_object() {
                return Err(ArfError::Config(
                    "config file must hold a JSON object".into(),
                ));
            }
            merge_json(&mut base, o);
        }
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| ArfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shipped defaults, or the file at `path` merged over them.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::from_overrides(None),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| ArfError::Config(format!("{}: {e}", p.display())))?;
                Self::from_overrides(Some(v))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.model.hidden == 0 || self.model.embed_dim < 2 {
            return Err(ArfError::Config(
                "model needs hidden >= 1 and embed_dim >= 2".into(),
            ));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.eval.splits.is_empty() {
            return Err(ArfError::Config("eval.splits is empty".into()));
        }
        let a = &self.ensemble.alphas;
        if a.is_empty() {
            return Err(ArfError::Config("ensemble.alphas is empty".into()));
        }
        if let Some(&x) = a.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(ArfError::AlphaOutOfRange(x));
        }
        if a.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ArfError::Config(
                "ensemble.alphas must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}
