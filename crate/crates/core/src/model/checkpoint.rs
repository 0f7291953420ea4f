use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ClassifierSharing, ModelConfig};
use super::params::{ClassifierParams, FusionParams, Head, ModelParams, RelationLayerParams};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const CHECKPOINT_FORMAT: &str = "abrnet-checkpoint/1";

/// On-disk model: configuration plus every tensor under its fixed name.
///
/// Numbers are written with shortest round-trip formatting, so a
/// save/load cycle reproduces every `f64` bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(k, v)| (k, v.clone()))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::input(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::input(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization is infallible")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.with_path(path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Rebuilds the parameter set, checking that exactly the tensors the
    /// configuration implies are present with the right shapes.
    pub fn params(&self) -> Result<ModelParams> {
        let cfg = &self.config;
        let mut tensors = self.tensors.clone();
        let mut take = |name: String| {
            tensors
                .remove(&name)
                .ok_or_else(|| Error::input(format!("checkpoint is missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(cfg.m);
        for l in 0..cfg.m {
            layers.push(RelationLayerParams {
                wq: take(format!("wq[{l}]"))?,
                wk: take(format!("wk[{l}]"))?,
            });
        }
        let q0 = take("q0".to_string())?;
        let per_unit = cfg.classifier_sharing == ClassifierSharing::PerUnit;
        let mut heads = Vec::new();
        for i in 0..cfg.head_count() {
            let suffix = if per_unit {
                format!(".unit{i}")
            } else {
                String::new()
            };
            heads.push(Head {
                hidden_w: take(format!("cls.hidden.w{suffix}"))?,
                hidden_b: take(format!("cls.hidden.b{suffix}"))?,
                out_w: take(format!("cls.out.w{suffix}"))?,
                out_b: take(format!("cls.out.b{suffix}"))?,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::input(format!(
                "unexpected tensor {extra} in checkpoint"
            )));
        }
        let params = ModelParams {
            layers,
            fusion: FusionParams { q0 },
            classifier: ClassifierParams {
                sharing: cfg.classifier_sharing,
                heads,
            },
        };
        params
            .check_shapes(cfg)
            .map_err(|e| Error::input(e.to_string()))?;
        if !params.is_finite() {
            return Err(Error::input("checkpoint contains non-finite values"));
        }
        Ok(params)
    }
}
