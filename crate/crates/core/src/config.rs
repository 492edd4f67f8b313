//! Run configuration: plain text with dotted keys (`model.fsd.nms_kernel = 7`).
//!
//! Values are parsed as JSON and fall back to bare strings, so
//! `model.fsd.iou = bev` and `eval.iou_thresholds = [0.3, 0.5, 0.7]` both work.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::fsd::BackboneConfig;
use crate::scene_sim::SceneConfig;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sequence `i` is generated with seed `scene.seed + i`.
    pub scene: SceneConfig,
    pub num_sequences: usize,
    /// Fraction of sequences (taken from the end) held out for evaluation.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            num_sequences: 60,
            holdout: 0.2,
        }
    }
}

impl DataConfig {
    /// Number of training sequences out of `total`.
    pub fn split(&self, total: usize) -> usize {
        let held = ((total as f64) * self.holdout).round() as usize;
        total - held.min(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk-scale preset: 64 feature channels, 32 proposals, alignment residual on.
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.fsd.backbone = BackboneConfig {
            stride: 1,
            channels: vec![32, 64, 64],
            layers: vec![1, 1, 1],
            up_channels: vec![32, 16, 16],
        };
        model.fsd.num_proposals = 32;
        model.mvaa.residual = true;
        Self {
            model,
            train: TrainConfig {
                beta: 0.1,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        };
    }
    if cur.is_object() {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    *cur = v;
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.to_string());
        }
    }
}

/// Split `key = value`; `#` starts a comment line.
pub fn parse_assignment(line: &str) -> Result<Option<(String, Value)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in `{line}`")));
    }
    Ok(Some((k.to_string(), parse_value(v))))
}

impl RunConfig {
    /// Apply config-file text, then `overrides` (each `key=value`), on top of the defaults.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        for (n, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))? {
                set_path(&mut root, &k, v)?;
            }
        }
        for o in overrides {
            if let Some((k, v)) = parse_assignment(o)? {
                set_path(&mut root, &k, v)?;
            }
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.fsd.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.data.scene.validate()?;
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(Error::Config("data.holdout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every leaf as `key -> JSON value`, sorted.
    pub fn entries(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    /// Effective config, one `key = value` per line; `load` reads it back.
    pub fn dump(&self) -> Result<String> {
        Ok(self.entries()?.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.dump()?.as_bytes())))
    }

    /// Keys under `model.` whose values differ: `(key, ours, theirs)`.
    pub fn structural_diff(&self, other: &ModelConfig) -> Result<Vec<(String, String, String)>> {
        let ours = self.entries()?;
        let theirs = RunConfig {
            model: other.clone(),
            ..self.clone()
        }
        .entries()?;
        Ok(ours
            .iter()
            .filter(|(k, _)| k.starts_with("model."))
            .filter_map(|(k, a)| {
                let b = &theirs[k];
                (a != b).then(|| (k.clone(), a.clone(), b.clone()))
            })
            .collect())
    }
}
