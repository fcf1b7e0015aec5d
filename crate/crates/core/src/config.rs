//! Run configuration; serializes losslessly to/from UTF-8 JSON.

use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::objective::LossConfig;
use crate::synthdata::DataSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DataSpec,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Seed for parameter init and batch shuffling (the dataset has its
    /// own seed in `dataset.seed`).
    pub seed: u64,
    /// Evaluate with the EMA shadow (true) or the live weights.
    pub eval_with_ema: bool,
    /// Decision threshold for the ALL-regime metrics.
    pub threshold: f64,
    /// k for the top-k regime.
    pub topk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DataSpec::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            lr_max: 1e-4,
            lr_min: 0.0,
            batch_size: 64,
            epochs: 30,
            weight_decay: 1e-2,
            ema_decay: 0.9997,
            seed: 1,
            eval_with_ema: true,
            threshold: 0.5,
            topk: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.head.validate()?;
        self.loss.validate()?;
        if self.dataset.c != self.head.c
            || self.dataset.d != self.head.d
            || self.dataset.m != self.head.m
        {
            return Err(Error::Config(format!(
                "dataset dims (c={}, d={}, m={}) differ from head dims (c={}, d={}, m={})",
                self.dataset.c, self.dataset.d, self.dataset.m, self.head.c, self.head.d, self.head.m
            )));
        }
        if self.lr_max <= 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(Error::Config("need 0 <= lr_min <= lr_max, lr_max > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0,1]".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must be in (0,1)".into()));
        }
        if self.topk == 0 || self.topk > self.head.c {
            return Err(Error::Config("topk must be in 1..=c".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `path=value` override, where `path` is a dot-separated
    /// field path into the JSON form (e.g. `head.use_kap=false`,
    /// `loss.lambda_kcr=2.0`, `epochs=10`).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        {
            let parts: Vec<&str> = path.split('.').collect();
            let (last, parents) = parts.split_last().expect("split produced a part");
            let mut node = &mut root;
            for part in parents {
                node = node
                    .as_object_mut()
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "override path {path:?}: {part:?} is not an object"
                        ))
                    })?
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown config field {path:?}")))?;
            }
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override path {path:?}: {last:?} is not an object"))
            })?;
            if !obj.contains_key(*last) {
                return Err(Error::Config(format!("unknown config field {path:?}")));
            }
            let parsed: serde_json::Value = serde_json::from_str(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            obj.insert(last.to_string(), parsed);
        }
        let updated: TrainConfig = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("override {spec:?}: {e}")))?;
        *self = updated;
        self.validate()
    }
}
