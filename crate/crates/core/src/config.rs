//! Plain-text `key = value` run configuration.
//!
//! Training keys follow the usual hyperparameter-table names in lowercase
//! (`batch_size`, `learning_rate`, `lr_scheduler`, `warmup_epoch`,
//! `warmup_type`, `warmup_lr`, `optimizer`, `max_epoch`). Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::parse_key_values;
use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::pretrain::PretrainConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub context_len: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_patch_drop: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let p = PretrainConfig::default();
        Self {
            seed: 0,
            data: DataConfig::default(),
            embed_dim: e.embed_dim,
            layers: e.layers,
            heads: e.heads,
            ffn_hidden: e.ffn_hidden,
            context_len: e.context_len,
            pretrain_steps: p.steps,
            pretrain_batch_size: p.batch_size,
            pretrain_lr: p.lr,
            pretrain_patch_drop: p.patch_drop,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::contract(format!("config key {key}: cannot parse {value:?}")))
}

fn expect(key: &str, value: &str, only: &str) -> Result<()> {
    if value.eq_ignore_ascii_case(only) {
        Ok(())
    } else {
        Err(Error::contract(format!("config key {key}: only {only:?} is supported, got {value:?}")))
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text).map_err(Error::Contract)?;
        let mut c = Self::default();
        c.apply(&kv)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "classes" => d.classes = parse(key, v)?,
            "shots" => d.shots = parse(key, v)?,
            "grid_rows" => d.grid_rows = parse(key, v)?,
            "grid_cols" => d.grid_cols = parse(key, v)?,
            "patch_dim" => d.patch_dim = parse(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "shift" => d.shift = parse(key, v)?,
            "class_jitter" => d.class_jitter = parse(key, v)?,
            "min_separation" => d.min_separation = parse(key, v)?,
            "test_per_class" => d.test_per_class = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "context_len" => self.context_len = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_patch_drop" => self.pretrain_patch_drop = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "learning_rate" => t.lr = parse(key, v)?,
            "lr_scheduler" => expect(key, v, "cosine")?,
            "warmup_epoch" => t.warmup_epochs = parse(key, v)?,
            "warmup_type" => expect(key, v, "constant")?,
            "warmup_lr" => t.warmup_lr = parse(key, v)?,
            "optimizer" => expect(key, v, "sgd")?,
            "max_epoch" => t.epochs = parse(key, v)?,
            "lambda1" => t.weights.lambda1 = parse(key, v)?,
            "lambda2" => t.weights.lambda2 = parse(key, v)?,
            "cutout_min" => t.cutout.k_min = parse(key, v)?,
            "cutout_max" => t.cutout.k_max = parse(key, v)?,
            "adapter" => t.mode = parse(key, v)?,
            _ => return Err(Error::contract(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder().validate()?;
        self.pretrain().validate()?;
        self.finetune().validate(self.data.patch_count())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            grid_rows: self.data.grid_rows,
            grid_cols: self.data.grid_cols,
            patch_dim: self.data.patch_dim,
            context_len: self.context_len,
            classes: self.data.classes,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            patch_drop: self.pretrain_patch_drop,
            seed: self.seed,
        }
    }

    pub fn finetune(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Canonical text form; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("classes", d.classes.to_string());
        put("shots", d.shots.to_string());
        put("grid_rows", d.grid_rows.to_string());
        put("grid_cols", d.grid_cols.to_string());
        put("patch_dim", d.patch_dim.to_string());
        put("noise", d.noise.to_string());
        put("shift", d.shift.to_string());
        put("class_jitter", d.class_jitter.to_string());
        put("min_separation", d.min_separation.to_string());
        put("test_per_class", d.test_per_class.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("layers", self.layers.to_string());
        put("heads", self.heads.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("context_len", self.context_len.to_string());
        put("pretrain_steps", self.pretrain_steps.to_string());
        put("pretrain_batch_size", self.pretrain_batch_size.to_string());
        put("pretrain_lr", self.pretrain_lr.to_string());
        put("pretrain_patch_drop", self.pretrain_patch_drop.to_string());
        put("optimizer", "sgd".into());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", t.lr.to_string());
        put("lr_scheduler", "cosine".into());
        put("warmup_epoch", t.warmup_epochs.to_string());
        put("warmup_type", "constant".into());
        put("warmup_lr", t.warmup_lr.to_string());
        put("max_epoch", t.epochs.to_string());
        put("lambda1", t.weights.lambda1.to_string());
        put("lambda2", t.weights.lambda2.to_string());
        put("cutout_min", t.cutout.k_min.to_string());
        put("cutout_max", t.cutout.k_max.to_string());
        put("adapter", t.mode.as_str().into());
        out
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}
