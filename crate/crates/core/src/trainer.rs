//! Deterministic finetuning of adapter parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{energy_drift, Adapter, AdapterMode};
use crate::cutout::{apply_cutout, similarity_from_tokens, CutoutPolicy, SimilarityMap};
use crate::dataset::{positions, FewShotSplit, Sample};
use crate::error::{Error, Result};
use crate::model::{scaled_similarities, DualEncoder, Targets, Track};
use crate::objective::{build_logits_with_anchor, total_loss, LossTerms, LossWeights};
use crate::tensor::{Matrix, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mode: AdapterMode,
    pub cutout: CutoutPolicy,
}

impl TrainConfig {
    /// 5 epochs, batch 4, SGD at 1e-5 after one constant warmup epoch at 1e-6.
    pub fn reference() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            lr: 1e-5,
            warmup_epochs: 1,
            warmup_lr: 1e-6,
            seed: 0,
            weights: LossWeights::default(),
            mode: AdapterMode::Orthogonal,
            cutout: CutoutPolicy::default(),
        }
    }

    pub fn validate(&self, patches: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::contract(format!(
                "{} warmup epochs exceed {} epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rates must be finite and nonnegative, got {} and {}",
                self.lr, self.warmup_lr
            )));
        }
        self.weights.validate()?;
        self.cutout.validate(patches)
    }
}

impl Default for TrainConfig {
    /// The desk-scale schedule: 15 epochs at a step size large enough to
    /// move a toy model.
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.002,
            warmup_lr: 0.0002,
            ..Self::reference()
        }
    }
}

/// Learning rate at fractional epoch `progress`: `warmup_lr` for the warmup
/// epochs, then cosine decay from `lr` to 0 at the last epoch.
pub fn lr_at(config: &TrainConfig, progress: f64) -> Result<f64> {
    let epochs = config.epochs as f64;
    if !(0.0..=epochs).contains(&progress) {
        return Err(Error::contract(format!("progress {progress} outside [0, {epochs}]")));
    }
    let warmup = config.warmup_epochs as f64;
    if progress < warmup {
        return Ok(config.warmup_lr);
    }
    if epochs == warmup {
        return Ok(config.lr);
    }
    let t = (progress - warmup) / (epochs - warmup);
    Ok(config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
    /// Relative hyperspherical-energy drift of the first adapted layer.
    pub he_drift: f64,
    /// Largest `max|AᵀA − I|` over orthogonal adapters.
    pub orth_residual: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,l_ce,l_cutout_ce,l_kl,l_cutout_kl,total,he_drift,orth_residual";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.terms;
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step, r.epoch, r.lr, t.ce, t.cutout_ce, t.kl, t.cutout_kl, t.total, r.he_drift, r.orth_residual
        );
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Mean total loss of each epoch.
pub fn epoch_means(rows: &[MetricRow]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.terms.total;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

/// Frozen quantities of the training set, computed once per run.
pub struct FrozenCache {
    /// Zero-shot logits of every train sample against the base classes.
    pub anchors: Vec<Matrix>,
    pub maps: Vec<SimilarityMap>,
}

impl FrozenCache {
    pub fn build(model: &DualEncoder, train: &[Sample], class_ids: &[usize]) -> Result<Self> {
        let c = model.config();
        let f_t = model.encode_text(class_ids, false)?;
        let pos = positions(class_ids);
        let mut anchors = Vec::with_capacity(train.len());
        let mut maps = Vec::with_capacity(train.len());
        for s in train {
            let (f_v, tokens) = model.encode_image(std::slice::from_ref(&s.image), false)?;
            anchors.push(scaled_similarities(&f_t, &f_v, model.tau())?);
            let row = *pos
                .get(&s.label)
                .ok_or_else(|| Error::Lookup(format!("train label {} is not a base class", s.label)))?;
            let text = f_t.select_rows(&[row]);
            maps.push(similarity_from_tokens(&tokens, &text, c.grid_rows, c.grid_cols)?);
        }
        Ok(Self { anchors, maps })
    }
}

fn first_drift(model: &DualEncoder) -> Result<f64> {
    for (_, _, layer) in model.ffn_layers() {
        if !matches!(layer.adapter(), Adapter::None) {
            return energy_drift(&layer.effective_weight(), layer.w0());
        }
    }
    Ok(0.0)
}

fn max_residual(model: &DualEncoder) -> f64 {
    model
        .ffn_layers()
        .iter()
        .filter_map(|(_, _, l)| match l.adapter() {
            Adapter::Orthogonal(o) => Some(o.residual()),
            _ => None,
        })
        .fold(0.0, f64::max)
}

/// Attaches fresh adapters of `config.mode` to a copy of `model` and trains
/// them on the split's base-class training set with plain SGD.
pub fn finetune(model: &DualEncoder, split: &FewShotSplit, config: &TrainConfig) -> Result<(DualEncoder, Vec<MetricRow>)> {
    let patches = model.config().patch_count();
    config.validate(patches)?;
    if split.train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tuned = model.clone();
    tuned.attach_adapters(config.mode, Targets::BOTH, &mut rng)?;
    let cache = FrozenCache::build(model, &split.train, &split.base_ids)?;
    let pos = positions(&split.base_ids);

    let n = split.train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(config.epochs * steps_per_epoch);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (i, batch) in order.chunks(config.batch_size).enumerate() {
            let progress = epoch as f64 + i as f64 / steps_per_epoch as f64;
            let lr = lr_at(config, progress)?;
            let k = config.cutout.sample_k(&mut rng);
            let images: Vec<Matrix> = batch.iter().map(|&j| split.train[j].image.clone()).collect();
            let cut = batch
                .iter()
                .map(|&j| apply_cutout(&split.train[j].image, &cache.maps[j], k))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&j| pos[&split.train[j].label]).collect();
            let anchors: Vec<Matrix> = batch.iter().map(|&j| cache.anchors[j].clone()).collect();
            let zs = Matrix::vstack(&anchors)?;

            let tape = Tape::new();
            let bound = tuned.bind(&tape, Track::Adapters)?;
            let bundle = build_logits_with_anchor(&bound, &images, &cut, &split.base_ids, &zs)?;
            let graph = total_loss(&bundle, &labels, config.weights)?;
            let terms = graph.terms();
            if !bound.params().is_empty() {
                let grads = tape.backward(graph.total)?;
                let mut updated = BTreeMap::new();
                for (name, var) in bound.params() {
                    let mut w = var.value().clone();
                    w.axpy(-lr, &grads.get(*var))?;
                    updated.insert(name.clone(), w);
                }
                drop(bound);
                tuned.load_adapter_tensors(&updated)?;
            }
            rows.push(MetricRow {
                step: rows.len(),
                epoch,
                lr,
                terms,
                he_drift: first_drift(&tuned)?,
                orth_residual: max_residual(&tuned),
            });
        }
    }
    Ok((tuned, rows))
}

/// Top-1 accuracy over `class_ids`; ties go to the lowest class position.
pub fn evaluate(model: &DualEncoder, samples: &[Sample], class_ids: &[usize], use_adapters: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("empty test set"));
    }
    let f_t = model.encode_text(class_ids, use_adapters)?;
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let images: Vec<Matrix> = chunk.iter().map(|s| s.image.clone()).collect();
        let (f_v, _) = model.encode_image(&images, use_adapters)?;
        let logits = scaled_similarities(&f_t, &f_v, model.tau())?;
        for (s, row) in chunk.iter().zip(0..) {
            if class_ids[argmax(logits.row(row))] == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Index of the largest value, the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
