//! Toy contrastive pretraining.
//!
//! Every pretrained tensor and the inverse temperature are trained with Adam on
//! fresh source-domain samples of all classes, using cross-entropy of each
//! image against the text embeddings of every class. Each pretraining image
//! has a random number of randomly placed patches zeroed, so the frozen model
//! tolerates the occlusions that Cutout introduces later.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::FewShotSplit;
use crate::error::{Error, Result};
use crate::model::{DualEncoder, EncoderConfig, Track};
use crate::objective::cross_entropy;
use crate::tensor::{Matrix, Tape};

/// Largest learned `1/τ`.
pub const MAX_INV_TAU: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Up to this many patches per image are zeroed.
    pub patch_drop: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 3e-3,
            patch_drop: 5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("pretraining batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("pretraining lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, params: &mut [&mut Matrix], grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * gk;
                v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * gk * gk;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Zeroes between 0 and `max` distinct random rows of `image`.
pub fn drop_patches(image: &Matrix, max: usize, rng: &mut impl Rng) -> Matrix {
    let mut out = image.clone();
    let k = rng.random_range(0..=max.min(image.rows()));
    for idx in sample(rng, image.rows(), k) {
        out.row_mut(idx).fill(0.0);
    }
    out
}

/// Initializes a model from `config.seed` and pretrains it on the source
/// domain of `split`. Returns the model and the per-step loss.
pub fn pretrain(encoder: &EncoderConfig, split: &FewShotSplit, config: &PretrainConfig) -> Result<(DualEncoder, Vec<f64>)> {
    config.validate()?;
    if encoder.classes != split.classes {
        return Err(Error::contract(format!(
            "model has {} classes, dataset {}",
            encoder.classes, split.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DualEncoder::init(encoder.clone(), &mut rng)?;
    let all: Vec<usize> = (0..encoder.classes).collect();
    let mut shapes: Vec<(usize, usize)> = model.pretrained_tensors().iter().map(|(_, m)| m.shape()).collect();
    shapes.push((1, 1));
    let mut adam = Adam::new(&shapes);
    let mut inv_tau = Matrix::scalar(1.0 / model.tau());
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = split.pretraining_samples(config.batch_size, &mut rng);
        let images: Vec<Matrix> = batch.iter().map(|s| drop_patches(&s.image, config.patch_drop, &mut rng)).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let tape = Tape::new();
        let bound = model.bind(&tape, Track::Pretrained)?;
        let f_t = bound.encode_text(&all, false)?;
        let (f_v, _) = bound.encode_image(&images, false)?;
        let loss = cross_entropy(bound.scaled_similarities(f_t, f_v)?, &labels)?;
        losses.push(loss.value().get(0, 0));
        let grads = tape.backward(loss)?;
        let by_name: Vec<Matrix> = bound.params().iter().map(|(_, v)| grads.get(*v)).collect();
        let names: Vec<&str> = bound.params().iter().map(|(n, _)| n.as_str()).collect();
        let mut tensors = model.pretrained_tensors_mut();
        debug_assert!(tensors.iter().zip(&names).all(|((a, _), b)| a == b));
        let mut slots: Vec<&mut Matrix> = tensors.iter_mut().map(|(_, m)| &mut **m).collect();
        slots.push(&mut inv_tau);
        if names.len() != slots.len() {
            return Err(Error::contract("pretraining binding does not match the model's tensors"));
        }
        adam.step(config.lr, &mut slots, &by_name);
        let clamped = inv_tau.get(0, 0).clamp(1.0, MAX_INV_TAU);
        inv_tau.set(0, 0, clamped);
        model.set_tau(1.0 / clamped);
    }
    Ok((model, losses))
}
