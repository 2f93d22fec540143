//! Cross-regularized finetuning objective.
//!
//! Five logit matrices are built per batch, all `sim/τ` with images as rows:
//!
//! | field          | text side        | image side              |
//! |----------------|------------------|-------------------------|
//! | `zs`           | frozen           | frozen                  |
//! | `tuned`        | adapted          | adapted                 |
//! | `text_live`    | adapted          | adapted, detached       |
//! | `cutout_tuned` | adapted          | adapted on cutout image |
//! | `image_live`   | adapted, detached| adapted on cutout image |
//!
//! The KL terms pull the two half-live logits toward the zero-shot anchor, so
//! the text adapters are regularized through `text_live` and the image
//! adapters through `image_live`.

use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tensor::{log_softmax_rows, Matrix, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the two cross-entropy terms.
    pub lambda1: f64,
    /// Weight of the two KL terms.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.5,
            lambda2: 1.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::contract(format!(
                "loss weights must be nonnegative, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

pub struct LogitBundle<'t> {
    pub zs: Var<'t>,
    pub tuned: Var<'t>,
    pub text_live: Var<'t>,
    pub cutout_tuned: Var<'t>,
    pub image_live: Var<'t>,
}

/// Builds all five logit matrices, computing the zero-shot anchor from the
/// frozen path.
pub fn build_logits<'t>(
    bound: &Bound<'t>,
    images: &[Matrix],
    cutout_images: &[Matrix],
    class_ids: &[usize],
) -> Result<LogitBundle<'t>> {
    let f_t = bound.encode_text(class_ids, false)?;
    let (f_v, _) = bound.encode_image(images, false)?;
    let zs = bound.scaled_similarities(f_t, f_v)?.detach();
    let zs = zs.value().clone();
    build_logits_with_anchor(bound, images, cutout_images, class_ids, &zs)
}

/// As [`build_logits`] with a precomputed zero-shot anchor. The anchor is
/// frozen, so it can be cached across steps.
pub fn build_logits_with_anchor<'t>(
    bound: &Bound<'t>,
    images: &[Matrix],
    cutout_images: &[Matrix],
    class_ids: &[usize],
    zs: &Matrix,
) -> Result<LogitBundle<'t>> {
    if images.len() != cutout_images.len() {
        return Err(Error::dim(
            "build_logits",
            format!("{} images but {} cutout images", images.len(), cutout_images.len()),
        ));
    }
    if zs.shape() != (images.len(), class_ids.len()) {
        return Err(Error::dim(
            "build_logits",
            format!("anchor is {:?}, batch needs {}x{}", zs.shape(), images.len(), class_ids.len()),
        ));
    }
    let f_t = bound.encode_text(class_ids, true)?;
    let (f_v, _) = bound.encode_image(images, true)?;
    let (f_v_cut, _) = bound.encode_image(cutout_images, true)?;
    Ok(LogitBundle {
        zs: bound.tape().constant(zs.clone()),
        tuned: bound.scaled_similarities(f_t, f_v)?,
        text_live: bound.scaled_similarities(f_t, f_v.detach())?,
        cutout_tuned: bound.scaled_similarities(f_t, f_v_cut)?,
        image_live: bound.scaled_similarities(f_t.detach(), f_v_cut)?,
    })
}

fn check_labels(labels: &[usize], logits: &Matrix) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Lookup(format!("label {bad} with {} classes", logits.cols())));
    }
    Ok(())
}

/// Batch mean of `−log softmax(logits)[label]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (rows, cols) = logits.shape();
    check_labels(labels, &logits.value())?;
    let mut onehot = Matrix::zeros(rows, cols);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let mask = logits.tape().constant(onehot);
    logits.log_softmax()?.mul(mask)?.sum()?.scale(-1.0 / rows as f64)
}

/// Batch mean of `Σ g(live)·(log g(live) − log g(anchor))`, `g` the row
/// softmax. The anchor must be untracked.
pub fn kl_divergence<'t>(live: Var<'t>, anchor: Var<'t>) -> Result<Var<'t>> {
    if anchor.is_tracked() {
        return Err(Error::contract("KL anchor must not carry gradient"));
    }
    if live.shape() != anchor.shape() {
        return Err(Error::dim(
            "kl_divergence",
            format!("{:?} vs {:?}", live.shape(), anchor.shape()),
        ));
    }
    let rows = live.shape().0;
    let log_anchor = log_softmax_rows(&anchor.value());
    let log_anchor = live.tape().constant(log_anchor);
    let p = live.softmax()?;
    let log_p = live.log_softmax()?;
    p.mul(log_p.sub(log_anchor)?)?.sum()?.scale(1.0 / rows as f64)
}

/// Scalar values of the four sub-losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub cutout_ce: f64,
    pub kl: f64,
    pub cutout_kl: f64,
    pub total: f64,
}

/// Tape handles of the four sub-losses and the weighted total.
pub struct LossGraph<'t> {
    pub ce: Var<'t>,
    pub cutout_ce: Var<'t>,
    pub kl: Var<'t>,
    pub cutout_kl: Var<'t>,
    pub total: Var<'t>,
}

impl LossGraph<'_> {
    pub fn terms(&self) -> LossTerms {
        let v = |x: &Var<'_>| x.value().get(0, 0);
        LossTerms {
            ce: v(&self.ce),
            cutout_ce: v(&self.cutout_ce),
            kl: v(&self.kl),
            cutout_kl: v(&self.cutout_kl),
            total: v(&self.total),
        }
    }
}

/// `λ₁(L_ce + L_cutout_ce) + λ₂(L_kl + L_cutout_kl)`.
pub fn total_loss<'t>(bundle: &LogitBundle<'t>, labels: &[usize], w: LossWeights) -> Result<LossGraph<'t>> {
    w.validate()?;
    let ce = cross_entropy(bundle.tuned, labels)?;
    let cutout_ce = cross_entropy(bundle.cutout_tuned, labels)?;
    let kl = kl_divergence(bundle.text_live, bundle.zs)?;
    let cutout_kl = kl_divergence(bundle.image_live, bundle.zs)?;
    let total = weighted(ce, cutout_ce, kl, cutout_kl, w)?;
    Ok(LossGraph {
        ce,
        cutout_ce,
        kl,
        cutout_kl,
        total,
    })
}

fn weighted<'t>(ce: Var<'t>, cutout_ce: Var<'t>, kl: Var<'t>, cutout_kl: Var<'t>, w: LossWeights) -> Result<Var<'t>> {
    ce.add(cutout_ce)?
        .scale(w.lambda1)?
        .add(kl.add(cutout_kl)?.scale(w.lambda2)?)
}

/// The weighted total from plain sub-loss values, same arithmetic as the tape.
pub fn combine(ce: f64, cutout_ce: f64, kl: f64, cutout_kl: f64, w: LossWeights) -> f64 {
    (ce + cutout_ce) * w.lambda1 + (kl + cutout_kl) * w.lambda2
}
