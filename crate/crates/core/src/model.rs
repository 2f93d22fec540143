//! Miniature dual encoder with an adapter slot in every FFN linear layer.
//!
//! Both towers are pre-norm transformers. The image tower embeds a grid of
//! patches behind a class token; the text tower reads the fixed template
//! `[SOS, ctx₁ … ctx_M, class, EOS]` and pools the EOS position. Each tower
//! ends in a layer norm and a square projection, and pooled embeddings are
//! L2-normalized.
//!
//! Forward passes run on a [`Tape`] through a [`Bound`] model. Every FFN layer
//! is bound twice: once as the frozen `W₀` and once as the adapted weight, so a
//! single binding serves both the zero-shot and the finetuned path.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::adapters::{cayley_on_tape, Adapter, AdapterMode, FrozenLinear, LowRankAdapter, OrthogonalAdapter, SkewParam, DEFAULT_LOW_RANK};
use crate::checkpoint::{Container, Tensor};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Matrix, Tape, Var};

const SOS: usize = 0;
const EOS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Raw values per patch.
    pub patch_dim: usize,
    /// Frozen context tokens in the text template.
    pub context_len: usize,
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 4,
            context_len: 16,
            classes: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("patch_dim", self.patch_dim),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// SOS, EOS, the context tokens, then one token per class.
    pub fn vocab_size(&self) -> usize {
        2 + self.context_len + self.classes
    }

    pub fn text_len(&self) -> usize {
        self.context_len + 3
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn to_manifest(&self, out: &mut BTreeMap<String, String>) {
        let fields = [
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("patch_dim", self.patch_dim),
            ("context_len", self.context_len),
            ("classes", self.classes),
        ];
        for (k, v) in fields {
            out.insert(format!("model.{k}"), v.to_string());
        }
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            let key = format!("model.{k}");
            m.get(&key)
                .ok_or_else(|| Error::Lookup(format!("manifest key {key:?} missing")))?
                .parse()
                .map_err(|e| Error::contract(format!("{key}: {e}")))
        };
        let cfg = Self {
            embed_dim: get("embed_dim")?,
            layers: get("layers")?,
            heads: get("heads")?,
            ffn_hidden: get("ffn_hidden")?,
            grid_rows: get("grid_rows")?,
            grid_cols: get("grid_cols")?,
            patch_dim: get("patch_dim")?,
            context_len: get("context_len")?,
            classes: get("classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Text,
}

/// Which towers receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub image: bool,
    pub text: bool,
}

impl Targets {
    pub const BOTH: Targets = Targets { image: true, text: true };

    pub fn includes(self, b: Branch) -> bool {
        match b {
            Branch::Image => self.image,
            Branch::Text => self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    ln1_gain: Matrix,
    ln1_bias: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2_gain: Matrix,
    ln2_bias: Matrix,
    fc1: FrozenLinear,
    fc1_bias: Matrix,
    fc2: FrozenLinear,
    fc2_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
struct Tower {
    blocks: Vec<Block>,
    ln_gain: Matrix,
    ln_bias: Matrix,
    proj: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
struct ImageTower {
    patch: FrozenLinear,
    patch_bias: Matrix,
    cls: Matrix,
    pos: Matrix,
    tower: Tower,
}

#[derive(Debug, Clone, PartialEq)]
struct TextTower {
    tokens: Matrix,
    pos: Matrix,
    tower: Tower,
}

/// The pretrained dual encoder and its live adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    image: ImageTower,
    text: TextTower,
    tau: f64,
}

struct Init<'r, R: Rng> {
    rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("positive std");
        Matrix::from_fn(rows, cols, |_, _| dist.sample(self.rng))
    }

    fn linear(&mut self, rows: usize, cols: usize) -> Matrix {
        self.normal(rows, cols, 1.0 / (rows as f64).sqrt())
    }

    fn block(&mut self, c: &EncoderConfig) -> Block {
        let (d, h) = (c.embed_dim, c.ffn_hidden);
        Block {
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            wq: self.linear(d, d),
            wk: self.linear(d, d),
            wv: self.linear(d, d),
            wo: self.linear(d, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            fc1: FrozenLinear::new(self.linear(d, h)),
            fc1_bias: Matrix::zeros(1, h),
            fc2: FrozenLinear::new(self.linear(h, d)),
            fc2_bias: Matrix::zeros(1, d),
        }
    }

    fn tower(&mut self, c: &EncoderConfig) -> Tower {
        Tower {
            blocks: (0..c.layers).map(|_| self.block(c)).collect(),
            ln_gain: Matrix::filled(1, c.embed_dim, 1.0),
            ln_bias: Matrix::zeros(1, c.embed_dim),
            proj: self.linear(c.embed_dim, c.embed_dim),
        }
    }
}

/// Initial `τ` before toy pretraining.
pub const INITIAL_TAU: f64 = 0.1;

impl DualEncoder {
    /// Randomly initialized model.
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng };
        let d = config.embed_dim;
        let image = ImageTower {
            patch: FrozenLinear::new(init.linear(config.patch_dim, d)),
            patch_bias: Matrix::zeros(1, d),
            cls: init.normal(1, d, 0.5),
            pos: init.normal(config.patch_count() + 1, d, 0.1),
            tower: init.tower(&config),
        };
        let text = TextTower {
            tokens: init.normal(config.vocab_size(), d, 0.5),
            pos: init.normal(config.text_len(), d, 0.1),
            tower: init.tower(&config),
        };
        Ok(Self {
            config,
            image,
            text,
            tau: INITIAL_TAU,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub(crate) fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    fn visit_pretrained<'a>(&'a self, out: &mut Vec<(String, &'a Matrix)>) {
        fn tower<'a>(t: &'a Tower, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
            for (i, b) in t.blocks.iter().enumerate() {
                let p = format!("{prefix}.blocks.{i}");
                out.push((format!("{p}.ln1.gain"), &b.ln1_gain));
                out.push((format!("{p}.ln1.bias"), &b.ln1_bias));
                out.push((format!("{p}.attn.wq"), &b.wq));
                out.push((format!("{p}.attn.wk"), &b.wk));
                out.push((format!("{p}.attn.wv"), &b.wv));
                out.push((format!("{p}.attn.wo"), &b.wo));
                out.push((format!("{p}.ln2.gain"), &b.ln2_gain));
                out.push((format!("{p}.ln2.bias"), &b.ln2_bias));
                out.push((format!("{p}.fc1.w0"), b.fc1.w0()));
                out.push((format!("{p}.fc1.bias"), &b.fc1_bias));
                out.push((format!("{p}.fc2.w0"), b.fc2.w0()));
                out.push((format!("{p}.fc2.bias"), &b.fc2_bias));
            }
            out.push((format!("{prefix}.ln.gain"), &t.ln_gain));
            out.push((format!("{prefix}.ln.bias"), &t.ln_bias));
            out.push((format!("{prefix}.proj"), &t.proj));
        }
        out.push(("image.patch.w0".into(), self.image.patch.w0()));
        out.push(("image.patch.bias".into(), &self.image.patch_bias));
        out.push(("image.cls".into(), &self.image.cls));
        out.push(("image.pos".into(), &self.image.pos));
        tower(&self.image.tower, "image", out);
        out.push(("text.tokens".into(), &self.text.tokens));
        out.push(("text.pos".into(), &self.text.pos));
        tower(&self.text.tower, "text", out);
    }

    fn visit_pretrained_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Matrix)>) {
        fn tower<'a>(t: &'a mut Tower, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
            for (i, b) in t.blocks.iter_mut().enumerate() {
                let p = format!("{prefix}.blocks.{i}");
                out.push((format!("{p}.ln1.gain"), &mut b.ln1_gain));
                out.push((format!("{p}.ln1.bias"), &mut b.ln1_bias));
                out.push((format!("{p}.attn.wq"), &mut b.wq));
                out.push((format!("{p}.attn.wk"), &mut b.wk));
                out.push((format!("{p}.attn.wv"), &mut b.wv));
                out.push((format!("{p}.attn.wo"), &mut b.wo));
                out.push((format!("{p}.ln2.gain"), &mut b.ln2_gain));
                out.push((format!("{p}.ln2.bias"), &mut b.ln2_bias));
                out.push((format!("{p}.fc1.w0"), b.fc1.w0_mut()));
                out.push((format!("{p}.fc1.bias"), &mut b.fc1_bias));
                out.push((format!("{p}.fc2.w0"), b.fc2.w0_mut()));
                out.push((format!("{p}.fc2.bias"), &mut b.fc2_bias));
            }
            out.push((format!("{prefix}.ln.gain"), &mut t.ln_gain));
            out.push((format!("{prefix}.ln.bias"), &mut t.ln_bias));
            out.push((format!("{prefix}.proj"), &mut t.proj));
        }
        out.push(("image.patch.w0".into(), self.image.patch.w0_mut()));
        out.push(("image.patch.bias".into(), &mut self.image.patch_bias));
        out.push(("image.cls".into(), &mut self.image.cls));
        out.push(("image.pos".into(), &mut self.image.pos));
        tower(&mut self.image.tower, "image", out);
        out.push(("text.tokens".into(), &mut self.text.tokens));
        out.push(("text.pos".into(), &mut self.text.pos));
        tower(&mut self.text.tower, "text", out);
    }

    /// Every pretrained tensor by name, in a fixed order.
    pub fn pretrained_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit_pretrained(&mut out);
        out
    }

    pub(crate) fn pretrained_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.visit_pretrained_mut(&mut out);
        out
    }

    /// FFN layers of both towers, named `<branch>.blocks.<i>.fc<1|2>`.
    pub fn ffn_layers(&self) -> Vec<(String, Branch, &FrozenLinear)> {
        let mut out = Vec::new();
        for (branch, prefix, tower) in [
            (Branch::Image, "image", &self.image.tower),
            (Branch::Text, "text", &self.text.tower),
        ] {
            for (i, b) in tower.blocks.iter().enumerate() {
                out.push((format!("{prefix}.blocks.{i}.fc1"), branch, &b.fc1));
                out.push((format!("{prefix}.blocks.{i}.fc2"), branch, &b.fc2));
            }
        }
        out
    }

    pub fn ffn_layers_mut(&mut self) -> Vec<(String, Branch, &mut FrozenLinear)> {
        let mut out = Vec::new();
        for (branch, prefix, tower) in [
            (Branch::Image, "image", &mut self.image.tower),
            (Branch::Text, "text", &mut self.text.tower),
        ] {
            for (i, b) in tower.blocks.iter_mut().enumerate() {
                out.push((format!("{prefix}.blocks.{i}.fc1"), branch, &mut b.fc1));
                out.push((format!("{prefix}.blocks.{i}.fc2"), branch, &mut b.fc2));
            }
        }
        out
    }

    /// Replaces every FFN adapter: fresh adapters of `mode` in targeted
    /// towers, none elsewhere.
    pub fn attach_adapters(&mut self, mode: AdapterMode, targets: Targets, rng: &mut impl Rng) -> Result<()> {
        for (_, branch, layer) in self.ffn_layers_mut() {
            let adapter = if !targets.includes(branch) {
                Adapter::None
            } else {
                match mode {
                    AdapterMode::None => Adapter::None,
                    AdapterMode::Orthogonal => Adapter::Orthogonal(OrthogonalAdapter::identity(layer.in_dim())),
                    AdapterMode::LowRank => Adapter::LowRank(LowRankAdapter::new(
                        layer.in_dim(),
                        layer.out_dim(),
                        DEFAULT_LOW_RANK,
                        rng,
                    )),
                }
            };
            layer.attach(adapter)?;
        }
        Ok(())
    }

    pub fn clear_adapters(&mut self) {
        for (_, _, layer) in self.ffn_layers_mut() {
            layer.detach_adapter();
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.ffn_layers().iter().any(|(_, _, l)| !matches!(l.adapter(), Adapter::None))
    }

    /// Number of trainable adapter parameters.
    pub fn trainable_count(&self) -> usize {
        self.ffn_layers().iter().map(|(_, _, l)| l.adapter().trainable_count()).sum()
    }

    /// Adapter parameters by name: `<layer>.skew` (`1×d(d−1)/2`) for orthogonal
    /// adapters, `<layer>.down` and `<layer>.up` for low-rank ones.
    pub fn adapter_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (name, _, layer) in self.ffn_layers() {
            match layer.adapter() {
                Adapter::None => {}
                Adapter::Orthogonal(o) => out.push((format!("{name}.skew"), o.skew().as_row())),
                Adapter::LowRank(l) => {
                    out.push((format!("{name}.down"), l.down().clone()));
                    out.push((format!("{name}.up"), l.up().clone()));
                }
            }
        }
        out
    }

    /// Installs adapters from named tensors, the inverse of
    /// [`DualEncoder::adapter_tensors`]. Layers without tensors get none.
    pub fn load_adapter_tensors(&mut self, tensors: &BTreeMap<String, Matrix>) -> Result<()> {
        let mut used = 0;
        for (name, _, layer) in self.ffn_layers_mut() {
            let skew = tensors.get(&format!("{name}.skew"));
            let down = tensors.get(&format!("{name}.down"));
            let up = tensors.get(&format!("{name}.up"));
            let adapter = match (skew, down, up) {
                (None, None, None) => Adapter::None,
                (Some(s), None, None) => {
                    used += 1;
                    let p = SkewParam::from_upper(layer.in_dim(), s.data().to_vec())?;
                    Adapter::Orthogonal(OrthogonalAdapter::from_skew(p)?)
                }
                (None, Some(d), Some(u)) => {
                    used += 2;
                    Adapter::LowRank(LowRankAdapter::from_parts(d.clone(), u.clone())?)
                }
                _ => {
                    return Err(Error::Compatibility(format!(
                        "layer {name} has an incomplete adapter tensor set"
                    )))
                }
            };
            layer.attach(adapter)?;
        }
        if used != tensors.len() {
            return Err(Error::Compatibility(format!(
                "{} adapter tensors do not match any FFN layer",
                tensors.len() - used
            )));
        }
        Ok(())
    }

    /// A copy whose FFN weights are the materialized effective weights and
    /// which carries no adapters.
    pub fn merged(&self) -> DualEncoder {
        let mut out = self.clone();
        for (_, _, layer) in out.ffn_layers_mut() {
            let w = layer.effective_weight();
            *layer = FrozenLinear::new(w);
        }
        out
    }

    /// Pretrained tensors, `τ` and the config manifest.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (name, m) in self.pretrained_tensors() {
            c.push_matrix(name, m)?;
        }
        c.push("tau", Tensor::new(vec![1], vec![self.tau])?)?;
        self.config.to_manifest(&mut c.manifest);
        c.manifest.insert("kind".into(), "checkpoint".into());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = EncoderConfig::from_manifest(&c.manifest)?;
        // Shapes come from a throwaway init; values are overwritten below.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(config, &mut rng)?;
        let expected = model.pretrained_tensors().len() + 1;
        if c.len() != expected {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, model expects {expected}",
                c.len()
            )));
        }
        for (name, slot) in model.pretrained_tensors_mut() {
            let m = c.matrix(&name)?;
            if m.shape() != slot.shape() {
                return Err(Error::Compatibility(format!(
                    "{name}: stored {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        let tau = c.matrix("tau")?.get(0, 0);
        if !(tau > 0.0) {
            return Err(Error::contract(format!("stored tau {tau} is not positive")));
        }
        model.tau = tau;
        Ok(model)
    }

    /// Hash of every frozen tensor and `τ`; adapters are excluded.
    pub fn frozen_hash(&self) -> Result<String> {
        Ok(self.to_container()?.content_hash())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, track: Track) -> Result<Bound<'t>> {
        Binder {
            tape,
            track,
            params: Vec::new(),
        }
        .bind(self)
    }

    /// `(f_v, patch_tokens)` for a batch of images.
    pub fn encode_image(&self, images: &[Matrix], use_adapters: bool) -> Result<(Matrix, Matrix)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Track::Nothing)?;
        let (f, p) = bound.encode_image(images, use_adapters)?;
        let out = (f.value().clone(), p.value().clone());
        Ok(out)
    }

    pub fn encode_text(&self, class_ids: &[usize], use_adapters: bool) -> Result<Matrix> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Track::Nothing)?;
        let f = bound.encode_text(class_ids, use_adapters)?;
        let out = f.value().clone();
        Ok(out)
    }

    pub fn features(&self, images: &[Matrix], class_ids: &[usize], use_adapters: bool) -> Result<FeatureBundle> {
        Ok(FeatureBundle {
            f_v: self.encode_image(images, use_adapters)?.0,
            f_t: self.encode_text(class_ids, use_adapters)?,
            image_adapted: use_adapters,
            text_adapted: use_adapters,
        })
    }

    /// `sim(f_v, f_t)/τ`, one row per image.
    pub fn logits(&self, images: &[Matrix], class_ids: &[usize], use_adapters: bool) -> Result<Matrix> {
        let fb = self.features(images, class_ids, use_adapters)?;
        scaled_similarities(&fb.f_t, &fb.f_v, self.tau)
    }
}

/// Image and text embeddings from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub f_v: Matrix,
    pub f_t: Matrix,
    pub image_adapted: bool,
    pub text_adapted: bool,
}

/// Cosine similarities divided by `τ`; rows are images, columns classes.
pub fn scaled_similarities(f_t: &Matrix, f_v: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    if f_t.cols() != f_v.cols() {
        return Err(Error::dim(
            "similarity",
            format!("text dim {} vs image dim {}", f_t.cols(), f_v.cols()),
        ));
    }
    Ok(f_v.matmul(&f_t.transpose())?.scale(1.0 / tau))
}

/// Per-image softmax over classes of `sim/τ`.
pub fn class_probabilities(f_t: &Matrix, f_v: &Matrix, tau: f64) -> Result<Matrix> {
    Ok(softmax_rows(&scaled_similarities(f_t, f_v, tau)?))
}

/// Which leaves of a binding are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    Nothing,
    /// Adapter parameters only; the finetuning setting.
    Adapters,
    /// Every pretrained tensor and the inverse temperature; toy pretraining.
    Pretrained,
}

struct BoundLinear<'t> {
    frozen: Var<'t>,
    adapted: Var<'t>,
}

struct BoundBlock<'t> {
    ln1_gain: Var<'t>,
    ln1_bias: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    ln2_gain: Var<'t>,
    ln2_bias: Var<'t>,
    fc1: BoundLinear<'t>,
    fc1_bias: Var<'t>,
    fc2: BoundLinear<'t>,
    fc2_bias: Var<'t>,
}

struct BoundTower<'t> {
    blocks: Vec<BoundBlock<'t>>,
    ln_gain: Var<'t>,
    ln_bias: Var<'t>,
    proj: Var<'t>,
}

/// A model bound to a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    config: EncoderConfig,
    patch: Var<'t>,
    patch_bias: Var<'t>,
    cls: Var<'t>,
    image_pos: Var<'t>,
    image: BoundTower<'t>,
    tokens: Var<'t>,
    text_pos: Var<'t>,
    text: BoundTower<'t>,
    inv_tau: Var<'t>,
    tau: f64,
    params: Vec<(String, Var<'t>)>,
}

struct Binder<'t> {
    tape: &'t Tape,
    track: Track,
    params: Vec<(String, Var<'t>)>,
}

impl<'t> Binder<'t> {
    fn pretrained(&mut self, name: String, m: &Matrix) -> Var<'t> {
        if self.track == Track::Pretrained {
            let v = self.tape.param(m.clone());
            self.params.push((name, v));
            v
        } else {
            self.tape.constant(m.clone())
        }
    }

    fn linear(&mut self, name: String, layer: &FrozenLinear) -> Result<BoundLinear<'t>> {
        let frozen = self.pretrained(format!("{name}.w0"), layer.w0());
        let adapted = match (self.track, layer.adapter()) {
            (_, Adapter::None) => frozen,
            (Track::Pretrained, _) => {
                return Err(Error::contract("pretraining binds a model that carries adapters"))
            }
            (Track::Nothing, _) => self.tape.constant(layer.effective_weight()),
            (Track::Adapters, Adapter::Orthogonal(o)) => {
                let leaf = self.tape.param(o.skew().as_row());
                self.params.push((format!("{name}.skew"), leaf));
                let a = cayley_on_tape(self.tape, leaf.skew_from_upper(o.dim())?)?;
                a.matmul(frozen)?
            }
            (Track::Adapters, Adapter::LowRank(l)) => {
                let down = self.tape.param(l.down().clone());
                let up = self.tape.param(l.up().clone());
                self.params.push((format!("{name}.down"), down));
                self.params.push((format!("{name}.up"), up));
                frozen.add(down.matmul(up)?)?
            }
        };
        Ok(BoundLinear { frozen, adapted })
    }

    fn tower(&mut self, t: &Tower, prefix: &str) -> Result<BoundTower<'t>> {
        let mut blocks = Vec::with_capacity(t.blocks.len());
        for (i, b) in t.blocks.iter().enumerate() {
            let p = format!("{prefix}.blocks.{i}");
            blocks.push(BoundBlock {
                ln1_gain: self.pretrained(format!("{p}.ln1.gain"), &b.ln1_gain),
                ln1_bias: self.pretrained(format!("{p}.ln1.bias"), &b.ln1_bias),
                wq: self.pretrained(format!("{p}.attn.wq"), &b.wq),
                wk: self.pretrained(format!("{p}.attn.wk"), &b.wk),
                wv: self.pretrained(format!("{p}.attn.wv"), &b.wv),
                wo: self.pretrained(format!("{p}.attn.wo"), &b.wo),
                ln2_gain: self.pretrained(format!("{p}.ln2.gain"), &b.ln2_gain),
                ln2_bias: self.pretrained(format!("{p}.ln2.bias"), &b.ln2_bias),
                fc1: self.linear(format!("{p}.fc1"), &b.fc1)?,
                fc1_bias: self.pretrained(format!("{p}.fc1.bias"), &b.fc1_bias),
                fc2: self.linear(format!("{p}.fc2"), &b.fc2)?,
                fc2_bias: self.pretrained(format!("{p}.fc2.bias"), &b.fc2_bias),
            });
        }
        Ok(BoundTower {
            blocks,
            ln_gain: self.pretrained(format!("{prefix}.ln.gain"), &t.ln_gain),
            ln_bias: self.pretrained(format!("{prefix}.ln.bias"), &t.ln_bias),
            proj: self.pretrained(format!("{prefix}.proj"), &t.proj),
        })
    }

    fn bind(mut self, m: &DualEncoder) -> Result<Bound<'t>> {
        let patch = self.pretrained("image.patch.w0".into(), m.image.patch.w0());
        let patch_bias = self.pretrained("image.patch.bias".into(), &m.image.patch_bias);
        let cls = self.pretrained("image.cls".into(), &m.image.cls);
        let image_pos = self.pretrained("image.pos".into(), &m.image.pos);
        let image = self.tower(&m.image.tower, "image")?;
        let tokens = self.pretrained("text.tokens".into(), &m.text.tokens);
        let text_pos = self.pretrained("text.pos".into(), &m.text.pos);
        let text = self.tower(&m.text.tower, "text")?;
        let inv_tau = self.pretrained("inv_tau".into(), &Matrix::scalar(1.0 / m.tau));
        Ok(Bound {
            tape: self.tape,
            config: m.config.clone(),
            patch,
            patch_bias,
            cls,
            image_pos,
            image,
            tokens,
            text_pos,
            text,
            inv_tau,
            tau: m.tau,
            params: self.params,
        })
    }
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Tracked leaves by name, in binding order.
    pub fn params(&self) -> &[(String, Var<'t>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<Var<'t>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn block(&self, b: &BoundBlock<'t>, h: Var<'t>, adapted: bool) -> Result<Var<'t>> {
        let c = &self.config;
        let a = h.layer_norm()?.mul_row(b.ln1_gain)?.add_row(b.ln1_bias)?;
        let q = a.matmul(b.wq)?;
        let k = a.matmul(b.wk)?;
        let v = a.matmul(b.wv)?;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for head in 0..c.heads {
            let qh = q.slice_cols(head * hd, hd)?;
            let kh = k.slice_cols(head * hd, hd)?;
            let vh = v.slice_cols(head * hd, hd)?;
            let attn = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax()?;
            heads.push(attn.matmul(vh)?);
        }
        let h = h.add(Var::concat_cols(&heads)?.matmul(b.wo)?)?;
        let a = h.layer_norm()?.mul_row(b.ln2_gain)?.add_row(b.ln2_bias)?;
        let (w1, w2) = if adapted {
            (b.fc1.adapted, b.fc2.adapted)
        } else {
            (b.fc1.frozen, b.fc2.frozen)
        };
        let f = a.matmul(w1)?.add_row(b.fc1_bias)?.gelu()?;
        let f = f.matmul(w2)?.add_row(b.fc2_bias)?;
        h.add(f)
    }

    fn tower(&self, t: &BoundTower<'t>, x: Var<'t>, adapted: bool) -> Result<Var<'t>> {
        let mut h = x;
        for b in &t.blocks {
            h = self.block(b, h, adapted)?;
        }
        h.layer_norm()?.mul_row(t.ln_gain)?.add_row(t.ln_bias)
    }

    fn check_image(&self, img: &Matrix) -> Result<()> {
        let c = &self.config;
        if img.shape() != (c.patch_count(), c.patch_dim) {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "image is {}x{}, expected {} patches of {} values",
                    img.rows(),
                    img.cols(),
                    c.patch_count(),
                    c.patch_dim
                ),
            ));
        }
        Ok(())
    }

    /// Normalized class-token embeddings (`B×d`) and projected final-layer
    /// patch tokens (`B·P×d`, image-major).
    pub fn encode_image(&self, images: &[Matrix], adapted: bool) -> Result<(Var<'t>, Var<'t>)> {
        if images.is_empty() {
            return Err(Error::contract("empty image batch"));
        }
        let p = self.config.patch_count();
        let mut pooled = Vec::with_capacity(images.len());
        let mut patches = Vec::with_capacity(images.len());
        for img in images {
            self.check_image(img)?;
            let x = self.tape.constant(img.clone());
            let tokens = x.matmul(self.patch)?.add_row(self.patch_bias)?;
            let seq = Var::concat_rows(&[self.cls, tokens])?.add(self.image_pos)?;
            let out = self.tower(&self.image, seq, adapted)?.matmul(self.image.proj)?;
            pooled.push(out.slice_rows(0, 1)?);
            patches.push(out.slice_rows(1, p)?);
        }
        let f_v = Var::concat_rows(&pooled)?.normalize_rows()?;
        Ok((f_v, Var::concat_rows(&patches)?))
    }

    /// One normalized embedding per requested class.
    pub fn encode_text(&self, class_ids: &[usize], adapted: bool) -> Result<Var<'t>> {
        let c = &self.config;
        if class_ids.is_empty() {
            return Err(Error::contract("empty class list"));
        }
        let mut pooled = Vec::with_capacity(class_ids.len());
        for &class in class_ids {
            if class >= c.classes {
                return Err(Error::Lookup(format!("class id {class} (model has {} classes)", c.classes)));
            }
            let mut ids = Vec::with_capacity(c.text_len());
            ids.push(SOS);
            ids.extend(2..2 + c.context_len);
            ids.push(2 + c.context_len + class);
            ids.push(EOS);
            let seq = self.tokens.gather(&ids)?.add(self.text_pos)?;
            let out = self.tower(&self.text, seq, adapted)?;
            pooled.push(out.slice_rows(c.text_len() - 1, 1)?.matmul(self.text.proj)?);
        }
        Var::concat_rows(&pooled)?.normalize_rows()
    }

    /// `sim(f_v, f_t)·(1/τ)`, with `1/τ` tracked only under
    /// [`Track::Pretrained`].
    pub fn scaled_similarities(&self, f_t: Var<'t>, f_v: Var<'t>) -> Result<Var<'t>> {
        let sims = f_v.matmul(f_t.transpose()?)?;
        let ones = self.tape.constant(Matrix::filled(1, sims.shape().1, 1.0));
        sims.mul_row(self.inv_tau.matmul(ones)?)
    }
}
