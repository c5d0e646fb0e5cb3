//! ViT-style classifier with LKCA token mixers.
//!
//! ```text
//! z0  = patches · E + E_pos
//! z'  = mixer(LN1(z)) + z
//! z   = MLP(LN2(z')) + z'
//! y   = head(LN(mean over tokens of z_L))
//! ```
//!
//! There is no class token. Each block's mixer is LKCA (`L`) or multi-head
//! self-attention (`A`) according to `block_pattern`.
//!
//! Parameters live in typed component structs; [`VisionModel::registry`]
//! enumerates every learnable tensor under a stable dotted name, and the
//! forward pass is recorded on a [`Tape`] under the same names.

use std::collections::HashMap;

use crate::autodiff::{GradCheckTarget, GradientMap, OpKind, ParamMap, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::lkca::{KernelInit, LkcaKernel, LkcaLayer, ValueProjection, View};
use crate::rng::SeededRng;
use crate::tensor::{self, Scalar, Tensor, LN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub num_heads: usize,
    pub num_classes: usize,
    /// One of `L` (LKCA) or `A` (MHSA) per block.
    pub block_pattern: String,
    pub use_pos_embed: bool,
    pub kernel_init: KernelInit,
    /// Realization used by every LKCA block.
    pub view: View,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 1,
            dim: 32,
            depth: 2,
            mlp_ratio: 2.0,
            num_heads: 4,
            num_classes: 2,
            block_pattern: "LL".into(),
            use_pos_embed: true,
            kernel_init: KernelInit::Zeros,
            view: View::Convolution,
        }
    }
}

/// Token mixer kind of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Lkca,
    Mhsa,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_h == 0 || self.image_w == 0 {
            return bad("image and patch extents must be positive".into());
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image {}x{} is not divisible by patch_size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.channels == 0 || self.dim == 0 || self.num_classes == 0 {
            return bad("channels, dim and num_classes must be positive".into());
        }
        if self.block_pattern.chars().count() != self.depth {
            return bad(format!(
                "block_pattern {:?} has length {}, depth is {}",
                self.block_pattern,
                self.block_pattern.chars().count(),
                self.depth
            ));
        }
        if let Some(c) = self.block_pattern.chars().find(|c| !matches!(c, 'L' | 'A')) {
            return bad(format!("block_pattern character {c:?} is not L or A"));
        }
        if self.block_pattern.contains('A') && (self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads)) {
            return bad(format!(
                "dim {} is not divisible by num_heads {}",
                self.dim, self.num_heads
            ));
        }
        self.mlp_hidden()?;
        if self.view == View::Spectral {
            return bad("models support the attention and convolution views only".into());
        }
        Ok(())
    }

    /// `(Gh, Gw)` token grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> Result<usize> {
        let h = self.dim as f64 * self.mlp_ratio;
        if !(self.mlp_ratio > 0.0) || (h - h.round()).abs() > 1e-9 || h.round() < 1.0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} does not give an integer hidden width for dim {}",
                self.mlp_ratio, self.dim
            )));
        }
        Ok(h.round() as usize)
    }

    pub fn mixers(&self) -> impl Iterator<Item = MixerKind> + '_ {
        self.block_pattern.chars().map(|c| match c {
            'A' => MixerKind::Mhsa,
            _ => MixerKind::Lkca,
        })
    }

    /// Closed-form parameter count:
    /// `P²C·D + N·D + Σ(mixer + MLP + 4D) + 2D + D·K + K`.
    pub fn param_count(&self) -> Result<u64> {
        self.validate()?;
        let d = self.dim as u64;
        let (gh, gw) = self.grid();
        let hidden = self.mlp_hidden()? as u64;
        let mut total = self.patch_len() as u64 * d;
        if self.use_pos_embed {
            total += self.tokens() as u64 * d;
        }
        for kind in self.mixers() {
            total += match kind {
                MixerKind::Lkca => d * d + d + ((2 * gh - 1) * (2 * gw - 1)) as u64,
                MixerKind::Mhsa => 4 * d * d + 4 * d,
            };
            total += d * hidden + hidden + hidden * d + d;
            total += 4 * d;
        }
        total += 2 * d;
        total += d * self.num_classes as u64 + self.num_classes as u64;
        Ok(total)
    }
}

/// `[b, H, W, C] -> [b, N, P²·C]`: patches row-major over the patch grid;
/// inside a patch, pixel rows then columns, channels fastest.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    if image.rank() != 4 || p == 0 || !image.shape()[1].is_multiple_of(p) || !image.shape()[2].is_multiple_of(p) {
        return Err(dim_err!("patchify: image {:?} with patch size {p}", image.shape()));
    }
    let (b, h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2], image.shape()[3]);
    let (gh, gw) = (h / p, w / p);
    let len = p * p * c;
    let mut out = Vec::with_capacity(image.len());
    for bi in 0..b {
        for pi in 0..gh {
            for pj in 0..gw {
                for r in 0..p {
                    let row = ((bi * h + pi * p + r) * w + pj * p) * c;
                    out.extend_from_slice(&image.data()[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new([b, gh * gw, len], out)
}

/// Inverse of [`patchify`] for a known image size.
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    p: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Tensor<T>> {
    let (gh, gw) = (h / p, w / p);
    if patches.rank() != 3 || patches.shape()[1] != gh * gw || patches.shape()[2] != p * p * c {
        return Err(dim_err!(
            "unpatchify: {:?} is not a {h}x{w}x{c} image in {p}-pixel patches",
            patches.shape()
        ));
    }
    let b = patches.shape()[0];
    let mut out = vec![T::zero(); b * h * w * c];
    let mut src = patches.data().chunks_exact(p * c);
    for bi in 0..b {
        for pi in 0..gh {
            for pj in 0..gw {
                for r in 0..p {
                    let row = ((bi * h + pi * p + r) * w + pj * p) * c;
                    out[row..row + p * c].copy_from_slice(src.next().expect("sized above"));
                }
            }
        }
    }
    Tensor::new([b, h, w, c], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder<T = f32> {
    /// `[P²·C, D]`, no bias.
    pub proj: Tensor<T>,
    /// `[N, D]` when positional embeddings are enabled.
    pub pos: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full([dim], T::one()),
            beta: Tensor::zeros([dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: tensor::trunc_normal(rng, [fan_in, fan_out], 0.02),
            bias: Tensor::zeros([fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaLayer<T = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub num_heads: usize,
}

impl<T: Scalar> MhsaLayer<T> {
    pub fn init(dim: usize, num_heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(dim_err!("MHSA: dim {dim} not divisible by {num_heads} heads"));
        }
        Ok(Self {
            q: Linear::init(dim, dim, rng),
            k: Linear::init(dim, dim, rng),
            v: Linear::init(dim, dim, rng),
            o: Linear::init(dim, dim, rng),
            num_heads,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer<T = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer<T = f32> {
    Lkca(LkcaLayer<T>),
    Mhsa(MhsaLayer<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T = f32> {
    pub ln1: LayerNormParams<T>,
    pub mixer: Mixer<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp: MlpLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionModel<T = f32> {
    pub config: ModelConfig,
    pub embedder: PatchEmbedder<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub final_ln: LayerNormParams<T>,
    pub head: Linear<T>,
}

// Registry enumeration. Names here and in the `record_*` functions below
// must agree; `tape_names_match_registry` checks that they do.

fn linear_params<'a, T>(l: &'a Linear<T>, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn linear_params_mut<'a, T>(
    l: &'a mut Linear<T>,
    prefix: &str,
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

impl<T: Scalar> VisionModel<T> {
    /// Fresh model: linear maps and embeddings trunc-normal(0, 0.02), biases
    /// zero, LN scale 1 and shift 0, LKCA kernels per `kernel_init`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let (d, n) = (config.dim, config.tokens());
        let (gh, gw) = config.grid();
        let hidden = config.mlp_hidden()?;
        let embedder = PatchEmbedder {
            proj: tensor::trunc_normal(&mut rng, [config.patch_len(), d], 0.02),
            pos: config
                .use_pos_embed
                .then(|| tensor::trunc_normal(&mut rng, [n, d], 0.02)),
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for kind in config.mixers() {
            let mixer = match kind {
                MixerKind::Lkca => Mixer::Lkca(LkcaLayer::new(
                    LkcaKernel::init(gh, gw, config.kernel_init, &mut rng)?,
                    ValueProjection::init(d, &mut rng),
                    config.view,
                )),
                MixerKind::Mhsa => Mixer::Mhsa(MhsaLayer::init(d, config.num_heads, &mut rng)?),
            };
            blocks.push(EncoderBlock {
                ln1: LayerNormParams::new(d),
                mixer,
                ln2: LayerNormParams::new(d),
                mlp: MlpLayer {
                    fc1: Linear::init(d, hidden, &mut rng),
                    fc2: Linear::init(hidden, d, &mut rng),
                },
            });
        }
        Ok(Self {
            config: config.clone(),
            embedder,
            blocks,
            final_ln: LayerNormParams::new(d),
            head: Linear::init(d, config.num_classes, &mut rng),
        })
    }

    pub fn cast<U: Scalar>(&self) -> VisionModel<U> {
        let mut out = VisionModel::<U>::init(&self.config, 0).expect("config already validated");
        for ((_, dst), (_, src)) in out.registry_mut().into_iter().zip(self.registry()) {
            *dst = src.cast();
        }
        out
    }

    /// Switches every LKCA block to `view`.
    pub fn set_view(&mut self, view: View) -> Result<()> {
        if view == View::Spectral {
            return Err(Error::Config(
                "models support the attention and convolution views only".into(),
            ));
        }
        self.config.view = view;
        for b in &mut self.blocks {
            if let Mixer::Lkca(l) = &mut b.mixer {
                l.view = view;
            }
        }
        Ok(())
    }

    /// Every learnable tensor, once, in a fixed order.
    pub fn registry(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("embed.proj".to_string(), &self.embedder.proj));
        if let Some(pos) = &self.embedder.pos {
            out.push(("embed.pos".to_string(), pos));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1.beta));
            match &b.mixer {
                Mixer::Lkca(l) => {
                    out.push((format!("{p}.lkca.kernel"), l.kernel.weights()));
                    out.push((format!("{p}.lkca.value.weight"), &l.value.weight));
                    out.push((format!("{p}.lkca.value.bias"), &l.value.bias));
                }
                Mixer::Mhsa(m) => {
                    for (name, lin) in [("q", &m.q), ("k", &m.k), ("v", &m.v), ("o", &m.o)] {
                        linear_params(lin, &format!("{p}.mhsa.{name}"), &mut out);
                    }
                }
            }
            out.push((format!("{p}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2.beta));
            linear_params(&b.mlp.fc1, &format!("{p}.mlp.fc1"), &mut out);
            linear_params(&b.mlp.fc2, &format!("{p}.mlp.fc2"), &mut out);
        }
        out.push(("final_ln.gamma".to_string(), &self.final_ln.gamma));
        out.push(("final_ln.beta".to_string(), &self.final_ln.beta));
        linear_params(&self.head, "head", &mut out);
        out
    }

    pub fn registry_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("embed.proj".to_string(), &mut self.embedder.proj));
        if let Some(pos) = &mut self.embedder.pos {
            out.push(("embed.pos".to_string(), pos));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln1.gamma"), &mut b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &mut b.ln1.beta));
            match &mut b.mixer {
                Mixer::Lkca(l) => {
                    out.push((format!("{p}.lkca.kernel"), l.kernel.weights_mut()));
                    out.push((format!("{p}.lkca.value.weight"), &mut l.value.weight));
                    out.push((format!("{p}.lkca.value.bias"), &mut l.value.bias));
                }
                Mixer::Mhsa(m) => {
                    for (name, lin) in [("q", &mut m.q), ("k", &mut m.k), ("v", &mut m.v), ("o", &mut m.o)] {
                        linear_params_mut(lin, &format!("{p}.mhsa.{name}"), &mut out);
                    }
                }
            }
            out.push((format!("{p}.ln2.gamma"), &mut b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &mut b.ln2.beta));
            linear_params_mut(&mut b.mlp.fc1, &format!("{p}.mlp.fc1"), &mut out);
            linear_params_mut(&mut b.mlp.fc2, &format!("{p}.mlp.fc2"), &mut out);
        }
        out.push(("final_ln.gamma".to_string(), &mut self.final_ln.gamma));
        out.push(("final_ln.beta".to_string(), &mut self.final_ln.beta));
        linear_params_mut(&mut self.head, "head", &mut out);
        out
    }

    /// Overwrites parameters from `(name, tensor)` pairs. Every registry
    /// entry must be supplied exactly once with its exact shape.
    pub fn assign<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, Tensor<T>)>) -> Result<()> {
        let mut supplied: HashMap<&str, Tensor<T>> = HashMap::new();
        for (name, t) in entries {
            if supplied.insert(name, t).is_some() {
                return Err(Error::Checkpoint(format!("tensor {name} appears twice")));
            }
        }
        let mut registry = self.registry_mut();
        for (name, slot) in registry.iter() {
            let t = supplied
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is missing")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
        }
        if supplied.len() != registry.len() {
            let known: Vec<&str> = registry.iter().map(|(n, _)| n.as_str()).collect();
            let extra = supplied.keys().find(|k| !known.contains(k)).copied().unwrap_or("?");
            return Err(Error::Checkpoint(format!(
                "tensor {extra} is not part of this model"
            )));
        }
        for (name, slot) in registry.iter_mut() {
            **slot = supplied.remove(name.as_str()).expect("checked above");
        }
        Ok(())
    }

    pub fn parameters_f64(&self) -> ParamMap {
        self.registry()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<f64>()))
            .collect()
    }

    /// Records the full forward pass on `tape`; returns the logits
    /// `[b, num_classes]`.
    pub fn record(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        if images.rank() != 4
            || images.shape()[1..] != [cfg.image_h, cfg.image_w, cfg.channels]
        {
            return Err(dim_err!(
                "model expects images [b, {}, {}, {}], got {:?}",
                cfg.image_h,
                cfg.image_w,
                cfg.channels,
                images.shape()
            ));
        }
        let patches = tape.input(patchify(images, cfg.patch_size)?);
        let mut z = record_embed(tape, &self.embedder, patches)?;
        for (i, block) in self.blocks.iter().enumerate() {
            z = record_block(tape, block, &format!("blocks.{i}"), z)?;
        }
        let pooled = tape.mean(z, 1)?;
        let y = record_ln(tape, &self.final_ln, "final_ln", pooled)?;
        record_linear(tape, &self.head, "head", y)
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let logits = self.record(&mut tape, images)?;
        Ok(tape.value(logits).clone())
    }

    /// Loss and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<(f64, Tensor<T>, GradientMap<T>)> {
        let mut tape = Tape::new();
        let logits = self.record(&mut tape, images)?;
        let loss = tape.cross_entropy(logits, labels, smoothing)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).data()[0].as_f64(),
            tape.value(logits).clone(),
            grads.into_map(),
        ))
    }
}

/// `model_forward`: logits for a batch of images.
pub fn model_forward<T: Scalar>(image: &Tensor<T>, model: &VisionModel<T>) -> Result<Tensor<T>> {
    model.forward(image)
}

/// Registry element count.
pub fn count_model_params<T: Scalar>(model: &VisionModel<T>) -> u64 {
    model.registry().iter().map(|(_, t)| t.len() as u64).sum()
}

fn record_linear<T: Scalar>(tape: &mut Tape<T>, l: &Linear<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(format!("{prefix}.weight"), l.weight.clone())?;
    let b = tape.param(format!("{prefix}.bias"), l.bias.clone())?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn record_ln<T: Scalar>(tape: &mut Tape<T>, ln: &LayerNormParams<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(format!("{prefix}.gamma"), ln.gamma.clone())?;
    let b = tape.param(format!("{prefix}.beta"), ln.beta.clone())?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn record_embed<T: Scalar>(tape: &mut Tape<T>, e: &PatchEmbedder<T>, patches: Var) -> Result<Var> {
    let proj = tape.param("embed.proj", e.proj.clone())?;
    let z = tape.matmul(patches, proj)?;
    match &e.pos {
        Some(pos) => {
            let pos = tape.param("embed.pos", pos.clone())?;
            tape.add(z, pos)
        }
        None => Ok(z),
    }
}

/// LKCA mixer on the tape, as its constituent primitives.
pub fn record_lkca<T: Scalar>(tape: &mut Tape<T>, l: &LkcaLayer<T>, prefix: &str, x: Var) -> Result<Var> {
    let (gh, gw) = l.kernel.grid();
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != gh * gw {
        return Err(dim_err!(
            "LKCA mixer on a {gh}x{gw} grid got tokens {:?}",
            shape
        ));
    }
    let kernel = tape.param(format!("{prefix}.kernel"), l.kernel.weights().clone())?;
    let wv = tape.param(format!("{prefix}.value.weight"), l.value.weight.clone())?;
    let bv = tape.param(format!("{prefix}.value.bias"), l.value.bias.clone())?;
    let v = tape.matmul(x, wv)?;
    let v = tape.add(v, bv)?;
    match l.view {
        View::Attention => {
            let scores = tape.unroll(kernel, gh, gw)?;
            tape.matmul(scores, v)
        }
        View::Convolution => {
            let planes = tape.grid_fold(v, gh, gw)?;
            let out = tape.correlate(planes, kernel, (gh - 1, gw - 1))?;
            tape.grid_unfold(out, shape[0], shape[2])
        }
        View::Spectral => Err(Error::Config(
            "the spectral view cannot be recorded on a tape".into(),
        )),
    }
}

pub fn record_mhsa<T: Scalar>(tape: &mut Tape<T>, m: &MhsaLayer<T>, prefix: &str, x: Var) -> Result<Var> {
    let dim = *tape.value(x).shape().last().unwrap_or(&0);
    if m.num_heads == 0 || !dim.is_multiple_of(m.num_heads) {
        return Err(dim_err!("MHSA: dim {dim} not divisible by {} heads", m.num_heads));
    }
    let head_dim = dim / m.num_heads;
    let q = record_linear(tape, &m.q, &format!("{prefix}.q"), x)?;
    let k = record_linear(tape, &m.k, &format!("{prefix}.k"), x)?;
    let v = record_linear(tape, &m.v, &format!("{prefix}.v"), x)?;
    let q = tape.split_heads(q, m.num_heads)?;
    let k = tape.split_heads(k, m.num_heads)?;
    let v = tape.split_heads(v, m.num_heads)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (head_dim as f64).sqrt())?;
    let a = tape.softmax(s)?;
    let o = tape.matmul(a, v)?;
    let o = tape.merge_heads(o, m.num_heads)?;
    record_linear(tape, &m.o, &format!("{prefix}.o"), o)
}

fn record_block<T: Scalar>(tape: &mut Tape<T>, b: &EncoderBlock<T>, prefix: &str, z: Var) -> Result<Var> {
    let h = record_ln(tape, &b.ln1, &format!("{prefix}.ln1"), z)?;
    let m = match &b.mixer {
        Mixer::Lkca(l) => record_lkca(tape, l, &format!("{prefix}.lkca"), h)?,
        Mixer::Mhsa(a) => record_mhsa(tape, a, &format!("{prefix}.mhsa"), h)?,
    };
    let z = tape.add(z, m)?;
    let h = record_ln(tape, &b.ln2, &format!("{prefix}.ln2"), z)?;
    let h = record_linear(tape, &b.mlp.fc1, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = record_linear(tape, &b.mlp.fc2, &format!("{prefix}.mlp.fc2"), h)?;
    tape.add(z, h)
}

/// `z' = mixer(LN1(z)) + z; out = MLP(LN2(z')) + z'`.
pub fn block_forward<T: Scalar>(z: &Tensor<T>, block: &EncoderBlock<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let zv = tape.input(z.clone());
    let out = record_block(&mut tape, block, "block", zv)?;
    Ok(tape.value(out).clone())
}

/// Multi-head self-attention: per head `softmax(Q·Kᵀ/√e)·V`, heads
/// concatenated and projected by `Wo`.
pub fn mhsa_forward<T: Scalar>(x: &Tensor<T>, layer: &MhsaLayer<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = record_mhsa(&mut tape, layer, "mhsa", xv)?;
    Ok(tape.value(out).clone())
}

/// `z0 = patches · E (+ E_pos)`.
pub fn embed<T: Scalar>(patches: &Tensor<T>, embedder: &PatchEmbedder<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.input(patches.clone());
    let z = record_embed(&mut tape, embedder, p)?;
    Ok(tape.value(z).clone())
}

/// Gradient-check target: label-smoothed cross-entropy of a model on one
/// fixed batch, in f64.
pub struct ModelLossTarget {
    pub model: VisionModel<f64>,
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub smoothing: f64,
    /// Negative control: corrupts the adjoint of one op kind.
    pub fault: Option<(OpKind, f64)>,
}

impl ModelLossTarget {
    fn with_params(&self, params: &ParamMap) -> Result<VisionModel<f64>> {
        let mut m = self.model.clone();
        m.assign(params.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
        Ok(m)
    }
}

impl GradCheckTarget for ModelLossTarget {
    fn parameters(&self) -> ParamMap {
        self.model.parameters_f64()
    }

    fn loss(&self, params: &ParamMap) -> Result<f64> {
        let m = self.with_params(params)?;
        let mut tape = Tape::new();
        let logits = m.record(&mut tape, &self.images)?;
        let loss = tape.cross_entropy(logits, &self.labels, self.smoothing)?;
        Ok(tape.value(loss).data()[0])
    }

    fn gradients(&self, params: &ParamMap) -> Result<GradientMap<f64>> {
        let m = self.with_params(params)?;
        let mut tape = Tape::new();
        if let Some((kind, factor)) = self.fault {
            tape.inject_fault(kind, factor);
        }
        let logits = m.record(&mut tape, &self.images)?;
        let loss = tape.cross_entropy(logits, &self.labels, self.smoothing)?;
        Ok(tape.backward(loss)?.into_map())
    }
}
