//! ViT-style image encoder and per-patch mask head.
//!
//! Images are cut into non-overlapping patches, linearly embedded, given a
//! learned positional embedding, and run through a stack of pre-norm
//! transformer blocks (multi-head self-attention + ReLU FFN). A linear head
//! maps each token to the logits of its patch's pixels; sigmoid is applied
//! by the loss and metric layer, never here.
//!
//! Every parameter is addressable by a stable dotted path (for example
//! `backbone.block.3.attn.w_v`), which is what freezing, checkpointing, and
//! the optimizer key on. Injection hooks are threaded through
//! [`block_forward`]; a block with no hooks is a plain transformer block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{
    adapter_apply_parallel, adapter_apply_sequential, lora_apply, AdapterVars, InsertionForm,
    LoraVars,
};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture description. `d_k` is derived as `d_model / heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk()
    }
}

impl BackboneConfig {
    /// CPU-trainable configuration used by the `desk` preset.
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            d_model: 64,
            depth: 4,
            heads: 4,
            ffn_ratio: 4,
        }
    }

    /// ViT-B-shaped configuration for parameter accounting only.
    pub fn vitb_like() -> Self {
        BackboneConfig {
            image_size: 1024,
            patch_size: 16,
            channels: 3,
            d_model: 768,
            depth: 12,
            heads: 12,
            ffn_ratio: 4,
        }
    }

    /// Small enough for finite-difference checks over every trainable
    /// parameter.
    pub fn gradcheck() -> Self {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            d_model: 16,
            depth: 2,
            heads: 2,
            ffn_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.d_model == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("backbone dimensions must be positive".into()));
        }
        if self.channels == 0 || self.ffn_ratio == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("backbone dimensions must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.d_model
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Frozen parameter total: patch embedding, positional embedding, and
    /// all block weights including biases and norms.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.d_model;
        let patch = self.patch_dim() * d + d;
        let pos = self.n_tokens() * d;
        let attn = 4 * (d * d + d);
        let norms = 2 * (2 * d);
        let h = self.ffn_hidden();
        let ffn = d * h + h + h * d + d;
        patch + pos + self.depth * (attn + norms + ffn)
    }

    /// Per-patch logit head: d × patch² weights plus bias.
    pub fn head_param_count(&self) -> usize {
        let p2 = self.patch_size * self.patch_size;
        self.d_model * p2 + p2
    }
}

/// Linear layer stored as `[in, out]` weights applied as `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn random(d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        Linear {
            weight: Tensor::new(
                vec![d_in, d_out],
                (0..d_in * d_out).map(|_| rng.next_normal_trunc(0.02, 2.0)).collect(),
            )
            .expect("consistent dims"),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![d_in, d_out]),
            bias: Tensor::zeros(vec![d_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![d], vec![1.0; d]).expect("consistent dims"),
            bias: Tensor::zeros(vec![d]),
        }
    }
}

/// One pre-norm transformer block's parameters.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNormParams,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub norm2: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl TransformerBlock {
    fn random(config: &BackboneConfig, rng: &mut SplitMix64) -> Self {
        let d = config.d_model;
        let h = config.ffn_hidden();
        TransformerBlock {
            norm1: LayerNormParams::identity(d),
            w_q: Linear::random(d, d, rng),
            w_k: Linear::random(d, d, rng),
            w_v: Linear::random(d, d, rng),
            w_o: Linear::random(d, d, rng),
            norm2: LayerNormParams::identity(d),
            ffn1: Linear::random(d, h, rng),
            ffn2: Linear::random(h, d, rng),
        }
    }
}

/// Per-patch logit projection standing in for a full mask decoder.
/// Zero-initialized: an untrained model emits logit 0 (probability 0.5)
/// everywhere.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub proj: Linear,
}

impl MaskHead {
    pub fn new(config: &BackboneConfig) -> Self {
        MaskHead {
            proj: Linear::zeros(config.d_model, config.patch_size * config.patch_size),
        }
    }
}

/// Patch embedding, positional embedding, and the block stack. Weights are
/// drawn from normal(0, 0.02) truncated at ±2σ with zero biases; these stand
/// in for pretrained weights, and every injection property holds regardless
/// of their values.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub blocks: Vec<TransformerBlock>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, 0xBACB);
        let n = config.n_tokens();
        let d = config.d_model;
        let patch_embed = Linear::random(config.patch_dim(), d, &mut rng);
        let pos_embed = Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.next_normal_trunc(0.02, 2.0)).collect(),
        )?;
        let blocks = (0..config.depth)
            .map(|_| TransformerBlock::random(&config, &mut rng))
            .collect();
        Ok(Backbone {
            config,
            patch_embed,
            pos_embed,
            blocks,
        })
    }
}

// ── parameter traversal ─────────────────────────────────────────────
//
// The (path, tensor) listing and the tape binding below must enumerate
// parameters in the same order; `variants` has a test pinning this.

macro_rules! collect_backbone_params {
    ($self:ident, $out:ident, $iter:ident, $($r:tt)+) => {
        $out.push(("backbone.patch_embed.weight".to_string(), $($r)+ $self.patch_embed.weight));
        $out.push(("backbone.patch_embed.bias".to_string(), $($r)+ $self.patch_embed.bias));
        $out.push(("backbone.pos_embed".to_string(), $($r)+ $self.pos_embed));
        for (i, block) in $self.blocks.$iter().enumerate() {
            $out.push((format!("backbone.block.{i}.norm1.gain"), $($r)+ block.norm1.gain));
            $out.push((format!("backbone.block.{i}.norm1.bias"), $($r)+ block.norm1.bias));
            $out.push((format!("backbone.block.{i}.attn.w_q"), $($r)+ block.w_q.weight));
            $out.push((format!("backbone.block.{i}.attn.b_q"), $($r)+ block.w_q.bias));
            $out.push((format!("backbone.block.{i}.attn.w_k"), $($r)+ block.w_k.weight));
            $out.push((format!("backbone.block.{i}.attn.b_k"), $($r)+ block.w_k.bias));
            $out.push((format!("backbone.block.{i}.attn.w_v"), $($r)+ block.w_v.weight));
            $out.push((format!("backbone.block.{i}.attn.b_v"), $($r)+ block.w_v.bias));
            $out.push((format!("backbone.block.{i}.attn.w_o"), $($r)+ block.w_o.weight));
            $out.push((format!("backbone.block.{i}.attn.b_o"), $($r)+ block.w_o.bias));
            $out.push((format!("backbone.block.{i}.norm2.gain"), $($r)+ block.norm2.gain));
            $out.push((format!("backbone.block.{i}.norm2.bias"), $($r)+ block.norm2.bias));
            $out.push((format!("backbone.block.{i}.ffn.w1"), $($r)+ block.ffn1.weight));
            $out.push((format!("backbone.block.{i}.ffn.b1"), $($r)+ block.ffn1.bias));
            $out.push((format!("backbone.block.{i}.ffn.w2"), $($r)+ block.ffn2.weight));
            $out.push((format!("backbone.block.{i}.ffn.b2"), $($r)+ block.ffn2.bias));
        }
    };
}

impl Backbone {
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        collect_backbone_params!(self, out, iter, &);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        collect_backbone_params!(self, out, iter_mut, &mut);
        out
    }
}

// ── image ↔ token layout ────────────────────────────────────────────

/// Cut an [H, W, C] image into the [n, patch²·C] matrix of flattened
/// patches, tokens in row-major patch order, pixels row-major inside each
/// patch with channels innermost.
pub fn patchify(image: &Tensor, config: &BackboneConfig) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w] if config.channels == 1 => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => {
            return Err(Error::shape(
                "patchify",
                format!("expected an image, got shape {:?}", s),
            ))
        }
    };
    if h != config.image_size || w != config.image_size || c != config.channels {
        return Err(Error::shape(
            "patchify",
            format!(
                "image {h}×{w}×{c} does not match configured {0}×{0}×{1}; the model never resizes",
                config.image_size, config.channels
            ),
        ));
    }
    let p = config.patch_size;
    let side = config.image_size / p;
    let dim = config.patch_dim();
    let src = image.data();
    let mut out = vec![0.0; config.n_tokens() * dim];
    for pr in 0..side {
        for pc in 0..side {
            let token = pr * side + pc;
            for dr in 0..p {
                for dc in 0..p {
                    for ch in 0..c {
                        let pixel = ((pr * p + dr) * w + (pc * p + dc)) * c + ch;
                        out[token * dim + (dr * p + dc) * c + ch] = src[pixel];
                    }
                }
            }
        }
    }
    Tensor::new(vec![config.n_tokens(), dim], out)
}

/// Rearrange an [H, W] mask into the flat patch-major order emitted by the
/// head, for loss computation against patch-grid logits.
pub fn patchify_mask(mask: &Tensor, config: &BackboneConfig) -> Result<Vec<f64>> {
    match mask.shape() {
        [h, w] if *h == config.image_size && *w == config.image_size => {}
        s => {
            return Err(Error::shape(
                "patchify_mask",
                format!("mask {:?} against image size {}", s, config.image_size),
            ))
        }
    }
    let p = config.patch_size;
    let side = config.image_size / p;
    let src = mask.data();
    let mut out = vec![0.0; config.image_size * config.image_size];
    for pr in 0..side {
        for pc in 0..side {
            let token = pr * side + pc;
            for dr in 0..p {
                for dc in 0..p {
                    out[token * p * p + dr * p + dc] = src[(pr * p + dr) * config.image_size + (pc * p + dc)];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_mask`]: patch-grid values back to row-major [H, W];
/// pixel (r, c) comes from patch (⌊r/p⌋, ⌊c/p⌋) at offset (r mod p, c mod p).
pub fn assemble_image(patch_values: &[f64], config: &BackboneConfig) -> Vec<f64> {
    let p = config.patch_size;
    let side = config.image_size / p;
    let mut out = vec![0.0; config.image_size * config.image_size];
    for r in 0..config.image_size {
        for c in 0..config.image_size {
            let token = (r / p) * side + (c / p);
            out[r * config.image_size + c] = patch_values[token * p * p + (r % p) * p + (c % p)];
        }
    }
    out
}

// ── on-tape forward ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub heads: usize,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub w_q: LinearVars,
    pub w_k: LinearVars,
    pub w_v: LinearVars,
    pub w_o: LinearVars,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
}

/// Injection hooks for one block. Empty hooks make [`block_forward`] a plain
/// residual transformer block.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockHooks {
    pub attn_adapter: Option<(InsertionForm, AdapterVars)>,
    pub ffn_adapter: Option<(InsertionForm, AdapterVars)>,
    pub lora_q: Option<LoraVars>,
    pub lora_v: Option<LoraVars>,
}

fn linear(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let h = tape.matmul(x, l.weight)?;
    tape.add_bias(h, l.bias)
}

/// Multi-head self-attention over [n, d] tokens: per head
/// softmax(Q·Kᵀ/√d_k)·V with Q/K/V column slices of the joint projections,
/// heads concatenated and projected by W_o. LoRA hooks rewrite the query and
/// value projections in place.
pub fn attention(tape: &mut Tape, x: Var, block: &BlockVars, hooks: Option<&BlockHooks>) -> Result<Var> {
    let d = tape.shape_of(x)[1];
    let heads = block.heads;
    let d_k = d / heads;
    let q = match hooks.and_then(|h| h.lora_q.as_ref()) {
        Some(lora) => lora_apply(tape, x, block.w_q.weight, Some(block.w_q.bias), lora)?,
        None => linear(tape, x, &block.w_q)?,
    };
    let k = linear(tape, x, &block.w_k)?;
    let v = match hooks.and_then(|h| h.lora_v.as_ref()) {
        Some(lora) => lora_apply(tape, x, block.w_v.weight, Some(block.w_v.bias), lora)?,
        None => linear(tape, x, &block.w_v)?,
    };
    let mut outputs = Vec::with_capacity(heads);
    let inv_sqrt_dk = 1.0 / (d_k as f64).sqrt();
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.mul_scalar(scores, inv_sqrt_dk);
        let weights = tape.softmax(scaled, 1)?;
        outputs.push(tape.matmul(weights, vh)?);
    }
    let joined = tape.concat_cols(&outputs)?;
    linear(tape, joined, &block.w_o)
}

/// Two linear maps with a ReLU between them.
pub fn ffn(tape: &mut Tape, x: Var, block: &BlockVars) -> Result<Var> {
    let h = linear(tape, x, &block.ffn1)?;
    let a = tape.relu(h);
    linear(tape, a, &block.ffn2)
}

/// Pre-norm block: u = x + Attn(norm1(x)); y = u + FFN(norm2(u)), with
/// injection hooks applied at the configured points. A parallel adapter
/// supplies the residual term itself, so the plain residual add is skipped
/// on that sublayer.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    hooks: Option<&BlockHooks>,
) -> Result<Var> {
    let xn = tape.layer_norm(x, block.norm1_gain, block.norm1_bias, LAYER_NORM_EPS)?;
    let attn_out = attention(tape, xn, block, hooks)?;
    let u = match hooks.and_then(|h| h.attn_adapter.as_ref()) {
        None => tape.add(x, attn_out)?,
        Some((InsertionForm::Sequential, adapter)) => {
            let u = tape.add(x, attn_out)?;
            adapter_apply_sequential(tape, u, adapter)?
        }
        Some((InsertionForm::Parallel, adapter)) => {
            adapter_apply_parallel(tape, x, attn_out, adapter)?
        }
    };
    let un = tape.layer_norm(u, block.norm2_gain, block.norm2_bias, LAYER_NORM_EPS)?;
    let ffn_out = ffn(tape, un, block)?;
    match hooks.and_then(|h| h.ffn_adapter.as_ref()) {
        None => tape.add(u, ffn_out),
        Some((InsertionForm::Sequential, adapter)) => {
            let y = tape.add(u, ffn_out)?;
            adapter_apply_sequential(tape, y, adapter)
        }
        Some((InsertionForm::Parallel, adapter)) => {
            adapter_apply_parallel(tape, u, ffn_out, adapter)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub patch_embed: LinearVars,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
}

impl TransformerBlock {
    pub fn bind(
        &self,
        tape: &mut Tape,
        heads: usize,
        index: usize,
        bindings: &mut Vec<(String, Var)>,
    ) -> BlockVars {
        let mut leaf = |t: &Tensor, name: &str, tape: &mut Tape| {
            let v = tape.leaf(t);
            bindings.push((format!("backbone.block.{index}.{name}"), v));
            v
        };
        let norm1_gain = leaf(&self.norm1.gain, "norm1.gain", tape);
        let norm1_bias = leaf(&self.norm1.bias, "norm1.bias", tape);
        let w_q = LinearVars {
            weight: leaf(&self.w_q.weight, "attn.w_q", tape),
            bias: leaf(&self.w_q.bias, "attn.b_q", tape),
        };
        let w_k = LinearVars {
            weight: leaf(&self.w_k.weight, "attn.w_k", tape),
            bias: leaf(&self.w_k.bias, "attn.b_k", tape),
        };
        let w_v = LinearVars {
            weight: leaf(&self.w_v.weight, "attn.w_v", tape),
            bias: leaf(&self.w_v.bias, "attn.b_v", tape),
        };
        let w_o = LinearVars {
            weight: leaf(&self.w_o.weight, "attn.w_o", tape),
            bias: leaf(&self.w_o.bias, "attn.b_o", tape),
        };
        let norm2_gain = leaf(&self.norm2.gain, "norm2.gain", tape);
        let norm2_bias = leaf(&self.norm2.bias, "norm2.bias", tape);
        let ffn1 = LinearVars {
            weight: leaf(&self.ffn1.weight, "ffn.w1", tape),
            bias: leaf(&self.ffn1.bias, "ffn.b1", tape),
        };
        let ffn2 = LinearVars {
            weight: leaf(&self.ffn2.weight, "ffn.w2", tape),
            bias: leaf(&self.ffn2.bias, "ffn.b2", tape),
        };
        BlockVars {
            heads,
            norm1_gain,
            norm1_bias,
            w_q,
            w_k,
            w_v,
            w_o,
            norm2_gain,
            norm2_bias,
            ffn1,
            ffn2,
        }
    }
}

impl Backbone {
    pub fn bind(&self, tape: &mut Tape, bindings: &mut Vec<(String, Var)>) -> BackboneVars {
        let patch_w = tape.leaf(&self.patch_embed.weight);
        bindings.push(("backbone.patch_embed.weight".to_string(), patch_w));
        let patch_b = tape.leaf(&self.patch_embed.bias);
        bindings.push(("backbone.patch_embed.bias".to_string(), patch_b));
        let pos = tape.leaf(&self.pos_embed);
        bindings.push(("backbone.pos_embed".to_string(), pos));
        BackboneVars {
            patch_embed: LinearVars {
                weight: patch_w,
                bias: patch_b,
            },
            pos_embed: pos,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(tape, self.config.heads, i, bindings))
                .collect(),
        }
    }
}

/// Patchify-embed-encode: returns [n, d] tokens. `hooks` has one entry per
/// block (all `None` for the base model).
pub fn encode(
    tape: &mut Tape,
    vars: &BackboneVars,
    config: &BackboneConfig,
    image: &Tensor,
    hooks: &[Option<BlockHooks>],
) -> Result<Var> {
    let patches = patchify(image, config)?;
    let pv = tape.constant(patches.data(), patches.shape());
    let embedded = linear(tape, pv, &vars.patch_embed)?;
    let mut tokens = tape.add(embedded, vars.pos_embed)?;
    for (i, block) in vars.blocks.iter().enumerate() {
        let h = hooks.get(i).and_then(|h| h.as_ref());
        tokens = block_forward(tape, tokens, block, h)?;
    }
    Ok(tokens)
}

/// Per-patch logits: [n, d] tokens → [n, patch²].
pub fn decode_mask(tape: &mut Tape, tokens: Var, head: &LinearVars) -> Result<Var> {
    linear(tape, tokens, head)
}

impl MaskHead {
    pub fn bind(&self, tape: &mut Tape, bindings: &mut Vec<(String, Var)>) -> LinearVars {
        let weight = tape.leaf(&self.proj.weight);
        bindings.push(("head.weight".to_string(), weight));
        let bias = tape.leaf(&self.proj.bias);
        bindings.push(("head.bias".to_string(), bias));
        LinearVars { weight, bias }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.weight".to_string(), &self.proj.weight),
            ("head.bias".to_string(), &self.proj.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.weight".to_string(), &mut self.proj.weight),
            ("head.bias".to_string(), &mut self.proj.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed_block(config: &BackboneConfig) -> TransformerBlock {
        let d = config.d_model;
        let h = config.ffn_hidden();
        TransformerBlock {
            norm1: LayerNormParams::identity(d),
            w_q: Linear::zeros(d, d),
            w_k: Linear::zeros(d, d),
            w_v: Linear::zeros(d, d),
            w_o: Linear::zeros(d, d),
            norm2: LayerNormParams::identity(d),
            ffn1: Linear::zeros(d, h),
            ffn2: Linear::zeros(h, d),
        }
    }

    fn run_attention(x: &Tensor, block: &TransformerBlock, heads: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let vars = block.bind(&mut tape, heads, 0, &mut bindings);
        let xv = tape.constant(x.data(), x.shape());
        let out = attention(&mut tape, xv, &vars, None).unwrap();
        tape.value(out).to_vec()
    }

    // Dense oracle: softmax(Q·Kᵀ/√d_k)·V then W_o, all with plain loops.
    fn attention_oracle(x: &[f64], n: usize, d: usize, block: &TransformerBlock) -> Vec<f64> {
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, p: usize| -> Vec<f64> {
            let mut c = vec![0.0; m * p];
            for i in 0..m {
                for j in 0..p {
                    for l in 0..k {
                        c[i * p + j] += a[i * k + l] * b[l * p + j];
                    }
                }
            }
            c
        };
        let addb = |m: &mut Vec<f64>, b: &[f64]| {
            for row in m.chunks_mut(b.len()) {
                for (x, y) in row.iter_mut().zip(b) {
                    *x += y;
                }
            }
        };
        let mut q = mm(x, block.w_q.weight.data(), n, d, d);
        addb(&mut q, block.w_q.bias.data());
        let mut k = mm(x, block.w_k.weight.data(), n, d, d);
        addb(&mut k, block.w_k.bias.data());
        let mut v = mm(x, block.w_v.weight.data(), n, d, d);
        addb(&mut v, block.w_v.bias.data());
        // single head
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for l in 0..d {
                    scores[i * n + j] += q[i * d + l] * k[j * d + l];
                }
                scores[i * n + j] /= (d as f64).sqrt();
            }
        }
        for row in scores.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let attn = mm(&scores, &v, n, n, d);
        let mut out = mm(&attn, block.w_o.weight.data(), n, d, d);
        addb(&mut out, block.w_o.bias.data());
        out
    }

    #[test]
    fn attention_single_token_is_projected_value_row() {
        // softmax over one key is 1, so output = V row through W_o
        let config = BackboneConfig { d_model: 2, heads: 1, ..BackboneConfig::gradcheck() };
        let mut block = zeroed_block(&config);
        block.w_v.weight = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        block.w_o.weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = run_attention(&x, &block, 1);
        assert_eq!(out, vec![4.0, 6.0]); // x·W_v = [4, 6], identity W_o
    }

    #[test]
    fn attention_zero_logits_average_value_rows() {
        // W_q = W_k = 0 → uniform weights → every output row is the mean V row
        let config = BackboneConfig { d_model: 2, heads: 1, ..BackboneConfig::gradcheck() };
        let mut block = zeroed_block(&config);
        block.w_v.weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        block.w_o.weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let out = run_attention(&x, &block, 1);
        assert_eq!(out, vec![1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let config = BackboneConfig { d_model: 2, heads: 1, ..BackboneConfig::gradcheck() };
        let mut block = zeroed_block(&config);
        block.w_q.weight = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.8]).unwrap();
        block.w_q.bias = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();
        block.w_k.weight = Tensor::new(vec![2, 2], vec![-0.4, 0.6, 0.2, 0.9]).unwrap();
        block.w_v.weight = Tensor::new(vec![2, 2], vec![1.1, 0.4, -0.7, 0.2]).unwrap();
        block.w_v.bias = Tensor::new(vec![2], vec![0.05, 0.0]).unwrap();
        block.w_o.weight = Tensor::new(vec![2, 2], vec![0.9, -0.3, 0.1, 1.2]).unwrap();
        block.w_o.bias = Tensor::new(vec![2], vec![-0.2, 0.3]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.7, -1.3, 0.25, 0.6]).unwrap();
        let out = run_attention(&x, &block, 1);
        let oracle = attention_oracle(x.data(), 2, 2, &block);
        for (a, e) in out.iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn multi_head_reduces_to_per_head_slices() {
        // heads=2 on d=4: output equals concatenating two d_k=2 single-head
        // attentions computed on the sliced projections
        let config = BackboneConfig { d_model: 4, heads: 2, ..BackboneConfig::gradcheck() };
        let mut rng = SplitMix64::new(42);
        let block = TransformerBlock::random(&config, &mut rng);
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.next_range_f64(-1.0, 1.0)).collect()).unwrap();

        let full = run_attention(&x, &block, 2);

        // oracle: project, slice heads, per-head softmax(QKᵀ/√2)V, concat, W_o
        let n = 3;
        let d = 4;
        let d_k = 2;
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, p: usize| -> Vec<f64> {
            let mut c = vec![0.0; m * p];
            for i in 0..m {
                for j in 0..p {
                    for l in 0..k {
                        c[i * p + j] += a[i * k + l] * b[l * p + j];
                    }
                }
            }
            c
        };
        let project = |w: &Linear| -> Vec<f64> {
            let mut out = mm(x.data(), w.weight.data(), n, d, d);
            for row in out.chunks_mut(d) {
                for (x, b) in row.iter_mut().zip(w.bias.data()) {
                    *x += b;
                }
            }
            out
        };
        let q = project(&block.w_q);
        let k = project(&block.w_k);
        let v = project(&block.w_v);
        let mut concat = vec![0.0; n * d];
        for h in 0..2 {
            let col = h * d_k;
            let slice = |m: &[f64]| -> Vec<f64> {
                let mut s = vec![0.0; n * d_k];
                for i in 0..n {
                    s[i * d_k..(i + 1) * d_k].copy_from_slice(&m[i * d + col..i * d + col + d_k]);
                }
                s
            };
            let (qh, kh, vh) = (slice(&q), slice(&k), slice(&v));
            let mut scores = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for l in 0..d_k {
                        scores[i * n + j] += qh[i * d_k + l] * kh[j * d_k + l];
                    }
                    scores[i * n + j] /= (d_k as f64).sqrt();
                }
            }
            for row in scores.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
            }
            let oh = mm(&scores, &vh, n, n, d_k);
            for i in 0..n {
                concat[i * d + col..i * d + col + d_k].copy_from_slice(&oh[i * d_k..(i + 1) * d_k]);
            }
        }
        let mut oracle = mm(&concat, block.w_o.weight.data(), n, d, d);
        for row in oracle.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(block.w_o.bias.data()) {
                *x += b;
            }
        }
        for (a, e) in full.iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_cases() {
        let config = BackboneConfig { d_model: 2, heads: 1, ..BackboneConfig::gradcheck() };
        // zero weights → only the second bias survives
        let mut block = zeroed_block(&config);
        block.ffn2.bias = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let mut b = Vec::new();
        let vars = block.bind(&mut tape, 1, 0, &mut b);
        let xv = tape.constant(x.data(), x.shape());
        let out = ffn(&mut tape, xv, &vars).unwrap();
        assert_eq!(tape.value(out), &[0.5, -0.5]);

        // relu gating on a 1×1-style identity config
        let mut block = zeroed_block(&config);
        block.ffn1.weight = Tensor::new(vec![2, 8], {
            let mut w = vec![0.0; 16];
            w[0] = 1.0; // first feature → first hidden unit
            w
        }).unwrap();
        block.ffn2.weight = Tensor::new(vec![8, 2], {
            let mut w = vec![0.0; 16];
            w[0] = 1.0; // first hidden unit → first feature
            w
        }).unwrap();
        let run = |x0: f64| -> f64 {
            let mut tape = Tape::new();
            let mut b = Vec::new();
            let vars = block.bind(&mut tape, 1, 0, &mut b);
            let xv = tape.constant(&[x0, 0.0], &[1, 2]);
            let out = ffn(&mut tape, xv, &vars).unwrap();
            tape.value(out)[0]
        };
        assert_eq!(run(2.0), 2.0);
        assert_eq!(run(-2.0), 0.0);

        // random case against a two-step matmul+relu oracle
        let mut rng = SplitMix64::new(7);
        let config = BackboneConfig { d_model: 4, heads: 2, ..BackboneConfig::gradcheck() };
        let block = TransformerBlock::random(&config, &mut rng);
        let x = Tensor::new(vec![2, 4], (0..8).map(|_| rng.next_range_f64(-1.0, 1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let mut bnd = Vec::new();
        let vars = block.bind(&mut tape, 2, 0, &mut bnd);
        let xv = tape.constant(x.data(), x.shape());
        let out = ffn(&mut tape, xv, &vars).unwrap();

        let h = config.ffn_hidden();
        let mut hid = vec![0.0; 2 * h];
        for i in 0..2 {
            for j in 0..h {
                let mut acc = block.ffn1.bias.data()[j];
                for l in 0..4 {
                    acc += x.data()[i * 4 + l] * block.ffn1.weight.data()[l * h + j];
                }
                hid[i * h + j] = acc.max(0.0);
            }
        }
        let mut oracle = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = block.ffn2.bias.data()[j];
                for l in 0..h {
                    acc += hid[i * h + l] * block.ffn2.weight.data()[l * 4 + j];
                }
                oracle[i * 4 + j] = acc;
            }
        }
        for (a, e) in tape.value(out).iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn block_with_zero_weights_is_residual_identity() {
        let config = BackboneConfig { d_model: 4, heads: 2, ..BackboneConfig::gradcheck() };
        let block = zeroed_block(&config);
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let mut b = Vec::new();
        let vars = block.bind(&mut tape, 2, 0, &mut b);
        let xv = tape.constant(x.data(), x.shape());
        let y = block_forward(&mut tape, xv, &vars, None).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn depth_two_encode_equals_manual_chaining() {
        let config = BackboneConfig::gradcheck();
        let backbone = Backbone::new(config, 99).unwrap();
        let mut rng = SplitMix64::new(100);
        let image = Tensor::new(
            vec![16, 16],
            (0..256).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();

        let full = {
            let mut tape = Tape::new();
            let mut b = Vec::new();
            let vars = backbone.bind(&mut tape, &mut b);
            let hooks = vec![None, None];
            let out = encode(&mut tape, &vars, &config, &image, &hooks).unwrap();
            tape.value(out).to_vec()
        };

        let manual = {
            let mut tape = Tape::new();
            let mut b = Vec::new();
            let vars = backbone.bind(&mut tape, &mut b);
            let patches = patchify(&image, &config).unwrap();
            let pv = tape.constant(patches.data(), patches.shape());
            let emb = tape.matmul(pv, vars.patch_embed.weight).unwrap();
            let emb = tape.add_bias(emb, vars.patch_embed.bias).unwrap();
            let t0 = tape.add(emb, vars.pos_embed).unwrap();
            let t1 = block_forward(&mut tape, t0, &vars.blocks[0], None).unwrap();
            let t2 = block_forward(&mut tape, t1, &vars.blocks[1], None).unwrap();
            tape.value(t2).to_vec()
        };
        assert_eq!(full, manual);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let config = BackboneConfig { image_size: 16, patch_size: 4, ..BackboneConfig::gradcheck() };
        assert_eq!(config.n_tokens(), 16);
        let backbone = Backbone::new(config, 5).unwrap();
        let image = Tensor::new(vec![16, 16], (0..256).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let mut b = Vec::new();
            let vars = backbone.bind(&mut tape, &mut b);
            let out = encode(&mut tape, &vars, &config, &image, &[None, None]).unwrap();
            (tape.shape_of(out).to_vec(), tape.value(out).to_vec())
        };
        let (shape1, out1) = run();
        let (_, out2) = run();
        assert_eq!(shape1, vec![16, 16]); // n = 16 tokens of d = 16
        assert!(out1.iter().zip(&out2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn encode_rejects_wrong_image_size() {
        let config = BackboneConfig::gradcheck();
        let backbone = Backbone::new(config, 5).unwrap();
        let image = Tensor::zeros(vec![8, 8]);
        let mut tape = Tape::new();
        let mut b = Vec::new();
        let vars = backbone.bind(&mut tape, &mut b);
        assert!(encode(&mut tape, &vars, &config, &image, &[None, None]).is_err());
    }

    #[test]
    fn patch_swap_permutes_embedding_rows() {
        let config = BackboneConfig::gradcheck();
        let backbone = Backbone::new(config, 8).unwrap();
        let mut rng = SplitMix64::new(9);
        let mut img_a = vec![0.0; 256];
        for v in img_a.iter_mut() {
            *v = rng.next_f64();
        }
        // swap patch 0 (rows 0..4, cols 0..4) with patch 5 (rows 4..8, cols 4..8)
        let mut img_b = img_a.clone();
        for dr in 0..4 {
            for dc in 0..4 {
                let p0 = dr * 16 + dc;
                let p5 = (4 + dr) * 16 + (4 + dc);
                img_b.swap(p0, p5);
            }
        }
        let embed = |img: &[f64]| -> Vec<f64> {
            let image = Tensor::new(vec![16, 16], img.to_vec()).unwrap();
            let patches = patchify(&image, &config).unwrap();
            let mut tape = Tape::new();
            let pv = tape.constant(patches.data(), patches.shape());
            let w = tape.constant(backbone.patch_embed.weight.data(), backbone.patch_embed.weight.shape());
            let b = tape.constant(backbone.patch_embed.bias.data(), backbone.patch_embed.bias.shape());
            let e = tape.matmul(pv, w).unwrap();
            let e = tape.add_bias(e, b).unwrap();
            tape.value(e).to_vec()
        };
        let ea = embed(&img_a);
        let eb = embed(&img_b);
        let d = config.d_model;
        for t in 0..config.n_tokens() {
            let partner = match t {
                0 => 5,
                5 => 0,
                other => other,
            };
            assert_eq!(&ea[t * d..(t + 1) * d], &eb[partner * d..(partner + 1) * d]);
        }
    }

    #[test]
    fn decode_mask_zero_head_gives_half_probability() {
        let config = BackboneConfig::gradcheck();
        let head = MaskHead::new(&config);
        let mut tape = Tape::new();
        let mut b = Vec::new();
        let hv = head.bind(&mut tape, &mut b);
        let tokens = tape.constant(&vec![0.3; 16 * 16], &[16, 16]);
        let logits = decode_mask(&mut tape, tokens, &hv).unwrap();
        let probs = tape.sigmoid(logits);
        assert!(tape.value(probs).iter().all(|p| *p == 0.5));
    }

    #[test]
    fn decode_mask_saturating_bias() {
        let config = BackboneConfig::gradcheck();
        let mut head = MaskHead::new(&config);
        head.proj.bias = Tensor::new(vec![16], vec![10.0; 16]).unwrap();
        let mut tape = Tape::new();
        let mut b = Vec::new();
        let hv = head.bind(&mut tape, &mut b);
        let tokens = tape.constant(&vec![0.0; 16 * 16], &[16, 16]);
        let logits = decode_mask(&mut tape, tokens, &hv).unwrap();
        let probs = tape.sigmoid(logits);
        assert!(tape.value(probs).iter().all(|p| *p > 0.9999));
    }

    #[test]
    fn patch_to_pixel_index_mapping() {
        // 8×8 image, patch 4: logit at (r, c) comes from patch
        // (⌊r/4⌋, ⌊c/4⌋) at offset (r mod 4, c mod 4)
        let config = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 16,
            depth: 1,
            heads: 2,
            ffn_ratio: 4,
        };
        let n = config.n_tokens();
        let p2 = 16;
        let patch_values: Vec<f64> = (0..n * p2).map(|i| {
            let token = i / p2;
            let offset = i % p2;
            (token * 1000 + offset) as f64
        }).collect();
        let img = assemble_image(&patch_values, &config);
        for r in 0..8 {
            for c in 0..8 {
                let token = (r / 4) * 2 + (c / 4);
                let offset = (r % 4) * 4 + (c % 4);
                assert_eq!(img[r * 8 + c], (token * 1000 + offset) as f64);
            }
        }
        // and patchify_mask is its inverse
        let mask = Tensor::new(vec![8, 8], img).unwrap();
        assert_eq!(patchify_mask(&mask, &config).unwrap(), patch_values);
    }

    #[test]
    fn zeroed_blocks_make_encode_residual_only() {
        let config = BackboneConfig::gradcheck();
        let mut backbone = Backbone::new(config, 3).unwrap();
        for block in backbone.blocks.iter_mut() {
            *block = zeroed_block(&config);
        }
        let mut rng = SplitMix64::new(4);
        let image = Tensor::new(vec![16, 16], (0..256).map(|_| rng.next_f64()).collect()).unwrap();
        let mut tape = Tape::new();
        let mut b = Vec::new();
        let vars = backbone.bind(&mut tape, &mut b);
        let out = encode(&mut tape, &vars, &config, &image, &[None, None]).unwrap();

        // oracle: patch-embed + positional embedding only
        let patches = patchify(&image, &config).unwrap();
        let mut tape2 = Tape::new();
        let pv = tape2.constant(patches.data(), patches.shape());
        let w = tape2.constant(backbone.patch_embed.weight.data(), backbone.patch_embed.weight.shape());
        let bias = tape2.constant(backbone.patch_embed.bias.data(), backbone.patch_embed.bias.shape());
        let pos = tape2.constant(backbone.pos_embed.data(), backbone.pos_embed.shape());
        let e = tape2.matmul(pv, w).unwrap();
        let e = tape2.add_bias(e, bias).unwrap();
        let expected = tape2.add(e, pos).unwrap();
        assert_eq!(tape.value(out), tape2.value(expected));
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::desk().validate().is_ok());
        assert!(BackboneConfig::vitb_like().validate().is_ok());
        let bad = BackboneConfig { image_size: 65, ..BackboneConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { heads: 3, ..BackboneConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_formulas_match_allocated_tensors() {
        let config = BackboneConfig::desk();
        let backbone = Backbone::new(config, 1).unwrap();
        let walked: usize = backbone.params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(walked, config.backbone_param_count());
        let head = MaskHead::new(&config);
        let walked: usize = head.params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(walked, config.head_param_count());
    }
}
