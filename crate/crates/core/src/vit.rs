//! Pre-norm Vision-Transformer encoder, its parameter layout and the
//! patch tokenizer. The masked-reconstruction decoder reuses the same block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor, Var};
use crate::params::{Bound, Init, ParamSpec, Role};
use crate::peft::{self, AdapterSet, AdapterSite, LoraTarget};

pub const LN_EPS: f64 = 1e-6;
pub const EMBED_STD: f64 = 0.02;

/// Transformer geometry shared by the encoder and the reconstruction decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub use_cls_token: bool,
}

impl ViTConfig {
    /// ViT-Large/16 encoder with the standard 8-block, 512-wide MIM decoder.
    pub fn vit_large() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 1024,
            depth: 24,
            num_heads: 16,
            mlp_ratio: 4.0,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            use_cls_token: true,
        }
    }

    /// Desk-scale geometry for single-channel 64×64 images.
    pub fn vit_tiny() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            in_chans: 1,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            use_cls_token: true,
        }
    }

    pub const PRESETS: [&'static str; 2] = ["vit-large", "vit-tiny"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-large" => Ok(Self::vit_large()),
            "vit-tiny" => Ok(Self::vit_tiny()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {:?})",
                Self::PRESETS
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return bad(format!(
                "decoder dim {} not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.in_chans == 0 || self.mlp_ratio <= 0.0 {
            return bad("channels and mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_chans
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn decoder_mlp_hidden(&self) -> usize {
        (self.decoder_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Rows of the positional table: one per patch plus the class token.
    pub fn pos_rows(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    /// Input and output width of a block linear layer.
    pub fn linear_dims(&self, target: LoraTarget) -> (usize, usize) {
        let (d, h) = (self.embed_dim, self.mlp_hidden());
        match target {
            LoraTarget::Qkv => (d, 3 * d),
            LoraTarget::Proj => (d, d),
            LoraTarget::Fc1 => (d, h),
            LoraTarget::Fc2 => (h, d),
        }
    }
}

pub fn block_prefix(stack: &str, index: usize) -> String {
    format!("{stack}.blocks.{index}")
}

fn linear_specs(specs: &mut Vec<ParamSpec>, name: &str, role: Role, din: usize, dout: usize) {
    specs.push(ParamSpec::new(
        format!("{name}.weight"),
        role,
        &[dout, din],
        Init::XavierUniform {
            fan_in: din,
            fan_out: dout,
        },
    ));
    specs.push(ParamSpec::new(format!("{name}.bias"), role, &[dout], Init::Zeros));
}

fn norm_specs(specs: &mut Vec<ParamSpec>, name: &str, role: Role, d: usize) {
    specs.push(ParamSpec::new(format!("{name}.weight"), role, &[d], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}.bias"), role, &[d], Init::Zeros));
}

fn block_specs(specs: &mut Vec<ParamSpec>, prefix: &str, role: Role, d: usize, hidden: usize) {
    norm_specs(specs, &format!("{prefix}.norm1"), role, d);
    linear_specs(specs, &format!("{prefix}.attn.qkv"), role, d, 3 * d);
    linear_specs(specs, &format!("{prefix}.attn.proj"), role, d, d);
    norm_specs(specs, &format!("{prefix}.norm2"), role, d);
    linear_specs(specs, &format!("{prefix}.mlp.fc1"), role, d, hidden);
    linear_specs(specs, &format!("{prefix}.mlp.fc2"), role, hidden, d);
}

/// Encoder parameters (the frozen backbone of every PEFT run).
pub fn encoder_specs(cfg: &ViTConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let role = Role::Backbone;
    let mut specs = Vec::new();
    linear_specs(&mut specs, "encoder.patch_embed", role, cfg.patch_dim(), d);
    if cfg.use_cls_token {
        specs.push(ParamSpec::new(
            "encoder.cls_token",
            role,
            &[d],
            Init::TruncNormal { std: EMBED_STD },
        ));
    }
    specs.push(ParamSpec::new(
        "encoder.pos_embed",
        role,
        &[cfg.pos_rows(), d],
        Init::TruncNormal { std: EMBED_STD },
    ));
    for i in 0..cfg.depth {
        block_specs(&mut specs, &block_prefix("encoder", i), role, d, cfg.mlp_hidden());
    }
    norm_specs(&mut specs, "encoder.norm", role, d);
    specs
}

/// Lightweight reconstruction decoder, mask token and pixel head.
pub fn decoder_specs(cfg: &ViTConfig) -> Vec<ParamSpec> {
    let dd = cfg.decoder_dim;
    let role = Role::Decoder;
    let mut specs = Vec::new();
    linear_specs(&mut specs, "decoder.embed", role, cfg.embed_dim, dd);
    specs.push(ParamSpec::new(
        "decoder.mask_token",
        role,
        &[dd],
        Init::TruncNormal { std: EMBED_STD },
    ));
    specs.push(ParamSpec::new(
        "decoder.pos_embed",
        role,
        &[cfg.pos_rows(), dd],
        Init::TruncNormal { std: EMBED_STD },
    ));
    for i in 0..cfg.decoder_depth {
        block_specs(
            &mut specs,
            &block_prefix("decoder", i),
            role,
            dd,
            cfg.decoder_mlp_hidden(),
        );
    }
    norm_specs(&mut specs, "decoder.norm", role, dd);
    linear_specs(&mut specs, "decoder.pred", role, dd, cfg.patch_dim());
    specs
}

/// Which parameters a count covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountWhich {
    Total,
    Trainable,
}

/// Exact parameter count of materialized state. `Trainable` follows the
/// freeze mask carried by each tensor's `requires_grad` flag.
pub fn count_params<T: Real>(state: &crate::params::ParamStore<T>, which: CountWhich) -> usize {
    match which {
        CountWhich::Total => state.numel(),
        CountWhich::Trainable => state.trainable_numel(),
    }
}

// ---------------------------------------------------------------------- tokens

/// Splits `image: [C×H×W]` into row-major patches of `p·p·C` values laid
/// out as (row-in-patch, column-in-patch, channel).
pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || p == 0 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(Error::shape(
            "patchify",
            format!("image {s:?} not divisible into {p}×{p} patches"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out.push(src[(ch * h + py * p + y) * w + px * p + x]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`] for a `grid_h × grid_w` patch grid.
pub fn unpatchify<T: Real>(
    tokens: &Tensor<T>,
    p: usize,
    channels: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<Tensor<T>> {
    if tokens.shape() != [grid_h * grid_w, p * p * channels] {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "tokens {:?} for a {grid_h}×{grid_w} grid of {p}×{p}×{channels}",
                tokens.shape()
            ),
        ));
    }
    let (h, w) = (grid_h * p, grid_w * p);
    let mut out = vec![T::zero(); channels * h * w];
    let src = tokens.data();
    let mut i = 0;
    for py in 0..grid_h {
        for px in 0..grid_w {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..channels {
                        out[(ch * h + py * p + y) * w + px * p + x] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], out)
}

// ---------------------------------------------------------------------- forward

/// Linear layer of a block plus every LoRA delta attached to it:
/// `x·Wᵀ + b + Σ (α/r)·(x·Aᵀ)·Bᵀ`.
fn adapted_linear<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    layer: &str,
    x: Var,
    lora: &[(String, f64)],
) -> Result<Var> {
    let mut y = g.linear(
        x,
        b.get(&format!("{layer}.weight"))?,
        Some(b.get(&format!("{layer}.bias"))?),
    )?;
    for (prefix, scale) in lora {
        let down = g.linear(x, b.get(&format!("{prefix}.a"))?, None)?;
        let up = g.linear(down, b.get(&format!("{prefix}.b"))?, None)?;
        let delta = g.scale(up, T::from_f64_lossy(*scale));
        y = g.add(y, delta)?;
    }
    Ok(y)
}

/// Multi-head self-attention on `x: [n×d]` from a fused QKV projection.
fn self_attention<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    prefix: &str,
    block: usize,
    x: Var,
    heads: usize,
    adapters: &AdapterSet,
) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let dh = d / heads;
    let qkv = adapted_linear(
        g,
        b,
        &format!("{prefix}.attn.qkv"),
        x,
        &adapters.lora_sites(block, LoraTarget::Qkv),
    )?;
    let split = g.reshape(qkv, &[n, 3, heads, dh])?;
    let split = g.permute(split, &[1, 2, 0, 3])?;
    let split = g.reshape(split, &[3 * heads, n, dh])?;
    let q = g.narrow(split, 0, heads)?;
    let k = g.narrow(split, heads, heads)?;
    let v = g.narrow(split, 2 * heads, heads)?;
    let o = g.scaled_dot_attention(q, k, v)?;
    let o = g.permute(o, &[1, 0, 2])?;
    let o = g.reshape(o, &[n, d])?;
    adapted_linear(
        g,
        b,
        &format!("{prefix}.attn.proj"),
        o,
        &adapters.lora_sites(block, LoraTarget::Proj),
    )
}

/// One pre-norm transformer block with optional PEFT terms:
///
/// ```text
/// F̂  = F + MSA(Norm(F)) + Σ AP_msa(MSA(Norm(F)))
/// F' = F̂ + FFN(Norm(F̂)) + Σ AP_ffn(FFN(Norm(F̂)))
/// ```
///
/// `prefix` names the block's backbone parameters (e.g. `encoder.blocks.3`);
/// `block` selects the matching adapter parameters.
pub fn block_forward<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    prefix: &str,
    block: usize,
    x: Var,
    heads: usize,
    adapters: &AdapterSet,
) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let d = b.get(&format!("{prefix}.norm1.weight")).map(|v| g.shape(v)[0])?;
    if sx.len() != 2 || sx[0] == 0 || sx[1] != d {
        return Err(Error::shape("block_forward", format!("tokens {sx:?} for width {d}")));
    }
    let h = g.layer_norm(
        x,
        b.get(&format!("{prefix}.norm1.weight"))?,
        b.get(&format!("{prefix}.norm1.bias"))?,
        LN_EPS,
    )?;
    let msa = self_attention(g, b, prefix, block, h, heads, adapters)?;
    let mut x1 = g.add(x, msa)?;
    for ap in adapters.adapter_sites(block, AdapterSite::Msa) {
        let delta = peft::adapter_forward(g, b, &ap, msa)?;
        x1 = g.add(x1, delta)?;
    }

    let h2 = g.layer_norm(
        x1,
        b.get(&format!("{prefix}.norm2.weight"))?,
        b.get(&format!("{prefix}.norm2.bias"))?,
        LN_EPS,
    )?;
    let f = adapted_linear(
        g,
        b,
        &format!("{prefix}.mlp.fc1"),
        h2,
        &adapters.lora_sites(block, LoraTarget::Fc1),
    )?;
    let f = g.gelu(f);
    let ffn = adapted_linear(
        g,
        b,
        &format!("{prefix}.mlp.fc2"),
        f,
        &adapters.lora_sites(block, LoraTarget::Fc2),
    )?;
    let mut out = g.add(x1, ffn)?;
    for ap in adapters.adapter_sites(block, AdapterSite::Ffn) {
        let delta = peft::adapter_forward(g, b, &ap, ffn)?;
        out = g.add(out, delta)?;
    }
    Ok(out)
}

/// Encoder output and the layout of its leading non-patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: Var,
    /// Prompt tokens at the front of the sequence.
    pub num_prompts: usize,
    /// Whether a class token follows the prompts.
    pub has_cls: bool,
}

impl Encoded {
    /// Number of leading tokens that are not image patches.
    pub fn prefix_len(&self) -> usize {
        self.num_prompts + usize::from(self.has_cls)
    }
}

/// Encodes the visible patches `patches: [N_vis×(p²C)]` whose grid
/// positions are `visible`.
///
/// Order of the output sequence: prompts, class token, patch tokens.
/// Prompts carry no positional embedding.
pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    cfg: &ViTConfig,
    adapters: &AdapterSet,
    patches: Var,
    visible: &[usize],
) -> Result<Encoded> {
    let sp = g.shape(patches).to_vec();
    if sp.len() != 2 || sp[1] != cfg.patch_dim() || sp[0] != visible.len() {
        return Err(Error::shape(
            "encode",
            format!(
                "patches {sp:?} for {} visible positions of width {}",
                visible.len(),
                cfg.patch_dim()
            ),
        ));
    }
    if visible.len() > cfg.num_patches() || visible.iter().any(|&i| i >= cfg.num_patches()) {
        return Err(Error::shape(
            "encode",
            format!(
                "{} tokens exceed the {}-entry positional table",
                visible.len(),
                cfg.num_patches()
            ),
        ));
    }
    let cls_offset = usize::from(cfg.use_cls_token);
    let mut x = g.linear(
        patches,
        b.get("encoder.patch_embed.weight")?,
        Some(b.get("encoder.patch_embed.bias")?),
    )?;
    let pos_table = b.get("encoder.pos_embed")?;
    let rows: Vec<usize> = visible.iter().map(|&i| i + cls_offset).collect();
    let pos = g.gather_rows(pos_table, &rows)?;
    x = g.add(x, pos)?;
    if cfg.use_cls_token {
        let cls = g.reshape(b.get("encoder.cls_token")?, &[1, cfg.embed_dim])?;
        let cls_pos = g.narrow(pos_table, 0, 1)?;
        let cls = g.add(cls, cls_pos)?;
        x = g.concat(&[cls, x])?;
    }
    let mut num_prompts = 0;
    for prompt_name in adapters.prompt_params() {
        let prompts = b.get(&prompt_name)?;
        num_prompts += g.shape(prompts)[0];
        x = peft::prepend_prompts(g, x, prompts)?;
    }
    for i in 0..cfg.depth {
        x = block_forward(g, b, &block_prefix("encoder", i), i, x, cfg.num_heads, adapters)?;
    }
    let tokens = g.layer_norm(x, b.get("encoder.norm.weight")?, b.get("encoder.norm.bias")?, LN_EPS)?;
    Ok(Encoded {
        tokens,
        num_prompts,
        has_cls: cfg.use_cls_token,
    })
}
