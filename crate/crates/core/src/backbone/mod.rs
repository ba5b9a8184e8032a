//! Toy two-stream diffusion transformer predicting the flow velocity.

mod blocks;
mod positions;
mod session;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{
    dual_stream_block, embed_branches, forward_patches, model_forward, single_stream_block, timestep_embed,
    timestep_features, BlockContext, Condition, ForwardOptions,
};
pub use positions::{assign_positions, rope_table, PositionAssignment};
pub use session::{AdapterUse, AttnRecord, Session, Trainable};

use crate::attention::AttentionMode;
use crate::error::{dim_err, Error, Result};
use crate::lora::{AdapterKind, ConditionType, LoraAdapter, LoraRegistry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub num_dual_blocks: usize,
    pub num_single_blocks: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub rope_base: f64,
    /// Rotary sub-dimensions for (text index, row, col); sums to `head_dim`.
    pub rope_axes: [usize; 3],
    pub mlp_ratio: usize,
    pub time_freq_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Attach adapters to single-stream blocks too (otherwise dual-stream only).
    pub lora_single_blocks: bool,
    /// Place subject/style conditions beside the image grid instead of on it.
    pub offset_reference_conditions: bool,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            head_dim: 32,
            num_heads: 2,
            num_dual_blocks: 2,
            num_single_blocks: 2,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            vocab_size: crate::toydata::VOCAB.len(),
            max_text_len: 8,
            rope_base: 100.0,
            rope_axes: [8, 12, 12],
            mlp_ratio: 4,
            time_freq_dim: 32,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_single_blocks: true,
            offset_reference_conditions: true,
            attention: AttentionMode::Cmmdit,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.head_dim == 0 || self.embed_dim != self.num_heads * self.head_dim {
            return bad(format!(
                "embed_dim {} must equal num_heads {} x head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_dual_blocks == 0 {
            return bad("num_dual_blocks must be at least 1".into());
        }
        if self.rope_axes.iter().sum::<usize>() != self.head_dim || self.rope_axes.iter().any(|a| a % 2 != 0) {
            return bad(format!(
                "rope_axes {:?} must be even and sum to head_dim {}",
                self.rope_axes, self.head_dim
            ));
        }
        if self.channels == 0 || self.vocab_size == 0 || self.max_text_len == 0 || self.mlp_ratio == 0 {
            return bad("channels, vocab_size, max_text_len and mlp_ratio must be positive".into());
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be even and positive".into());
        }
        if !(self.rope_base > 1.0) || self.lora_rank == 0 {
            return bad("rope_base must exceed 1 and lora_rank must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }

    pub fn block_names(&self) -> Vec<String> {
        (0..self.num_dual_blocks)
            .map(|i| format!("dual{i}"))
            .chain((0..self.num_single_blocks).map(|j| format!("single{j}")))
            .collect()
    }

    /// Adapter targets `(name, in, out)`: Q/K/V/O of every adapted block.
    pub fn lora_targets(&self) -> Vec<(String, usize, usize)> {
        let d = self.embed_dim;
        let mut out = Vec::new();
        for (b, block) in self.block_names().into_iter().enumerate() {
            if b >= self.num_dual_blocks && !self.lora_single_blocks {
                break;
            }
            for proj in PROJECTIONS {
                out.push((format!("{block}/{proj}"), d, d));
            }
        }
        out
    }

    /// Upper bound on adapter size: `2 * rank * (in + out) * targets * blocks`.
    pub fn adapter_param_bound(&self) -> usize {
        let blocks = self.num_dual_blocks + if self.lora_single_blocks { self.num_single_blocks } else { 0 };
        2 * self.lora_rank * (2 * self.embed_dim) * PROJECTIONS.len() * blocks
    }
}

pub(crate) const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// Predicted velocity in image layout `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityOutput<S> {
    pub velocity: Tensor<S>,
}

/// Base weights plus the adapter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub base: BTreeMap<String, Tensor<S>>,
    pub adapters: LoraRegistry<S>,
}

impl<S: Scalar> Model<S> {
    /// Random base weights. Modulation projections and the output head
    /// start at zero so every block begins as the identity.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mlp = d * config.mlp_ratio;
        let mut base = BTreeMap::new();
        let mut linear = |base: &mut BTreeMap<String, Tensor<S>>, name: &str, din: usize, dout: usize, zero: bool| {
            let w = if zero {
                Tensor::zeros(&[dout, din])
            } else {
                Tensor::uniform(&[dout, din], 1.0 / (din as f64).sqrt(), rng)
            };
            base.insert(format!("{name}/w"), w);
            base.insert(format!("{name}/b"), Tensor::zeros(&[dout]));
        };
        linear(&mut base, "patch", config.patch_dim(), d, false);
        linear(&mut base, "time/fc1", config.time_freq_dim, d, false);
        linear(&mut base, "time/fc2", d, d, false);
        let mut stream = |base: &mut BTreeMap<String, Tensor<S>>, prefix: &str| {
            linear(base, &format!("{prefix}/mod"), d, 6 * d, true);
            for proj in PROJECTIONS {
                linear(base, &format!("{prefix}/{proj}"), d, d, false);
            }
            linear(base, &format!("{prefix}/fc1"), d, mlp, false);
            linear(base, &format!("{prefix}/fc2"), mlp, d, false);
        };
        for i in 0..config.num_dual_blocks {
            stream(&mut base, &format!("dual{i}/txt"));
            stream(&mut base, &format!("dual{i}/img"));
        }
        for j in 0..config.num_single_blocks {
            stream(&mut base, &format!("single{j}"));
        }
        linear(&mut base, "final/mod", d, 2 * d, true);
        linear(&mut base, "final/head", d, config.patch_dim(), true);
        let table = Tensor::randn(&[config.vocab_size, d], 1.0, rng);
        base.insert("text/table".into(), table);
        Ok(Model {
            config,
            base,
            adapters: LoraRegistry::new(),
        })
    }

    /// A zero-delta adapter covering this model's LoRA targets.
    pub fn new_adapter<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LoraAdapter<S>> {
        LoraAdapter::init(
            self.config.lora_rank,
            self.config.lora_alpha,
            &self.config.lora_targets(),
            rng,
        )
    }

    pub fn base_param_count(&self) -> usize {
        self.base.values().map(Tensor::numel).sum()
    }

    /// Every tensor under its checkpoint name, in sorted order within groups.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> =
            self.base.iter().map(|(k, v)| (format!("base/{k}"), v)).collect();
        for (kind, a) in self.adapters.conditions() {
            push_adapter_tensors(adapter_prefix(AdapterKind::Condition(kind)), a, &mut out);
        }
        if let Some(a) = &self.adapters.denoising {
            push_adapter_tensors(adapter_prefix(AdapterKind::Denoising), a, &mut out);
        }
        if let Some(a) = &self.adapters.text {
            push_adapter_tensors(adapter_prefix(AdapterKind::Text), a, &mut out);
        }
        out
    }

    /// Mutable access by checkpoint name.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let unknown = || Error::Config(format!("no parameter named '{name}'"));
        if let Some(rest) = name.strip_prefix("base/") {
            return self.base.get_mut(rest).ok_or_else(unknown);
        }
        let (kind, rest) = parse_adapter_name(name).ok_or_else(unknown)?;
        let (target, which) = rest.rsplit_once('/').ok_or_else(unknown)?;
        let pair = self
            .adapters
            .get_mut(kind)
            .and_then(|a| a.pair_mut(target))
            .ok_or_else(unknown)?;
        match which {
            "A" => Ok(&mut pair.a),
            "B" => Ok(&mut pair.b),
            _ => Err(unknown()),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        if let Some(rest) = name.strip_prefix("base/") {
            return self.base.get(rest);
        }
        let (kind, rest) = parse_adapter_name(name)?;
        let (target, which) = rest.rsplit_once('/')?;
        let pair = self.adapters.get(kind)?.pair(target)?;
        match which {
            "A" => Some(&pair.a),
            "B" => Some(&pair.b),
            _ => None,
        }
    }
}

fn push_adapter_tensors<'a, S: Scalar>(prefix: String, a: &'a LoraAdapter<S>, out: &mut Vec<(String, &'a Tensor<S>)>) {
    for (target, pair) in a.targets() {
        out.push((format!("{prefix}/{target}/A"), &pair.a));
        out.push((format!("{prefix}/{target}/B"), &pair.b));
    }
}

/// Checkpoint name prefix of an adapter group.
pub fn adapter_prefix(kind: AdapterKind) -> String {
    match kind {
        AdapterKind::Condition(c) => format!("cond_lora/{c}"),
        AdapterKind::Denoising => "denoise_lora".into(),
        AdapterKind::Text => "text_lora".into(),
    }
}

/// Splits `cond_lora/<TYPE>/rest`, `denoise_lora/rest` or `text_lora/rest`.
pub fn parse_adapter_name(name: &str) -> Option<(AdapterKind, &str)> {
    if let Some(rest) = name.strip_prefix("cond_lora/") {
        let (ty, rest) = rest.split_once('/')?;
        let kind = ty.parse::<ConditionType>().ok()?;
        return Some((AdapterKind::Condition(kind), rest));
    }
    if let Some(rest) = name.strip_prefix("denoise_lora/") {
        return Some((AdapterKind::Denoising, rest));
    }
    name.strip_prefix("text_lora/").map(|rest| (AdapterKind::Text, rest))
}

/// `[H, W, C]` image to `[(H/p)(W/p), p*p*C]` patch rows, row-major over the
/// patch grid with `(dy, dx, c)` order inside a patch.
pub fn patchify<S: Scalar>(img: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let &[h, w, c] = img.shape() else {
        return Err(dim_err!("expected an [H, W, C] image, got {:?}", img.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!("image {h}x{w} not divisible into {patch}-pixel patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                let row = (gy * patch + dy) * w + gx * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(patches: &Tensor<S>, patch: usize, h: usize, w: usize, c: usize) -> Result<Tensor<S>> {
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape() != [gh * gw, patch * patch * c] || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!(
            "patches {:?} do not tile a {h}x{w}x{c} image with patch {patch}",
            patches.shape()
        ));
    }
    let src = patches.data();
    let mut out = vec![S::zero(); h * w * c];
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                let row = (gy * patch + dy) * w + gx * patch;
                out[row * c..(row + patch) * c].copy_from_slice(&src[k..k + patch * c]);
                k += patch * c;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[cfg(test)]
mod tests;
