use std::sync::Arc;

use crate::attention::{cmmdit_attention, AttentionMode, BranchLayout};
use crate::error::{dim_err, Error, Result};
use crate::lora::{linear_with_lora, switch_select, AdapterKind, ConditionType};
use crate::tensor::{RopeTable, Scalar, Tensor, Var};

use super::{assign_positions, patchify, rope_table, unpatchify, AdapterUse, AttnRecord, Model, Session, VelocityOutput};

const LN_EPS: f64 = 1e-6;

/// A conditional branch input: its type and its `[H, W, C]` image.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a, S> {
    pub kind: ConditionType,
    pub image: &'a Tensor<S>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Apply the Denoising-LoRA on X rows.
    pub denoising: bool,
    /// Apply the Text-LoRA on T rows.
    pub text_lora: bool,
    /// Record each block's attention node in [`Session::trace`].
    pub trace: bool,
}

/// Shared state for the blocks of one forward pass.
pub struct BlockContext<S> {
    pub layout: BranchLayout,
    pub rope: Arc<RopeTable<S>>,
    /// `silu(timestep embedding)`, `[1, embed_dim]`.
    pub cond_vec: Var,
    /// Adapter per branch `[T, X, C_1, ..]`.
    pub adapters: Vec<Option<AdapterKind>>,
    pub trace: bool,
}

/// Sinusoidal features of `1000 t`, `[1, dim]` as `[cos | sin]`.
pub fn timestep_features<S: Scalar>(t: f64, dim: usize) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[j] = S::lit(arg.cos());
        out[half + j] = S::lit(arg.sin());
    }
    Tensor::new(vec![1, dim], out)
}

/// Timestep features through a two-layer SiLU network, `[1, embed_dim]`.
pub fn timestep_embed<S: Scalar>(sess: &mut Session<'_, S>, t: f64) -> Result<Var> {
    let feats = timestep_features(t, sess.model.config.time_freq_dim)?;
    let x = sess.graph.input(feats);
    let h = linear(sess, x, "time/fc1")?;
    let h = sess.graph.silu(h)?;
    linear(sess, h, "time/fc2")
}

fn linear<S: Scalar>(sess: &mut Session<'_, S>, x: Var, prefix: &str) -> Result<Var> {
    let w = sess.base(&format!("{prefix}/w"))?;
    let b = sess.base(&format!("{prefix}/b"))?;
    sess.graph.linear(x, w, Some(b))
}

/// Splits `linear(c, W_mod)` into `k` row vectors of width `embed_dim`.
fn modulation<S: Scalar>(sess: &mut Session<'_, S>, prefix: &str, cond_vec: Var, k: usize) -> Result<Vec<Var>> {
    let d = sess.model.config.embed_dim;
    let m = linear(sess, cond_vec, &format!("{prefix}/mod"))?;
    let m = sess.graph.reshape(m, &[k * d])?;
    (0..k).map(|i| sess.graph.narrow(m, 0, i * d, d)).collect()
}

/// `layer_norm(x) * (1 + scale) + shift`.
fn modulate<S: Scalar>(sess: &mut Session<'_, S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let g = &mut sess.graph;
    let h = g.layer_norm(x, LN_EPS)?;
    let s = g.offset(scale, S::one())?;
    let h = g.mul_row(h, s)?;
    g.add_row(h, shift)
}

struct Stream<'a> {
    weights: &'a str,
    /// Index into the block's modulation sets.
    modulation: usize,
}

fn project<S: Scalar>(
    sess: &mut Session<'_, S>,
    block: &str,
    weights: &str,
    proj: &'static str,
    x: Var,
    branch: usize,
    adapter: Option<AdapterKind>,
) -> Result<Var> {
    let w = sess.base(&format!("{weights}/{proj}/w"))?;
    let b = sess.base(&format!("{weights}/{proj}/b"))?;
    let lora = match adapter {
        Some(kind) => {
            let bound = sess.lora(kind, &format!("{block}/{proj}"));
            if bound.is_some() {
                sess.adapter_log.push(AdapterUse {
                    block: block.to_string(),
                    proj,
                    branch,
                    adapter: kind,
                });
            }
            bound
        }
        None => None,
    };
    linear_with_lora(&mut sess.graph, x, w, Some(b), lora)
}

/// `[n, heads * head_dim]` to `[heads, n, head_dim]`.
fn split_heads<S: Scalar>(sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
    let (h, hd) = (sess.model.config.num_heads, sess.model.config.head_dim);
    let n = sess.graph.shape(x)[0];
    let x = sess.graph.reshape(x, &[n, h, hd])?;
    sess.graph.swap_axes01(x)
}

fn merge_heads<S: Scalar>(sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
    let d = sess.model.config.embed_dim;
    let n = sess.graph.shape(x)[1];
    let x = sess.graph.swap_axes01(x)?;
    sess.graph.reshape(x, &[n, d])
}

#[allow(clippy::too_many_arguments)]
fn transformer_block<S: Scalar>(
    sess: &mut Session<'_, S>,
    block: &str,
    streams: &mut [Var],
    spec: &[Stream<'_>],
    mods: &[Vec<Var>],
    ctx: &BlockContext<S>,
    adapted: bool,
) -> Result<()> {
    if streams.len() != ctx.layout.num_conditions() + 2 || streams.len() != ctx.adapters.len() {
        return Err(dim_err!(
            "{} streams for a layout with {} conditions",
            streams.len(),
            ctx.layout.num_conditions()
        ));
    }
    let adapter = |s: usize| if adapted { ctx.adapters[s] } else { None };

    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for (s, &x) in streams.iter().enumerate() {
        let m = &mods[spec[s].modulation];
        let h = modulate(sess, x, m[0], m[1])?;
        qs.push(project(sess, block, spec[s].weights, "q", h, s, adapter(s))?);
        ks.push(project(sess, block, spec[s].weights, "k", h, s, adapter(s))?);
        vs.push(project(sess, block, spec[s].weights, "v", h, s, adapter(s))?);
    }
    let q = sess.graph.cat(&qs, 0)?;
    let k = sess.graph.cat(&ks, 0)?;
    let v = sess.graph.cat(&vs, 0)?;
    let q = split_heads(sess, q)?;
    let k = split_heads(sess, k)?;
    let v = split_heads(sess, v)?;
    let q = sess.graph.rope(q, ctx.rope.clone())?;
    let k = sess.graph.rope(k, ctx.rope.clone())?;

    let (attn, node) = match sess.model.config.attention {
        AttentionMode::Cmmdit => {
            let scoped = cmmdit_attention(&mut sess.graph, q, k, v, &ctx.layout)?;
            (scoped.output, scoped.joint)
        }
        AttentionMode::Mmdit => {
            let scale = S::lit(1.0 / (sess.model.config.head_dim as f64).sqrt());
            let out = sess.graph.attention(q, k, v, scale)?;
            (out, out)
        }
    };
    if ctx.trace {
        sess.trace.push(AttnRecord {
            block: block.to_string(),
            layout: ctx.layout.clone(),
            node,
        });
    }
    let attn = merge_heads(sess, attn)?;

    let mut start = 0;
    for (s, x) in streams.iter_mut().enumerate() {
        let n = sess.graph.shape(*x)[0];
        let rows = sess.graph.narrow(attn, 0, start, n)?;
        start += n;
        let m = &mods[spec[s].modulation];
        let o = project(sess, block, spec[s].weights, "o", rows, s, adapter(s))?;
        let o = sess.graph.mul_row(o, m[2])?;
        let res = sess.graph.add(*x, o)?;

        let h = modulate(sess, res, m[3], m[4])?;
        let h = linear(sess, h, &format!("{}/fc1", spec[s].weights))?;
        let h = sess.graph.gelu(h)?;
        let h = linear(sess, h, &format!("{}/fc2", spec[s].weights))?;
        let h = sess.graph.mul_row(h, m[5])?;
        *x = sess.graph.add(res, h)?;
    }
    Ok(())
}

/// Dual-stream block `index`: text rows use the text weights, X and every
/// condition use the image weights (and its modulation), each with its own
/// adapter.
pub fn dual_stream_block<S: Scalar>(
    sess: &mut Session<'_, S>,
    index: usize,
    streams: &mut [Var],
    ctx: &BlockContext<S>,
) -> Result<()> {
    let block = format!("dual{index}");
    let txt = format!("{block}/txt");
    let img = format!("{block}/img");
    let mods = vec![
        modulation(sess, &txt, ctx.cond_vec, 6)?,
        modulation(sess, &img, ctx.cond_vec, 6)?,
    ];
    let spec: Vec<Stream<'_>> = (0..streams.len())
        .map(|s| {
            if s == 0 {
                Stream { weights: &txt, modulation: 0 }
            } else {
                Stream { weights: &img, modulation: 1 }
            }
        })
        .collect();
    transformer_block(sess, &block, streams, &spec, &mods, ctx, true)
}

/// Single-stream block `index` over the unified sequence, given as its
/// branch spans `[T, X, C_1, ..]`: one weight set for every row, adapters
/// applied per span.
pub fn single_stream_block<S: Scalar>(
    sess: &mut Session<'_, S>,
    index: usize,
    streams: &mut [Var],
    ctx: &BlockContext<S>,
) -> Result<()> {
    let block = format!("single{index}");
    let mods = vec![modulation(sess, &block, ctx.cond_vec, 6)?];
    let spec: Vec<Stream<'_>> = (0..streams.len())
        .map(|_| Stream { weights: &block, modulation: 0 })
        .collect();
    let adapted = sess.model.config.lora_single_blocks;
    transformer_block(sess, &block, streams, &spec, &mods, ctx, adapted)
}

/// Token embeddings `(T, X, [C_i])` for one sample.
pub fn embed_branches<S: Scalar>(
    sess: &mut Session<'_, S>,
    x_t: &Tensor<S>,
    caption: &[usize],
    conditions: &[Condition<'_, S>],
) -> Result<(Var, Var, Vec<Var>)> {
    let cfg = &sess.model.config;
    let expected = cfg.image_shape();
    if x_t.shape() != expected {
        return Err(dim_err!("sample shape {:?}, expected {:?}", x_t.shape(), expected));
    }
    if caption.is_empty() || caption.len() > cfg.max_text_len {
        return Err(Error::Contract(format!(
            "caption of {} tokens (allowed 1..={})",
            caption.len(),
            cfg.max_text_len
        )));
    }
    for c in conditions {
        if c.image.shape() != expected {
            return Err(dim_err!(
                "{} condition shape {:?}, expected {:?}",
                c.kind,
                c.image.shape(),
                expected
            ));
        }
    }
    let patch = cfg.patch_size;
    let table = sess.base("text/table")?;
    let t = sess.graph.embedding(table, caption)?;
    let xp = sess.graph.input(patchify(x_t, patch)?);
    let x = linear(sess, xp, "patch")?;
    let mut cs = Vec::with_capacity(conditions.len());
    for c in conditions {
        let cp = sess.graph.input(patchify(c.image, patch)?);
        cs.push(linear(sess, cp, "patch")?);
    }
    Ok((t, x, cs))
}

/// Velocity prediction in patch layout `[tokens, patch_dim]` on the
/// session's graph.
pub fn forward_patches<S: Scalar>(
    sess: &mut Session<'_, S>,
    x_t: &Tensor<S>,
    t: f64,
    caption: &[usize],
    conditions: &[Condition<'_, S>],
    opts: ForwardOptions,
) -> Result<Var> {
    let model = sess.model;
    let cfg = &model.config;

    let mut adapters = vec![None, None];
    if opts.text_lora {
        if model.adapters.text.is_none() {
            return Err(Error::Config("Text-LoRA requested but none is loaded".into()));
        }
        adapters[0] = Some(AdapterKind::Text);
    }
    if opts.denoising {
        if model.adapters.denoising.is_none() {
            return Err(Error::Config("Denoising-LoRA requested but none is loaded".into()));
        }
        adapters[1] = Some(AdapterKind::Denoising);
    }
    for c in conditions {
        switch_select(c.kind, &model.adapters)?;
        adapters.push(Some(AdapterKind::Condition(c.kind)));
    }

    let temb = timestep_embed(sess, t)?;
    let cond_vec = sess.graph.silu(temb)?;
    let (t_tok, x_tok, c_tok) = embed_branches(sess, x_t, caption, conditions)?;

    let n = cfg.tokens_per_image();
    let layout = BranchLayout::new(caption.len(), n, vec![n; conditions.len()])?;
    let kinds: Vec<ConditionType> = conditions.iter().map(|c| c.kind).collect();
    let positions = assign_positions(cfg, &layout, &kinds);
    let ctx = BlockContext {
        rope: Arc::new(rope_table(cfg, &positions)),
        layout,
        cond_vec,
        adapters,
        trace: opts.trace,
    };

    let mut streams = vec![t_tok, x_tok];
    streams.extend(c_tok);
    for i in 0..cfg.num_dual_blocks {
        dual_stream_block(sess, i, &mut streams, &ctx)?;
    }
    for j in 0..cfg.num_single_blocks {
        single_stream_block(sess, j, &mut streams, &ctx)?;
    }

    let m = modulation(sess, "final", cond_vec, 2)?;
    let h = modulate(sess, streams[1], m[0], m[1])?;
    linear(sess, h, "final/head")
}

/// Inference-only velocity `v(x_t, t)` in image layout.
pub fn model_forward<S: Scalar>(
    model: &Model<S>,
    x_t: &Tensor<S>,
    t: f64,
    caption: &[usize],
    conditions: &[Condition<'_, S>],
    opts: ForwardOptions,
) -> Result<VelocityOutput<S>> {
    let mut sess = Session::inference(model);
    let out = forward_patches(&mut sess, x_t, t, caption, conditions, opts)?;
    let [h, w, c] = model.config.image_shape();
    let velocity = unpatchify(sess.graph.value(out), model.config.patch_size, h, w, c)?;
    Ok(VelocityOutput { velocity })
}
