//! Unified-sequence layout and scoped conditional attention.
//!
//! The joint sequence is `[T; X; C_1; ...; C_N]`. Text and denoising
//! queries attend over the whole sequence; each condition's queries only see
//! `[T; X; C_i]`. [`cmmdit_attention`] realizes this as `1 + N` independent
//! dense attentions, so no `total x total` score matrix is ever formed when
//! conditions are present. [`mmdit_attention_masked`] is the dense masked
//! reference the block form is checked against.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Sentinel added to disallowed scores before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

/// Token counts of the branches of a unified sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchLayout {
    len_t: usize,
    len_x: usize,
    len_c: Vec<usize>,
}

impl BranchLayout {
    pub fn new(len_t: usize, len_x: usize, len_c: Vec<usize>) -> Result<Self> {
        if len_t == 0 || len_x == 0 || len_c.contains(&0) {
            return Err(Error::Contract(format!(
                "branch lengths must be >= 1, got T={len_t} X={len_x} C={len_c:?}"
            )));
        }
        Ok(BranchLayout { len_t, len_x, len_c })
    }

    /// Sequence lengths and block count behind the published AttnOps ablation
    /// (512 text tokens, 1024 image tokens, two 1024-token conditions, 57
    /// transformer blocks). Recovered by integer search; the published
    /// values are the only constraint.
    pub fn attn_ops_preset() -> (BranchLayout, usize) {
        (
            BranchLayout {
                len_t: 512,
                len_x: 1024,
                len_c: vec![1024, 1024],
            },
            57,
        )
    }

    pub fn len_t(&self) -> usize {
        self.len_t
    }

    pub fn len_x(&self) -> usize {
        self.len_x
    }

    pub fn len_c(&self) -> &[usize] {
        &self.len_c
    }

    pub fn num_conditions(&self) -> usize {
        self.len_c.len()
    }

    /// `len_T + len_X`: the rows with a global receptive field.
    pub fn joint_len(&self) -> usize {
        self.len_t + self.len_x
    }

    pub fn total(&self) -> usize {
        self.joint_len() + self.len_c.iter().sum::<usize>()
    }

    pub fn text_span(&self) -> Range<usize> {
        0..self.len_t
    }

    pub fn x_span(&self) -> Range<usize> {
        self.len_t..self.joint_len()
    }

    pub fn cond_span(&self, i: usize) -> Range<usize> {
        let start = self.joint_len() + self.len_c[..i].iter().sum::<usize>();
        start..start + self.len_c[i]
    }

    /// Start offset of every branch in sequence order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = vec![0, self.len_t];
        out.extend((0..self.num_conditions()).map(|i| self.cond_span(i).start));
        out
    }

    /// Branch index for a sequence position: `None` for T/X rows, `Some(i)`
    /// for rows of condition `i`.
    pub fn condition_of(&self, pos: usize) -> Option<usize> {
        (0..self.num_conditions()).find(|&i| self.cond_span(i).contains(&pos))
    }

    /// The layout with condition `i` alone (the single-conditional setting).
    pub fn single(&self, i: usize) -> BranchLayout {
        BranchLayout {
            len_t: self.len_t,
            len_x: self.len_x,
            len_c: vec![self.len_c[i]],
        }
    }
}

/// Concatenates branch token blocks (`[tokens, width]` each) into the
/// unified sequence `[T; X; C_1; ...; C_N]`.
pub fn assemble_sequence<S: Scalar>(
    t_tokens: &Tensor<S>,
    x_tokens: &Tensor<S>,
    cond_tokens: &[Tensor<S>],
) -> Result<(Tensor<S>, BranchLayout)> {
    let mut g = Graph::inference();
    let t = g.input(t_tokens.clone());
    let x = g.input(x_tokens.clone());
    let cs: Vec<Var> = cond_tokens.iter().map(|c| g.input(c.clone())).collect();
    let (s, layout) = assemble_on(&mut g, t, x, &cs)?;
    Ok((g.value(s).clone(), layout))
}

/// Graph form of [`assemble_sequence`].
pub fn assemble_on<S: Scalar>(g: &mut Graph<S>, t: Var, x: Var, conds: &[Var]) -> Result<(Var, BranchLayout)> {
    let width = |g: &Graph<S>, v: Var| -> Result<(usize, usize)> {
        match g.shape(v) {
            [n, d] => Ok((*n, *d)),
            s => Err(dim_err!("branch tokens must be [tokens, width], got {s:?}")),
        }
    };
    let (lt, d) = width(g, t)?;
    let (lx, dx) = width(g, x)?;
    if dx != d {
        return Err(dim_err!("X width {dx} differs from T width {d}"));
    }
    let mut len_c = Vec::with_capacity(conds.len());
    for (i, &c) in conds.iter().enumerate() {
        let (lc, dc) = width(g, c)?;
        if dc != d {
            return Err(dim_err!("condition {i} width {dc} differs from T width {d}"));
        }
        len_c.push(lc);
    }
    let mut parts = vec![t, x];
    parts.extend_from_slice(conds);
    let s = g.cat(&parts, 0)?;
    Ok((s, BranchLayout::new(lt, lx, len_c)?))
}

/// Boolean `total x total` allowed-key matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeMask {
    size: usize,
    allowed: Vec<bool>,
}

impl ScopeMask {
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(dim_err!("mask of {} entries is not {size}x{size}", allowed.len()));
        }
        Ok(ScopeMask { size, allowed })
    }

    pub fn all(size: usize) -> Self {
        ScopeMask {
            size,
            allowed: vec![true; size * size],
        }
    }

    pub fn diagonal(size: usize) -> Self {
        ScopeMask {
            size,
            allowed: (0..size * size).map(|i| i / size == i % size).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.size..(row + 1) * self.size]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|r| (0..r).all(|c| self.get(r, c) == self.get(c, r)))
    }
}

/// Per-row key scopes: T and X rows see all of S, rows of condition `i`
/// see `T ∪ X ∪ C_i`.
pub fn scope_mask(layout: &BranchLayout) -> ScopeMask {
    let n = layout.total();
    let joint = layout.joint_len();
    let mut allowed = vec![false; n * n];
    for r in 0..n {
        let row = &mut allowed[r * n..(r + 1) * n];
        match layout.condition_of(r) {
            None => row.fill(true),
            Some(i) => {
                row[..joint].fill(true);
                row[layout.cond_span(i)].fill(true);
            }
        }
    }
    ScopeMask { size: n, allowed }
}

/// Query/key/value tensors `[heads, total, head_dim]` in layout order.
#[derive(Clone, Debug)]
pub struct AttentionInputs<S> {
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Scalar> AttentionInputs<S> {
    pub fn new(q: Tensor<S>, k: Tensor<S>, v: Tensor<S>) -> Result<Self> {
        if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(dim_err!(
                "q/k/v must share a [heads, tokens, head_dim] shape: {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ));
        }
        Ok(AttentionInputs { q, k, v })
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }
}

/// Graph nodes produced by one scoped attention call.
#[derive(Clone, Debug)]
pub struct ScopedAttention {
    /// `[heads, total, head_dim]` in layout order.
    pub output: Var,
    /// The attention node for the T ∪ X queries (keys: all of S).
    pub joint: Var,
    /// One attention node per condition (keys: `[T; X; C_i]`).
    pub per_condition: Vec<Var>,
}

fn check_qkv<S: Scalar>(g: &Graph<S>, q: Var, k: Var, v: Var, total: usize) -> Result<usize> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 3 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(dim_err!(
            "q/k/v shapes {:?} {:?} {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        ));
    }
    if shape[1] != total {
        return Err(dim_err!("sequence of {} tokens for a layout of {total}", shape[1]));
    }
    Ok(shape[2])
}

/// Scoped conditional attention as `1 + N` block attentions, scores scaled
/// by `1 / sqrt(head_dim)`.
pub fn cmmdit_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    layout: &BranchLayout,
) -> Result<ScopedAttention> {
    let head_dim = check_qkv(g, q, k, v, layout.total())?;
    let scale = S::lit(1.0 / (head_dim as f64).sqrt());
    let joint_len = layout.joint_len();

    if layout.num_conditions() == 0 {
        let out = g.attention(q, k, v, scale)?;
        return Ok(ScopedAttention {
            output: out,
            joint: out,
            per_condition: Vec::new(),
        });
    }

    let q_joint = g.narrow(q, 1, 0, joint_len)?;
    let joint = g.attention(q_joint, k, v, scale)?;

    let k_joint = g.narrow(k, 1, 0, joint_len)?;
    let v_joint = g.narrow(v, 1, 0, joint_len)?;
    let mut parts = vec![joint];
    let mut per_condition = Vec::with_capacity(layout.num_conditions());
    for i in 0..layout.num_conditions() {
        let span = layout.cond_span(i);
        let q_i = g.narrow(q, 1, span.start, span.len())?;
        let k_c = g.narrow(k, 1, span.start, span.len())?;
        let v_c = g.narrow(v, 1, span.start, span.len())?;
        let k_i = g.cat(&[k_joint, k_c], 1)?;
        let v_i = g.cat(&[v_joint, v_c], 1)?;
        let out_i = g.attention(q_i, k_i, v_i, scale)?;
        per_condition.push(out_i);
        parts.push(out_i);
    }
    let output = g.cat(&parts, 1)?;
    Ok(ScopedAttention {
        output,
        joint,
        per_condition,
    })
}

/// Dense attention over the whole sequence with disallowed scores pushed to
/// [`MASK_SENTINEL`] before the softmax. Built from matmul / softmax
/// primitives only, independently of the fused kernel used by
/// [`cmmdit_attention`].
pub fn mmdit_attention_masked_on<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: &ScopeMask,
) -> Result<Var> {
    let head_dim = check_qkv(g, q, k, v, mask.size())?;
    let heads = g.shape(q)[0];
    let n = mask.size();
    if let Some(r) = (0..n).find(|&r| !mask.row(r).iter().any(|&a| a)) {
        return Err(Error::Contract(format!("mask row {r} allows no keys")));
    }
    let bias = Tensor::from_fn(&[n, n], |i| {
        if mask.allowed[i] {
            S::zero()
        } else {
            S::lit(MASK_SENTINEL)
        }
    });
    let bias = g.input(bias);
    let scale = S::lit(1.0 / (head_dim as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 0, h, 1)?;
        let qh = g.reshape(qh, &[n, head_dim])?;
        let kh = g.narrow(k, 0, h, 1)?;
        let kh = g.reshape(kh, &[n, head_dim])?;
        let vh = g.narrow(v, 0, h, 1)?;
        let vh = g.reshape(vh, &[n, head_dim])?;
        // q k^T via the bias-free linear primitive.
        let scores = g.linear(qh, kh, None)?;
        let scores = g.add(scores, bias)?;
        let p = g.softmax_scaled(scores, scale)?;
        let o = g.matmul(p, vh)?;
        outs.push(g.reshape(o, &[1, n, head_dim])?);
    }
    g.cat(&outs, 0)
}

pub fn cmmdit_attention_tensors<S: Scalar>(inputs: &AttentionInputs<S>, layout: &BranchLayout) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let (q, k, v) = (
        g.input(inputs.q.clone()),
        g.input(inputs.k.clone()),
        g.input(inputs.v.clone()),
    );
    let out = cmmdit_attention(&mut g, q, k, v, layout)?;
    Ok(g.value(out.output).clone())
}

pub fn mmdit_attention_masked<S: Scalar>(inputs: &AttentionInputs<S>, mask: &ScopeMask) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let (q, k, v) = (
        g.input(inputs.q.clone()),
        g.input(inputs.k.clone()),
        g.input(inputs.v.clone()),
    );
    let out = mmdit_attention_masked_on(&mut g, q, k, v, mask)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Mmdit,
    Cmmdit,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmdit" => Ok(AttentionMode::Mmdit),
            "cmmdit" => Ok(AttentionMode::Cmmdit),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

/// Query-key score computations over `num_blocks` transformer blocks
/// (heads not counted).
pub fn count_attn_ops(layout: &BranchLayout, num_blocks: u64, mode: AttentionMode) -> u64 {
    let total = layout.total() as u64;
    let per_block = match mode {
        AttentionMode::Mmdit => total * total,
        AttentionMode::Cmmdit => {
            let joint = layout.joint_len() as u64;
            joint * total
                + layout
                    .len_c()
                    .iter()
                    .map(|&c| c as u64 * (joint + c as u64))
                    .sum::<u64>()
        }
    };
    per_block * num_blocks
}

/// `732168192` -> `"732.17M"`.
pub fn format_millions(count: u64) -> String {
    format!("{:.2}M", count as f64 / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(layout: &BranchLayout, heads: usize, d: usize, seed: u64) -> AttentionInputs<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [heads, layout.total(), d];
        AttentionInputs::new(
            Tensor::randn(&shape, 1.0, &mut rng),
            Tensor::randn(&shape, 1.0, &mut rng),
            Tensor::randn(&shape, 1.0, &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn assemble_orders_branches() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let x = Tensor::<f32>::full(&[3, 3], 10.0);
        let (s, layout) = assemble_sequence(&t, &x, &[]).unwrap();
        assert_eq!(s.shape(), &[5, 3]);
        assert_eq!(layout, BranchLayout::new(2, 3, vec![]).unwrap());

        let c1 = Tensor::<f32>::full(&[4, 3], 20.0);
        let c2 = Tensor::<f32>::full(&[5, 3], 30.0);
        let (s, layout) = assemble_sequence(&t, &x, &[c1, c2]).unwrap();
        assert_eq!(s.shape(), &[14, 3]);
        assert_eq!(layout.offsets(), vec![0, 2, 5, 9]);
        assert_eq!(s.at(5, 0), 20.0);
        assert_eq!(s.at(9, 0), 30.0);

        let bad = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(
            assemble_sequence(&t, &x, &[bad]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scope_mask_small_layout() {
        let layout = BranchLayout::new(1, 1, vec![1, 1]).unwrap();
        let m = scope_mask(&layout);
        let rows: Vec<Vec<bool>> = (0..4).map(|r| m.row(r).to_vec()).collect();
        assert_eq!(rows[0], [true, true, true, true]);
        assert_eq!(rows[1], [true, true, true, true]);
        assert_eq!(rows[2], [true, true, true, false]);
        assert_eq!(rows[3], [true, true, false, true]);
        // Receptive fields differ by branch (X sees C2, C1 does not), yet the
        // allowed-pair relation itself is symmetric: C_i and C_j exclude each
        // other in both directions.
        assert_ne!(rows[1], rows[2]);
        assert!(m.is_symmetric());
    }

    #[test]
    fn scope_mask_without_conditions_is_full() {
        let layout = BranchLayout::new(3, 4, vec![]).unwrap();
        assert_eq!(scope_mask(&layout), ScopeMask::all(7));
    }

    #[test]
    fn zero_length_branch_rejected() {
        assert!(BranchLayout::new(0, 2, vec![]).is_err());
        assert!(BranchLayout::new(1, 2, vec![3, 0]).is_err());
    }

    #[test]
    fn masked_oracle_special_masks() {
        let layout = BranchLayout::new(2, 3, vec![]).unwrap();
        let inp = random_inputs(&layout, 2, 4, 5);
        let full = mmdit_attention_masked(&inp, &ScopeMask::all(5)).unwrap();
        let plain = cmmdit_attention_tensors(&inp, &layout).unwrap();
        assert!(full.max_abs_diff(&plain) < 1e-6);

        let diag = mmdit_attention_masked(&inp, &ScopeMask::diagonal(5)).unwrap();
        assert!(diag.max_abs_diff(&inp.v) < 1e-6);

        let mut allowed = vec![true; 25];
        allowed[5..10].fill(false);
        let hole = ScopeMask::new(5, allowed).unwrap();
        assert!(matches!(
            mmdit_attention_masked(&inp, &hole),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn block_form_matches_masked_oracle() {
        let layout = BranchLayout::new(4, 8, vec![6, 6]).unwrap();
        let inp = random_inputs(&layout, 2, 8, 1);
        let fast = cmmdit_attention_tensors(&inp, &layout).unwrap();
        let oracle = mmdit_attention_masked(&inp, &scope_mask(&layout)).unwrap();
        assert!(fast.max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn block_form_matches_oracle_in_f64() {
        let layout = BranchLayout::new(3, 5, vec![2, 4, 3]).unwrap();
        let inp = random_inputs(&layout, 3, 4, 9);
        let inp = AttentionInputs::new(inp.q.cast::<f64>(), inp.k.cast(), inp.v.cast()).unwrap();
        let fast = cmmdit_attention_tensors(&inp, &layout).unwrap();
        let oracle = mmdit_attention_masked(&inp, &scope_mask(&layout)).unwrap();
        assert!(fast.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn attn_ops_preset_matches_published_counts() {
        let (layout, blocks) = BranchLayout::attn_ops_preset();
        let mmdit = count_attn_ops(&layout, blocks as u64, AttentionMode::Mmdit);
        let cmmdit = count_attn_ops(&layout, blocks as u64, AttentionMode::Cmmdit);
        assert_eq!(mmdit, 732_168_192);
        assert_eq!(cmmdit, 612_630_528);
        assert_eq!(format_millions(mmdit), "732.17M");
        assert_eq!(format_millions(cmmdit), "612.63M");
    }

    #[test]
    fn attn_ops_without_conditions_coincide() {
        let layout = BranchLayout::new(7, 11, vec![]).unwrap();
        let a = count_attn_ops(&layout, 3, AttentionMode::Mmdit);
        let b = count_attn_ops(&layout, 3, AttentionMode::Cmmdit);
        assert_eq!(a, b);
        assert_eq!(a, 18 * 18 * 3);
    }

    #[test]
    fn dense_mode_is_quadratic_scoped_is_affine() {
        let (t, x, c, blocks) = (5u64, 9u64, 7u64, 2u64);
        let counts = |mode| -> Vec<i128> {
            (0..=8)
                .map(|n| {
                    let layout = BranchLayout::new(t as usize, x as usize, vec![c as usize; n]).unwrap();
                    count_attn_ops(&layout, blocks, mode) as i128
                })
                .collect()
        };
        let diffs = |v: &[i128]| -> Vec<i128> { v.windows(2).map(|w| w[1] - w[0]).collect() };
        let scoped = counts(AttentionMode::Cmmdit);
        let d1 = diffs(&scoped);
        assert!(d1.iter().all(|&d| d == d1[0] && d > 0));
        let dense = counts(AttentionMode::Mmdit);
        let d2 = diffs(&diffs(&dense));
        assert!(d2.iter().all(|&d| d == d2[0] && d > 0));
    }

    proptest! {
        #[test]
        fn scoped_never_exceeds_dense(
            t in 1usize..64, x in 1usize..64,
            cs in proptest::collection::vec(1usize..64, 0..5),
            blocks in 1u64..10,
        ) {
            let layout = BranchLayout::new(t, x, cs.clone()).unwrap();
            let dense = count_attn_ops(&layout, blocks, AttentionMode::Mmdit);
            let scoped = count_attn_ops(&layout, blocks, AttentionMode::Cmmdit);
            prop_assert!(scoped <= dense);
            prop_assert_eq!(scoped == dense, cs.len() <= 1);
        }

        #[test]
        fn oracle_equivalence_random_layouts(
            t in 1usize..5, x in 1usize..7,
            cs in proptest::collection::vec(1usize..6, 0..4),
            seed in 0u64..10_000,
        ) {
            let layout = BranchLayout::new(t, x, cs).unwrap();
            let inp = random_inputs(&layout, 2, 4, seed);
            let fast = cmmdit_attention_tensors(&inp, &layout).unwrap();
            let oracle = mmdit_attention_masked(&inp, &scope_mask(&layout)).unwrap();
            prop_assert!(fast.max_abs_diff(&oracle) < 1e-5);
        }
    }
}
