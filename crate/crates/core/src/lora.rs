//! Low-rank adapters, the per-condition registry and one-hot switching.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{dims2, Graph, Scalar, Tensor, Var};

/// Kind of control signal carried by a conditional branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConditionType {
    Canny,
    Depth,
    Subject,
    MaskFill,
    Style,
}

impl ConditionType {
    pub const ALL: [ConditionType; 5] = [
        ConditionType::Canny,
        ConditionType::Depth,
        ConditionType::Subject,
        ConditionType::MaskFill,
        ConditionType::Style,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditionType::Canny => "CANNY",
            ConditionType::Depth => "DEPTH",
            ConditionType::Subject => "SUBJECT",
            ConditionType::MaskFill => "MASK_FILL",
            ConditionType::Style => "STYLE",
        }
    }

    /// Pixel-aligned with the generated image (edges, depth, masked
    /// background) as opposed to reference-style conditions.
    pub fn is_spatially_aligned(self) -> bool {
        matches!(
            self,
            ConditionType::Canny | ConditionType::Depth | ConditionType::MaskFill
        )
    }
}

impl fmt::Display for ConditionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ConditionType::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown condition type '{s}'")))
    }
}

/// One adapted projection: `A: [rank, in]`, `B: [out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LoraPair<S> {
    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }
}

/// A set of low-rank deltas keyed by target projection (e.g. `dual0/q`).
/// The effective weight delta of each target is `(alpha / rank) * B A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    rank: usize,
    alpha: f64,
    pub frozen: bool,
    targets: BTreeMap<String, LoraPair<S>>,
}

/// Standard deviation of the normal initializer for `A`.
pub const LORA_A_INIT_STD: f64 = 0.02;

impl<S: Scalar> LoraAdapter<S> {
    /// Fresh adapter: `A ~ N(0, 0.02^2)`, `B = 0`, so the delta starts at zero.
    pub fn init<R: Rng + ?Sized>(
        rank: usize,
        alpha: f64,
        targets: &[(String, usize, usize)],
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let targets = targets
            .iter()
            .map(|(name, din, dout)| {
                (
                    name.clone(),
                    LoraPair {
                        a: Tensor::randn(&[rank, *din], LORA_A_INIT_STD, rng),
                        b: Tensor::zeros(&[*dout, rank]),
                    },
                )
            })
            .collect();
        Ok(LoraAdapter {
            rank,
            alpha,
            frozen: false,
            targets,
        })
    }

    pub fn from_parts(rank: usize, alpha: f64, targets: BTreeMap<String, LoraPair<S>>) -> Result<Self> {
        for (name, p) in &targets {
            let (ra, _) = dims2(&p.a)?;
            let (_, rb) = dims2(&p.b)?;
            if ra != rank || rb != rank {
                return Err(dim_err!("adapter target {name}: rank {ra}/{rb}, expected {rank}"));
            }
        }
        Ok(LoraAdapter {
            rank,
            alpha,
            frozen: false,
            targets,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn pair(&self, target: &str) -> Option<&LoraPair<S>> {
        self.targets.get(target)
    }

    pub fn pair_mut(&mut self, target: &str) -> Option<&mut LoraPair<S>> {
        self.targets.get_mut(target)
    }

    pub fn targets(&self) -> impl Iterator<Item = (&String, &LoraPair<S>)> {
        self.targets.iter()
    }

    pub fn targets_mut(&mut self) -> impl Iterator<Item = (&String, &mut LoraPair<S>)> {
        self.targets.iter_mut()
    }

    pub fn num_params(&self) -> usize {
        self.targets.values().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    /// `(alpha / rank) * B A` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor<S>> {
        let p = self
            .pair(target)
            .ok_or_else(|| Error::Config(format!("adapter has no target '{target}'")))?;
        let mut d = p.b.matmul(&p.a)?;
        let s = S::lit(self.scale());
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(d)
    }
}

/// Which registry entry a branch's projections were adapted with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterKind {
    Condition(ConditionType),
    Denoising,
    Text,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Condition(c) => write!(f, "cond_lora/{c}"),
            AdapterKind::Denoising => f.write_str("denoise_lora"),
            AdapterKind::Text => f.write_str("text_lora"),
        }
    }
}

/// Condition-LoRAs keyed by type plus the optional Denoising- and Text-LoRA.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoraRegistry<S> {
    conditions: BTreeMap<ConditionType, LoraAdapter<S>>,
    pub denoising: Option<LoraAdapter<S>>,
    pub text: Option<LoraAdapter<S>>,
}

impl<S: Scalar> LoraRegistry<S> {
    pub fn new() -> Self {
        LoraRegistry {
            conditions: BTreeMap::new(),
            denoising: None,
            text: None,
        }
    }

    /// Registers the adapter for `kind`; a type may only be registered once.
    pub fn insert(&mut self, kind: ConditionType, adapter: LoraAdapter<S>) -> Result<()> {
        if self.conditions.contains_key(&kind) {
            return Err(Error::Config(format!("a {kind} adapter is already registered")));
        }
        self.conditions.insert(kind, adapter);
        Ok(())
    }

    pub fn remove(&mut self, kind: ConditionType) -> Option<LoraAdapter<S>> {
        self.conditions.remove(&kind)
    }

    pub fn contains(&self, kind: ConditionType) -> bool {
        self.conditions.contains_key(&kind)
    }

    pub fn condition_types(&self) -> Vec<ConditionType> {
        self.conditions.keys().copied().collect()
    }

    pub fn condition(&self, kind: ConditionType) -> Option<&LoraAdapter<S>> {
        self.conditions.get(&kind)
    }

    pub fn condition_mut(&mut self, kind: ConditionType) -> Option<&mut LoraAdapter<S>> {
        self.conditions.get_mut(&kind)
    }

    pub fn conditions(&self) -> impl Iterator<Item = (ConditionType, &LoraAdapter<S>)> {
        self.conditions.iter().map(|(k, v)| (*k, v))
    }

    pub fn get(&self, kind: AdapterKind) -> Option<&LoraAdapter<S>> {
        match kind {
            AdapterKind::Condition(c) => self.conditions.get(&c),
            AdapterKind::Denoising => self.denoising.as_ref(),
            AdapterKind::Text => self.text.as_ref(),
        }
    }

    pub fn get_mut(&mut self, kind: AdapterKind) -> Option<&mut LoraAdapter<S>> {
        match kind {
            AdapterKind::Condition(c) => self.conditions.get_mut(&c),
            AdapterKind::Denoising => self.denoising.as_mut(),
            AdapterKind::Text => self.text.as_mut(),
        }
    }

    /// Freeze flags for every Condition-LoRA.
    pub fn freeze_conditions(&mut self, frozen: bool) {
        self.conditions.values_mut().for_each(|a| a.frozen = frozen);
    }

    /// One-hot gate over the registered condition types (in type order).
    pub fn gate(&self, kind: ConditionType) -> Result<Vec<u8>> {
        if !self.contains(kind) {
            return Err(missing(kind, self));
        }
        Ok(self.conditions.keys().map(|k| u8::from(*k == kind)).collect())
    }

    pub fn num_params(&self) -> usize {
        self.conditions.values().map(LoraAdapter::num_params).sum::<usize>()
            + self.denoising.as_ref().map_or(0, LoraAdapter::num_params)
            + self.text.as_ref().map_or(0, LoraAdapter::num_params)
    }
}

fn missing<S: Scalar>(kind: ConditionType, registry: &LoraRegistry<S>) -> Error {
    let have: Vec<_> = registry.condition_types().iter().map(|c| c.name()).collect();
    Error::Config(format!(
        "no Condition-LoRA registered for {kind} (registered: [{}])",
        have.join(", ")
    ))
}

/// LoRA Switching: the adapter registered for `kind`. Branches of the same
/// type receive the same adapter instance.
pub fn switch_select<S: Scalar>(kind: ConditionType, registry: &LoraRegistry<S>) -> Result<&LoraAdapter<S>> {
    registry.condition(kind).ok_or_else(|| missing(kind, registry))
}

/// Graph handles for one adapted projection.
#[derive(Clone, Copy, Debug)]
pub struct BoundLora<S> {
    pub a: Var,
    pub b: Var,
    pub scale: S,
}

/// `x W^T + b + (alpha / rank) * x A^T B^T`, or the plain linear map when no
/// adapter is given.
pub fn linear_with_lora<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    lora: Option<BoundLora<S>>,
) -> Result<Var> {
    let base = g.linear(x, w, bias)?;
    let Some(l) = lora else { return Ok(base) };
    let (rank, din) = dims2(g.value(l.a))?;
    let (dout, rb) = dims2(g.value(l.b))?;
    let (wout, win) = dims2(g.value(w))?;
    if din != win || dout != wout || rb != rank {
        return Err(dim_err!(
            "adapter A[{rank}x{din}] B[{dout}x{rb}] against weight [{wout}x{win}]"
        ));
    }
    let low = g.linear(x, l.a, None)?;
    let up = g.linear(low, l.b, None)?;
    let up = g.scale(up, l.scale)?;
    g.add(base, up)
}

/// `W + (alpha / rank) * B A`.
pub fn merge_weights<S: Scalar>(w: &Tensor<S>, adapter: &LoraAdapter<S>, target: &str) -> Result<Tensor<S>> {
    let delta = adapter.delta(target)?;
    if delta.shape() != w.shape() {
        return Err(dim_err!(
            "adapter delta {:?} does not match weight {:?}",
            delta.shape(),
            w.shape()
        ));
    }
    let mut out = w.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += *d;
    }
    Ok(out)
}
