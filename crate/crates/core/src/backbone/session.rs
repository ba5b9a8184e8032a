use std::collections::HashMap;

use crate::attention::BranchLayout;
use crate::error::{Error, Result};
use crate::lora::{AdapterKind, BoundLora};
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::{adapter_prefix, Model};

/// Which parameters receive gradients in a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapter(AdapterKind),
    /// Base and every non-frozen adapter (used by gradient checks).
    Everything,
}

/// One adapted projection applied to one branch's rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterUse {
    pub block: String,
    pub proj: &'static str,
    /// Index into `[T, X, C_1, ..]`.
    pub branch: usize,
    pub adapter: AdapterKind,
}

/// Attention node of one block whose saved probabilities cover every
/// X query row over all keys of the sequence.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub block: String,
    pub layout: BranchLayout,
    /// Attention node whose query rows start at the first text token.
    pub node: Var,
}

/// Binds model tensors onto a graph once per forward/backward pass and
/// records instrumentation.
pub struct Session<'m, S: Scalar> {
    pub graph: Graph<S>,
    pub model: &'m Model<S>,
    trainable: Trainable,
    bound: HashMap<String, Var>,
    pub adapter_log: Vec<AdapterUse>,
    pub trace: Vec<AttnRecord>,
}

impl<'m, S: Scalar> Session<'m, S> {
    /// A session with gradient tracking for the `trainable` selection.
    pub fn new(model: &'m Model<S>, trainable: Trainable) -> Self {
        let graph = if trainable == Trainable::Nothing {
            Graph::inference()
        } else {
            Graph::new()
        };
        Session {
            graph,
            model,
            trainable,
            bound: HashMap::new(),
            adapter_log: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn inference(model: &'m Model<S>) -> Self {
        Self::new(model, Trainable::Nothing)
    }

    fn bind(&mut self, name: String, trainable: bool, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.bound.get(&name) {
            return v;
        }
        let v = if trainable {
            self.graph.param(value.clone())
        } else {
            self.graph.input(value.clone())
        };
        self.bound.insert(name, v);
        v
    }

    /// Base tensor by its name without the `base/` prefix.
    pub fn base(&mut self, name: &str) -> Result<Var> {
        let model = self.model;
        let tensor = model
            .base
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no base parameter '{name}'")))?;
        let train = matches!(self.trainable, Trainable::Base | Trainable::Everything);
        Ok(self.bind(format!("base/{name}"), train, tensor))
    }

    /// The adapter pair for `target`, or `None` when the adapter does not
    /// cover it. Missing adapters are the caller's concern.
    pub fn lora(&mut self, kind: AdapterKind, target: &str) -> Option<BoundLora<S>> {
        let model = self.model;
        let adapter = model.adapters.get(kind)?;
        let pair = adapter.pair(target)?;
        let train = !adapter.frozen
            && match self.trainable {
                Trainable::Adapter(k) => k == kind,
                Trainable::Everything => true,
                _ => false,
            };
        let prefix = adapter_prefix(kind);
        let a = self.bind(format!("{prefix}/{target}/A"), train, &pair.a);
        let b = self.bind(format!("{prefix}/{target}/B"), train, &pair.b);
        Some(BoundLora {
            a,
            b,
            scale: S::lit(adapter.scale()),
        })
    }

    /// Gradients of every bound, tracked parameter, keyed by checkpoint name.
    pub fn gradients(&self) -> Vec<(String, Vec<S>)> {
        let mut out: Vec<(String, Vec<S>)> = self
            .bound
            .iter()
            .filter(|(_, &v)| self.graph.is_tracked(v))
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); self.graph.value(v).numel()]);
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Graph handle of a bound parameter.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}
