//! Rectified-flow objective, staged adapter training and the Euler sampler.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_patches, model_forward, patchify, Condition, ForwardOptions, Model, Session, Trainable};
use crate::error::{dim_err, Error, Result};
use crate::lora::{AdapterKind, ConditionType};
use crate::tensor::{FlushDenormals, Scalar, Tensor, Var};

/// One training record in model space (pixels mapped to `[-1, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Example<S> {
    pub target: Tensor<S>,
    pub caption: Vec<usize>,
    pub conditions: BTreeMap<ConditionType, Tensor<S>>,
}

/// A noised training pair for one sample: `x_t` is derived from these.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<S> {
    pub x0: Tensor<S>,
    pub x1: Tensor<S>,
    pub t: f64,
    pub caption: Vec<usize>,
    pub conditions: Vec<(ConditionType, Tensor<S>)>,
}

pub type FlowBatch<S> = Vec<FlowSample<S>>;

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Contract(format!("interpolation time {t} outside [0, 1]")))
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    check_t(t)?;
    if x0.shape() != x1.shape() {
        return Err(dim_err!("interpolate {:?} with {:?}", x0.shape(), x1.shape()));
    }
    let (a, b) = (S::lit(1.0 - t), S::lit(t));
    let data = x0.data().iter().zip(x1.data()).map(|(&p, &q)| a * p + b * q).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Mean over the batch of the per-sample mean squared error between the
/// predicted velocity and `x1 - x0`, recorded on the session's graph.
pub fn rf_loss<S: Scalar>(sess: &mut Session<'_, S>, batch: &[FlowSample<S>], opts: ForwardOptions) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("rf_loss on an empty batch".into()));
    }
    let patch = sess.model.config.patch_size;
    let mut per_sample = Vec::with_capacity(batch.len());
    for s in batch {
        let x_t = interpolate(&s.x0, &s.x1, s.t)?;
        let mut target = s.x1.clone();
        for (v, &z) in target.data_mut().iter_mut().zip(s.x0.data()) {
            *v -= z;
        }
        let conds: Vec<Condition<'_, S>> = s
            .conditions
            .iter()
            .map(|(kind, image)| Condition { kind: *kind, image })
            .collect();
        let pred = forward_patches(sess, &x_t, s.t, &s.caption, &conds, opts)?;
        let tv = sess.graph.input(patchify(&target, patch)?);
        let diff = sess.graph.sub(pred, tv)?;
        let sq = sess.graph.mul(diff, diff)?;
        per_sample.push(sess.graph.mean(sq)?);
    }
    let all = sess.graph.cat(&per_sample, 0)?;
    let loss = sess.graph.mean(all)?;
    if !sess.graph.value(loss).item().is_finite() {
        return Err(Error::Numeric("rf_loss is not finite".into()));
    }
    Ok(loss)
}

/// The per-sample objective for a given prediction: mean of
/// `(pred - (x1 - x0))^2` over all elements, in image layout. Differences
/// are taken in `S` like the training loss; only the sum is widened.
pub fn rf_objective<S: Scalar>(pred: &Tensor<S>, x0: &Tensor<S>, x1: &Tensor<S>) -> Result<f64> {
    if pred.shape() != x0.shape() || x0.shape() != x1.shape() {
        return Err(dim_err!("rf_objective over {:?}, {:?}, {:?}", pred.shape(), x0.shape(), x1.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(x0.data().iter().zip(x1.data()))
        .map(|(&p, (&a, &b))| (p - (b - a)).as_f64().powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Loss value without gradient tracking.
pub fn rf_loss_value<S: Scalar>(model: &Model<S>, batch: &[FlowSample<S>], opts: ForwardOptions) -> Result<f64> {
    let _ftz = FlushDenormals::enable();
    let mut sess = Session::inference(model);
    let l = rf_loss(&mut sess, batch, opts)?;
    Ok(sess.graph.value(l).item().as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    /// Text-to-image pretraining of the base weights (no conditions).
    Base,
    /// One Condition-LoRA on single-condition data.
    ConditionLora(ConditionType),
    /// The Denoising-LoRA on multi-condition data, condition adapters frozen.
    DenoisingLora,
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainStage::Base => f.write_str("base"),
            TrainStage::ConditionLora(k) => write!(f, "condition-lora:{k}"),
            TrainStage::DenoisingLora => f.write_str("denoising-lora"),
        }
    }
}

impl FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "base" => Ok(TrainStage::Base),
            "denoising-lora" => Ok(TrainStage::DenoisingLora),
            other => match other.strip_prefix("condition-lora:") {
                Some(kind) => Ok(TrainStage::ConditionLora(kind.parse()?)),
                None => Err(Error::Config(format!(
                    "unknown stage '{other}' (expected base, condition-lora:<TYPE> or denoising-lora)"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Condition types fed to every sample in the denoising stage.
    pub conditions: Vec<ConditionType>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            log_every: 50,
            conditions: vec![ConditionType::Canny, ConditionType::Depth],
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay: parameters shrink by `lr * wd` per
/// step outside the moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every named parameter from its gradient.
    pub fn update(&mut self, model: &mut Model<S>, grads: &[(String, Vec<S>)]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let eps = S::lit(self.eps);
        let keep = S::lit(1.0 - self.lr * self.weight_decay);
        let step_size = S::lit(self.lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        for (name, grad) in grads {
            let param = model.tensor_mut(name)?;
            let n = param.numel();
            if grad.len() != n {
                return Err(dim_err!("gradient of {name} has {} entries, parameter {n}", grad.len()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= keep;
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Resumable training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub stage: TrainStage,
    pub step: usize,
    pub optimizer: Adam<S>,
    /// `(step, loss)` for every completed step.
    pub curve: Vec<(usize, f64)>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(stage: TrainStage, plan: &TrainPlan) -> Self {
        TrainState {
            stage,
            step: 0,
            optimizer: Adam::new(plan.learning_rate, plan.weight_decay),
            curve: Vec::new(),
        }
    }
}

/// Seed for the randomness of training step `step`, so a resumed run draws
/// the same batches and noise as an uninterrupted one.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stage_conditions(stage: TrainStage, plan: &TrainPlan) -> Vec<ConditionType> {
    match stage {
        TrainStage::Base => Vec::new(),
        TrainStage::ConditionLora(k) => vec![k],
        TrainStage::DenoisingLora => plan.conditions.clone(),
    }
}

/// Checks and applies the adapter setup a stage requires: the trained
/// adapter must exist, and the denoising stage freezes every
/// Condition-LoRA.
pub fn prepare_stage<S: Scalar>(model: &mut Model<S>, stage: TrainStage, plan: &TrainPlan) -> Result<Trainable> {
    match stage {
        TrainStage::Base => Ok(Trainable::Base),
        TrainStage::ConditionLora(kind) => {
            let adapter = model
                .adapters
                .condition_mut(kind)
                .ok_or_else(|| Error::Config(format!("no {kind} Condition-LoRA to train")))?;
            adapter.frozen = false;
            Ok(Trainable::Adapter(AdapterKind::Condition(kind)))
        }
        TrainStage::DenoisingLora => {
            if plan.conditions.is_empty() {
                return Err(Error::Config("denoising stage needs at least one condition type".into()));
            }
            let missing: Vec<&str> = plan
                .conditions
                .iter()
                .filter(|k| !model.adapters.contains(**k))
                .map(|k| k.name())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "denoising stage requires pretrained Condition-LoRAs for: {}",
                    missing.join(", ")
                )));
            }
            if model.adapters.denoising.is_none() {
                return Err(Error::Config("no Denoising-LoRA to train".into()));
            }
            model.adapters.freeze_conditions(true);
            Ok(Trainable::Adapter(AdapterKind::Denoising))
        }
    }
}

/// Number of scalars a stage updates.
pub fn trainable_param_count<S: Scalar>(model: &Model<S>, trainable: Trainable) -> usize {
    match trainable {
        Trainable::Nothing => 0,
        Trainable::Base => model.base_param_count(),
        Trainable::Adapter(kind) => model.adapters.get(kind).map_or(0, |a| a.num_params()),
        Trainable::Everything => model.base_param_count() + model.adapters.num_params(),
    }
}

/// Draws the batch for `step`: examples uniformly with replacement,
/// `t ~ U[0, 1]`, `x0 ~ N(0, I)`.
pub fn draw_batch<S: Scalar>(
    data: &[Example<S>],
    conditions: &[ConditionType],
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<FlowBatch<S>> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, step));
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ex = &data[rng.random_range(0..data.len())];
        let t: f64 = rng.random_range(0.0..=1.0);
        let x0 = Tensor::randn(ex.target.shape(), 1.0, &mut rng);
        let conds = conditions
            .iter()
            .map(|k| {
                ex.conditions
                    .get(k)
                    .map(|img| (*k, img.clone()))
                    .ok_or_else(|| Error::Config(format!("training example lacks a {k} condition")))
            })
            .collect::<Result<Vec<_>>>()?;
        batch.push(FlowSample {
            x0,
            x1: ex.target.clone(),
            t,
            caption: ex.caption.clone(),
            conditions: conds,
        });
    }
    Ok(batch)
}

/// Runs `plan.steps - state.step` optimizer steps of `stage`, calling
/// `on_log(step, loss)` every `plan.log_every` steps. Only the stage's
/// parameters change.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    stage: TrainStage,
    plan: &TrainPlan,
    data: &[Example<S>],
    state: &mut TrainState<S>,
    mut on_log: impl FnMut(usize, f64),
) -> Result<()> {
    plan.validate()?;
    let _ftz = FlushDenormals::enable();
    if state.stage != stage {
        return Err(Error::Config(format!(
            "cannot resume a {} run as {stage}",
            state.stage
        )));
    }
    let trainable = prepare_stage(model, stage, plan)?;
    let conditions = stage_conditions(stage, plan);
    let opts = ForwardOptions {
        denoising: stage == TrainStage::DenoisingLora,
        ..Default::default()
    };
    while state.step < plan.steps {
        let step = state.step;
        let fail = |e: Error| Error::Numeric(format!("training diverged at step {step}: {e}"));
        let batch = draw_batch(data, &conditions, plan.batch_size, plan.seed, step)?;
        let grads = {
            let mut sess = Session::new(&*model, trainable);
            let loss = rf_loss(&mut sess, &batch, opts).map_err(fail)?;
            let value = sess.graph.value(loss).item().as_f64();
            sess.graph.backward(loss).map_err(fail)?;
            state.curve.push((step, value));
            sess.gradients()
        };
        state.optimizer.update(model, &grads)?;
        state.step += 1;
        if state.step % plan.log_every == 0 || state.step == plan.steps {
            on_log(step, state.curve.last().map_or(f64::NAN, |c| c.1));
        }
    }
    Ok(())
}

/// Mean of the first and last `window` losses of a curve.
pub fn smoothed_ends(curve: &[(usize, f64)], window: usize) -> Option<(f64, f64)> {
    if curve.len() < 2 * window || window == 0 {
        return None;
    }
    let mean = |s: &[(usize, f64)]| s.iter().map(|c| c.1).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..window]), mean(&curve[curve.len() - window..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    TrainingFree,
    TrainingBased,
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMode::TrainingFree => "training-free",
            SampleMode::TrainingBased => "training-based",
        })
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "training-free" => Ok(SampleMode::TrainingFree),
            "training-based" => Ok(SampleMode::TrainingBased),
            other => Err(Error::Config(format!("unknown sampling mode '{other}'"))),
        }
    }
}

/// Model-space value range of pixels.
pub const PIXEL_RANGE: (f64, f64) = (-1.0, 1.0);

/// Forward Euler on the uniform grid `t_k = k / steps`, then a clamp to
/// [`PIXEL_RANGE`].
pub fn euler_integrate<S: Scalar>(
    x0: Tensor<S>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<S>, f64) -> Result<Tensor<S>>,
) -> Result<Tensor<S>> {
    if steps == 0 {
        return Err(Error::Contract("sampler needs at least one step".into()));
    }
    let dt = S::lit(1.0 / steps as f64);
    let mut x = x0;
    for k in 0..steps {
        let v = velocity(&x, k as f64 / steps as f64)?;
        if v.shape() != x.shape() {
            return Err(dim_err!("velocity {:?} for state {:?}", v.shape(), x.shape()));
        }
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    let (lo, hi) = (S::lit(PIXEL_RANGE.0), S::lit(PIXEL_RANGE.1));
    x.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    Ok(x)
}

/// Initial noise of the sampler for `seed`.
pub fn sampler_noise<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generates one image in model space. `TrainingFree` uses base weights
/// plus the switched Condition-LoRAs; `TrainingBased` adds the
/// Denoising-LoRA on X.
pub fn sample_euler<S: Scalar>(
    model: &Model<S>,
    caption: &[usize],
    conditions: &[Condition<'_, S>],
    steps: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<Tensor<S>> {
    let _ftz = FlushDenormals::enable();
    let denoising = mode == SampleMode::TrainingBased;
    if denoising && model.adapters.denoising.is_none() {
        return Err(Error::Config("training-based sampling requires a Denoising-LoRA".into()));
    }
    let opts = ForwardOptions {
        denoising,
        ..Default::default()
    };
    let x0 = sampler_noise(&model.config.image_shape(), seed);
    euler_integrate(x0, steps, |x, t| {
        Ok(model_forward(model, x, t, caption, conditions, opts)?.velocity)
    })
}

/// Parameter-wise difference between two models: names whose bytes differ.
pub fn changed_parameters<S: Scalar>(before: &Model<S>, after: &Model<S>) -> Vec<String> {
    let old: HashMap<String, &Tensor<S>> = before.named_tensors().into_iter().collect();
    after
        .named_tensors()
        .into_iter()
        .filter(|(name, t)| old.get(name).is_none_or(|o| o.data() != t.data()))
        .map(|(name, _)| name)
        .collect()
}
