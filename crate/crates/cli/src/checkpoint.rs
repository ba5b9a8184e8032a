//! Single-file checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "UCKP" | version u32 | meta_len u32 | meta (TOML) | count u32
//! count x { name_len u32 | name | dtype u8 | rank u32 | dims u64.. | data }
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Model tensors keep their checkpoint names (`base/..`, `cond_lora/..`).
//! Optimizer moments are stored as `optim/m/<name>` and `optim/v/<name>`,
//! the loss curve as the `[n, 2]` f64 tensor `train/curve`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use cmmdit_core::backbone::{parse_adapter_name, Model, ModelConfig};
use cmmdit_core::flow::{Adam, TrainStage, TrainState};
use cmmdit_core::lora::{AdapterKind, LoraAdapter, LoraPair, LoraRegistry};
use cmmdit_core::tensor::{DType, Scalar, Tensor};
use cmmdit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;
const CURVE: &str = "train/curve";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    base_hash: String,
    model: ModelConfig,
    state: Option<StateMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    stage: String,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    adam_step: u64,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub state: Option<TrainState<S>>,
    /// Hash of the base weights recorded at save time.
    pub base_hash: String,
}

/// Hex SHA-256 over the base tensors (names, shapes and values).
pub fn base_hash<S: Scalar>(model: &Model<S>) -> String {
    let mut h = Sha256::new();
    for (name, t) in &model.base {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dtype: DType, shape: &[usize], values: impl Iterator<Item = f64>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(dtype.tag());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for v in values {
        match dtype {
            DType::F32 => out.extend((v as f32).to_le_bytes()),
            DType::F64 => out.extend(v.to_le_bytes()),
        }
    }
}

/// Encodes a model and optional training state.
pub fn to_bytes<S: Scalar>(model: &Model<S>, state: Option<&TrainState<S>>) -> Result<Vec<u8>> {
    let meta = Meta {
        base_hash: base_hash(model),
        model: model.config.clone(),
        state: state.map(|s| StateMeta {
            stage: s.stage.to_string(),
            step: s.step,
            lr: s.optimizer.lr,
            beta1: s.optimizer.beta1,
            beta2: s.optimizer.beta2,
            eps: s.optimizer.eps,
            weight_decay: s.optimizer.weight_decay,
            adam_step: s.optimizer.step,
        }),
    };
    let meta = toml::to_string(&meta).map_err(|e| format_err(format!("cannot encode metadata: {e}")))?;

    let mut records = Vec::new();
    let mut count = 0u32;
    for (name, t) in model.named_tensors() {
        put_tensor(&mut records, &name, S::DTYPE, t.shape(), t.data().iter().map(|v| v.as_f64()));
        count += 1;
    }
    if let Some(s) = state {
        for (prefix, moments) in [("optim/m", &s.optimizer.m), ("optim/v", &s.optimizer.v)] {
            for (name, values) in moments {
                let name = format!("{prefix}/{name}");
                put_tensor(&mut records, &name, S::DTYPE, &[values.len()], values.iter().map(|v| v.as_f64()));
                count += 1;
            }
        }
        let flat = s.curve.iter().flat_map(|&(step, loss)| [step as f64, loss]);
        put_tensor(&mut records, CURVE, DType::F64, &[s.curve.len(), 2], flat);
        count += 1;
    }

    let mut out = Vec::with_capacity(records.len() + meta.len() + 48);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((meta.len() as u32).to_le_bytes());
    out.extend(meta.as_bytes());
    out.extend(count.to_le_bytes());
    out.extend(records);
    let digest = Sha256::digest(&out);
    out.extend(digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Raw {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Decodes and verifies a checkpoint. Tensors stored in another precision
/// are cast to `S`.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("checksum mismatch, checkpoint is corrupted"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| format_err("metadata is not UTF-8"))?;
    let meta: Meta = toml::from_str(meta).map_err(|e| format_err(format!("bad metadata: {e}")))?;
    meta.model.validate()?;

    let count = r.u32()?;
    let mut tensors: BTreeMap<String, Raw> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err("tensor name is not UTF-8"))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| format_err(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| format_err("tensor too large"))?)?;
        let values = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if tensors.insert(name.clone(), Raw { shape, values }).is_some() {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(format_err("trailing bytes after tensor records"));
    }

    let to_tensor = |raw: Raw| Tensor::new(raw.shape, raw.values.into_iter().map(S::lit).collect());
    let mut base = BTreeMap::new();
    let mut groups: BTreeMap<String, (AdapterKind, BTreeMap<String, (Option<Tensor<S>>, Option<Tensor<S>>)>)> =
        BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut curve = None;
    for (name, raw) in tensors {
        if let Some(rest) = name.strip_prefix("base/") {
            base.insert(rest.to_string(), to_tensor(raw)?);
        } else if let Some(rest) = name.strip_prefix("optim/m/") {
            m.insert(rest.to_string(), to_tensor(raw)?.into_data());
        } else if let Some(rest) = name.strip_prefix("optim/v/") {
            v.insert(rest.to_string(), to_tensor(raw)?.into_data());
        } else if name == CURVE {
            curve = Some(raw.values.chunks_exact(2).map(|c| (c[0] as usize, c[1])).collect::<Vec<_>>());
        } else {
            let (kind, rest) = parse_adapter_name(&name).ok_or_else(|| format_err(format!("unknown tensor {name}")))?;
            let (target, which) = rest
                .rsplit_once('/')
                .ok_or_else(|| format_err(format!("bad adapter tensor name {name}")))?;
            let entry = groups
                .entry(kind.to_string())
                .or_insert_with(|| (kind, BTreeMap::new()))
                .1
                .entry(target.to_string())
                .or_default();
            match which {
                "A" => entry.0 = Some(to_tensor(raw)?),
                "B" => entry.1 = Some(to_tensor(raw)?),
                _ => return Err(format_err(format!("bad adapter tensor name {name}"))),
            }
        }
    }

    let mut adapters = LoraRegistry::new();
    for (label, (kind, targets)) in groups {
        let mut pairs = BTreeMap::new();
        for (target, pair) in targets {
            match pair {
                (Some(a), Some(b)) => {
                    pairs.insert(target, LoraPair { a, b });
                }
                _ => return Err(format_err(format!("{label}: target {target} lacks A or B"))),
            }
        }
        let adapter = LoraAdapter::from_parts(meta.model.lora_rank, meta.model.lora_alpha, pairs)?;
        match kind {
            AdapterKind::Condition(c) => adapters.insert(c, adapter)?,
            AdapterKind::Denoising => adapters.denoising = Some(adapter),
            AdapterKind::Text => adapters.text = Some(adapter),
        }
    }
    let model = Model {
        config: meta.model,
        base,
        adapters,
    };
    let recomputed = base_hash(&model);
    if recomputed != meta.base_hash {
        return Err(format_err("base weights do not match the recorded hash"));
    }

    let state = match meta.state {
        None => None,
        Some(s) => Some(TrainState {
            stage: TrainStage::from_str(&s.stage)?,
            step: s.step,
            optimizer: Adam {
                lr: s.lr,
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
                weight_decay: s.weight_decay,
                step: s.adam_step,
                m,
                v,
            },
            curve: curve.ok_or_else(|| format_err("training state without a loss curve"))?,
        }),
    };
    Ok(Checkpoint {
        model,
        state,
        base_hash: meta.base_hash,
    })
}

/// Writes atomically through a temporary file in the same directory.
pub fn save<S: Scalar>(path: &Path, model: &Model<S>, state: Option<&TrainState<S>>) -> Result<()> {
    let bytes = to_bytes(model, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmmdit_core::flow::TrainPlan;
    use cmmdit_core::lora::ConditionType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = Model::init(ModelConfig::default(), &mut rng).unwrap();
        let mut a = model.new_adapter(&mut rng).unwrap();
        for (_, pair) in a.targets_mut() {
            pair.b = Tensor::randn(pair.b.shape(), 0.1, &mut rng);
        }
        model.adapters.insert(ConditionType::Canny, a).unwrap();
        model.adapters.denoising = Some(model.new_adapter(&mut rng).unwrap());
        model
    }

    fn sample_state(model: &Model<f32>) -> TrainState<f32> {
        let mut state = TrainState::new(TrainStage::DenoisingLora, &TrainPlan::default());
        state.step = 3;
        state.optimizer.step = 3;
        for (name, t) in model.named_tensors().into_iter().take(5) {
            state.optimizer.m.insert(name.clone(), vec![0.25; t.numel()]);
            state.optimizer.v.insert(name, vec![1e-7; t.numel()]);
        }
        state.curve = vec![(0, 1.5), (1, 0.1 + 0.2), (2, f64::MIN_POSITIVE)];
        state
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let state = sample_state(&model);
        let bytes = to_bytes(&model, Some(&state)).unwrap();
        let back: Checkpoint<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.state.as_ref(), Some(&state));
        assert_eq!(back.base_hash, base_hash(&model));
        assert_eq!(to_bytes(&back.model, back.state.as_ref()).unwrap(), bytes);

        let plain: Checkpoint<f32> = from_bytes(&to_bytes(&model, None).unwrap()).unwrap();
        assert!(plain.state.is_none());
    }

    #[test]
    fn corruption_is_refused() {
        let bytes = to_bytes(&sample_model(), None).unwrap();
        for pos in [5, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Format(_))), "flip at {pos}");
        }
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes::<f32>(b"nope").is_err());
    }

    #[test]
    fn precision_cast_on_load() {
        let model = sample_model();
        let wide: Checkpoint<f64> = from_bytes(&to_bytes(&model, None).unwrap()).unwrap();
        let narrow: Checkpoint<f32> = from_bytes(&to_bytes(&wide.model, None).unwrap()).unwrap();
        assert_eq!(narrow.model, model);
    }

    #[test]
    fn file_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let model = sample_model();
        save(&path, &model, None).unwrap();
        let back: Checkpoint<f32> = load(&path).unwrap();
        assert_eq!(back.model, model);
        let err = load::<f32>(&dir.path().join("missing.ckpt")).unwrap_err();
        assert!(err.to_string().contains("missing.ckpt"));
    }
}
