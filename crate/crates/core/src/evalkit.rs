//! Generation metrics and the X-to-branch attention diagnostic.

use std::collections::BTreeMap;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{forward_patches, Condition, ForwardOptions, Model, Session};
use crate::error::{dim_err, Error, Result};
use crate::flow::{sample_euler, step_seed, SampleMode};
use crate::lora::ConditionType;
use crate::tensor::{Scalar, Tensor};
use crate::toydata::{
    edge_map, image_to_tensor, layer_intensity, tensor_to_image, LoadedRecord, ToySample, LAYER_BRIGHTNESS,
};

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(dim_err!("image sizes {a:?} and {b:?} differ"));
    }
    Ok(())
}

/// F1 of exact pixel matches between binary maps (nonzero = edge). Both
/// empty scores 1, exactly one empty scores 0.
pub fn edge_f1(pred: &GrayImage, gt: &GrayImage) -> Result<f64> {
    same_dims(pred.dimensions(), gt.dimensions())?;
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.pixels().zip(gt.pixels()) {
        let (p, g) = (p.0[0] > 0, g.0[0] > 0);
        np += usize::from(p);
        ng += usize::from(g);
        tp += usize::from(p && g);
    }
    Ok(match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if tp == 0 => 0.0,
        _ => {
            let precision = tp as f64 / np as f64;
            let recall = tp as f64 / ng as f64;
            2.0 * precision * recall / (precision + recall)
        }
    })
}

/// Mean squared error of 0..=255 intensities.
pub fn depth_mse(pred: &GrayImage, gt: &GrayImage) -> Result<f64> {
    same_dims(pred.dimensions(), gt.dimensions())?;
    let sum: f64 = pred
        .pixels()
        .zip(gt.pixels())
        .map(|(p, g)| (f64::from(p.0[0]) - f64::from(g.0[0])).powi(2))
        .sum();
    Ok(sum / f64::from(pred.width() * pred.height()))
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over 8x8 windows at stride 4 of two `w x h` planes in `[0, 1]`.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(dim_err!("planes of {} and {} values for {w}x{h}", a.len(), b.len()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(dim_err!("{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let idx = |dy: usize, dx: usize| (y0 + dy) * w + x0 + dx;
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    ma += a[idx(dy, dx)];
                    mb += b[idx(dy, dx)];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let (da, db) = (a[idx(dy, dx)] - ma, b[idx(dy, dx)] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM averaged over the three color channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a.dimensions(), b.dimensions())?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    let plane = |img: &RgbImage, c: usize| -> Vec<f64> { img.pixels().map(|p| f64::from(p.0[c]) / 255.0).collect() };
    let mut sum = 0.0;
    for c in 0..3 {
        sum += ssim_plane(&plane(a, c), &plane(b, c), w, h)?;
    }
    Ok(sum / 3.0)
}

/// Saturation above which a pixel counts as part of a shape.
pub const FOREGROUND_SATURATION: f64 = 0.3;

/// Depth layers read back from a rendered (or generated) image: saturated
/// pixels are shapes, and the brightness of their strongest channel picks
/// the nearest layer.
pub fn estimate_depth(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.get_pixel(x, y).0.map(|v| f64::from(v) / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        if max <= 0.0 || (max - min) / max <= FOREGROUND_SATURATION {
            return Luma([0]);
        }
        let layer = LAYER_BRIGHTNESS
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (max - **a).abs().total_cmp(&(max - **b).abs()))
            .map_or(1, |(i, _)| i as u8 + 1);
        Luma([layer_intensity(layer)])
    })
}

/// Grayscale map stored in a 3-channel condition image.
pub fn first_channel(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| Luma([img.get_pixel(x, y).0[0]]))
}

/// An evaluation record: target, caption and condition images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub id: u64,
    pub target: RgbImage,
    pub caption: Vec<usize>,
    pub conditions: BTreeMap<ConditionType, RgbImage>,
}

impl From<&ToySample> for EvalCase {
    fn from(s: &ToySample) -> Self {
        EvalCase {
            id: s.seed,
            target: s.target.clone(),
            caption: s.caption.clone(),
            conditions: s.conditions.clone(),
        }
    }
}

impl From<&LoadedRecord> for EvalCase {
    fn from(r: &LoadedRecord) -> Self {
        EvalCase {
            id: r.record.seed,
            target: r.target.clone(),
            caption: r.caption.clone(),
            conditions: r.conditions.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u64,
    pub f1: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// Slots for metrics that need pretrained networks; always `None` here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetrics {
    pub fid: Option<f64>,
    pub clip_i: Option<f64>,
    pub dino: Option<f64>,
    pub clip_t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub count: usize,
    pub f1: f64,
    pub mse: f64,
    pub ssim: f64,
    pub external: ExternalMetrics,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Aggregates are means of the per-sample values (0 when empty).
    pub fn from_samples(config_hash: String, samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricReport {
            config_hash,
            count: n,
            f1: mean(|s| s.f1),
            mse: mean(|s| s.mse),
            ssim: mean(|s| s.ssim),
            external: ExternalMetrics::default(),
            samples,
        }
    }

    /// JSON Lines: the aggregate record, then one record per sample.
    pub fn to_jsonl(&self) -> Result<String> {
        let head = Aggregate {
            config_hash: self.config_hash.clone(),
            count: self.count,
            f1: self.f1,
            mse: self.mse,
            ssim: self.ssim,
            external: self.external.clone(),
        };
        let mut out = json_line(&head)?;
        for s in &self.samples {
            out.push_str(&json_line(s)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse_err = |e: serde_json::Error| Error::Format(format!("bad report line: {e}"));
        let head: Aggregate = serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty report".into()))?)
            .map_err(parse_err)?;
        let samples = lines
            .map(|l| serde_json::from_str(l).map_err(parse_err))
            .collect::<Result<Vec<SampleMetrics>>>()?;
        if samples.len() != head.count {
            return Err(Error::Format(format!("report lists {} of {} samples", samples.len(), head.count)));
        }
        Ok(MetricReport {
            config_hash: head.config_hash,
            count: head.count,
            f1: head.f1,
            mse: head.mse,
            ssim: head.ssim,
            external: head.external,
            samples,
        })
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        format!(
            "samples  edge_f1  depth_mse  ssim\n{:>7}  {:>7.4}  {:>9.2}  {:>6.4}\n",
            self.count, self.f1, self.mse, self.ssim
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Aggregate {
    config_hash: String,
    count: usize,
    f1: f64,
    mse: f64,
    ssim: f64,
    external: ExternalMetrics,
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    line.push('\n');
    Ok(line)
}

/// Metrics of one generated image against its case.
pub fn score_image(generated: &RgbImage, case: &EvalCase) -> Result<SampleMetrics> {
    let gt_edges = edge_map(&case.target);
    let gt_depth = match case.conditions.get(&ConditionType::Depth) {
        Some(d) => first_channel(d),
        None => estimate_depth(&case.target),
    };
    Ok(SampleMetrics {
        id: case.id,
        f1: edge_f1(&edge_map(generated), &gt_edges)?,
        mse: depth_mse(&estimate_depth(generated), &gt_depth)?,
        ssim: ssim(generated, &case.target)?,
    })
}

/// Sampling settings that define an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub conditions: Vec<ConditionType>,
    pub mode: SampleMode,
    pub steps: usize,
    pub seed: u64,
}

pub fn config_hash<S: Scalar>(model: &Model<S>, settings: &EvalSettings) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).unwrap_or_default());
    h.update(serde_json::to_vec(settings).unwrap_or_default());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates one image per case with the given conditions and scores it.
pub fn generate<S: Scalar>(model: &Model<S>, case: &EvalCase, settings: &EvalSettings) -> Result<RgbImage> {
    let images: Vec<Tensor<S>> = settings
        .conditions
        .iter()
        .map(|k| {
            case.conditions
                .get(k)
                .map(image_to_tensor)
                .ok_or_else(|| Error::Config(format!("case {} has no {k} condition", case.id)))
        })
        .collect::<Result<_>>()?;
    let conds: Vec<Condition<'_, S>> = settings
        .conditions
        .iter()
        .zip(&images)
        .map(|(&kind, image)| Condition { kind, image })
        .collect();
    let seed = step_seed(settings.seed, case.id as usize);
    let out = sample_euler(model, &case.caption, &conds, settings.steps, seed, settings.mode)?;
    tensor_to_image(&out)
}

pub fn evaluate<S: Scalar>(model: &Model<S>, cases: &[EvalCase], settings: &EvalSettings) -> Result<MetricReport> {
    let samples = cases
        .iter()
        .map(|case| score_image(&generate(model, case, settings)?, case))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(config_hash(model, settings), samples))
}

/// X-query attention mass on one branch's keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// Side of the target branch's token grid.
    pub grid: usize,
    /// Averaged heat map over the target branch's tokens (row-major grid).
    pub heat: Vec<f64>,
    /// `(block, head, heat map)` before averaging.
    pub per_block_head: Vec<(String, usize, Vec<f64>)>,
    /// For every averaged X row and (block, head): mass on the target keys
    /// and on all other keys.
    pub row_split: Vec<(f64, f64)>,
}

impl AttentionTrace {
    /// Total averaged mass per X row (≤ 1).
    pub fn mass(&self) -> f64 {
        self.heat.iter().sum()
    }

    /// Share of the heat inside `mask` (one flag per target token).
    pub fn concentration(&self, mask: &[bool]) -> Result<f64> {
        if mask.len() != self.heat.len() {
            return Err(dim_err!("mask of {} tokens for {} keys", mask.len(), self.heat.len()));
        }
        let total = self.mass();
        if total <= 0.0 {
            return Ok(0.0);
        }
        let inside: f64 = self.heat.iter().zip(mask).filter(|(_, &m)| m).map(|(h, _)| h).sum();
        Ok(inside / total)
    }

    /// Heat map as an image, scaled so the maximum is white.
    pub fn to_image(&self, pixels_per_token: u32) -> GrayImage {
        let max = self.heat.iter().copied().fold(0.0, f64::max);
        let g = self.grid as u32;
        GrayImage::from_fn(g * pixels_per_token, g * pixels_per_token, |x, y| {
            let i = (y / pixels_per_token * g + x / pixels_per_token) as usize;
            let v = if max > 0.0 { self.heat[i] / max } else { 0.0 };
            Luma([(255.0 * v).round() as u8])
        })
    }
}

/// Tokens whose patch is at least half covered by `mask`.
pub fn mask_to_tokens(mask: &GrayImage, patch: usize) -> Vec<bool> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let (gw, gh) = (w / patch, h / patch);
    let mut out = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut on = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    on += usize::from(mask.get_pixel((gx * patch + dx) as u32, (gy * patch + dy) as u32).0[0] > 0);
                }
            }
            out.push(2 * on >= patch * patch);
        }
    }
    out
}

/// Inputs of the instrumented forward pass behind [`xattn_map`].
pub struct XattnInputs<'a, S> {
    pub x_t: &'a Tensor<S>,
    pub t: f64,
    pub caption: &'a [usize],
    pub conditions: &'a [Condition<'a, S>],
    pub opts: ForwardOptions,
}

/// Softmax mass from X queries onto the keys of the first branch of type
/// `target`, averaged over the selected blocks (all when `blocks` is
/// `None`), every head and the X rows inside `region` (all when `None`).
pub fn xattn_map<S: Scalar>(
    model: &Model<S>,
    inputs: &XattnInputs<'_, S>,
    target: ConditionType,
    region: Option<&[bool]>,
    blocks: Option<&[String]>,
) -> Result<AttentionTrace> {
    let branch = inputs
        .conditions
        .iter()
        .position(|c| c.kind == target)
        .ok_or_else(|| Error::Contract(format!("no {target} branch in the inputs")))?;
    let mut sess = Session::inference(model);
    let opts = ForwardOptions {
        trace: true,
        ..inputs.opts
    };
    forward_patches(&mut sess, inputs.x_t, inputs.t, inputs.caption, inputs.conditions, opts)?;

    let heads = model.config.num_heads;
    let grid = model.config.grid();
    let mut per_block_head = Vec::new();
    let mut row_split = Vec::new();
    for rec in &sess.trace {
        if blocks.is_some_and(|b| !b.iter().any(|name| *name == rec.block)) {
            continue;
        }
        let layout = &rec.layout;
        let keys = layout.cond_span(branch);
        if keys.is_empty() {
            return Err(Error::Contract(format!("{target} branch has no keys")));
        }
        let x_rows: Vec<usize> = layout
            .x_span()
            .enumerate()
            .filter(|(i, _)| region.is_none_or(|r| r.get(*i).copied().unwrap_or(false)))
            .map(|(_, row)| row)
            .collect();
        if x_rows.is_empty() {
            return Err(Error::Contract("region selects no X tokens".into()));
        }
        let probs = sess
            .graph
            .attention_probs(rec.node)
            .ok_or_else(|| Error::Contract("trace node is not an attention node".into()))?;
        let nk = layout.total();
        let nq = probs.len() / (heads * nk);
        for h in 0..heads {
            let mut heat = vec![0.0; keys.len()];
            for &row in &x_rows {
                let p = &probs[(h * nq + row) * nk..(h * nq + row + 1) * nk];
                let mut on_target = 0.0;
                for (j, k) in keys.clone().enumerate() {
                    let v = p[k].as_f64();
                    heat[j] += v;
                    on_target += v;
                }
                let total: f64 = p.iter().map(|v| v.as_f64()).sum();
                row_split.push((on_target, total - on_target));
            }
            heat.iter_mut().for_each(|v| *v /= x_rows.len() as f64);
            per_block_head.push((rec.block.clone(), h, heat));
        }
    }
    if per_block_head.is_empty() {
        return Err(Error::Contract("no attention block selected".into()));
    }
    let n = per_block_head[0].2.len();
    let mut heat = vec![0.0; n];
    for (_, _, m) in &per_block_head {
        for (a, b) in heat.iter_mut().zip(m) {
            *a += b;
        }
    }
    heat.iter_mut().for_each(|v| *v /= per_block_head.len() as f64);
    Ok(AttentionTrace {
        grid,
        heat,
        per_block_head,
        row_split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::backbone::ModelConfig;
    use crate::toydata::{depth_map, gen_scene};

    fn map(w: u32, h: u32, on: &[(u32, u32)]) -> GrayImage {
        let mut m = GrayImage::new(w, h);
        for &(x, y) in on {
            m.put_pixel(x, y, Luma([255]));
        }
        m
    }

    #[test]
    fn f1_cases() {
        let gt = map(4, 4, &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(edge_f1(&gt, &gt).unwrap(), 1.0);
        let disjoint = map(4, 4, &[(0, 1), (1, 0)]);
        assert_eq!(edge_f1(&disjoint, &gt).unwrap(), 0.0);
        let half = map(4, 4, &[(0, 0), (1, 1)]);
        assert!((edge_f1(&half, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let empty = GrayImage::new(4, 4);
        assert_eq!(edge_f1(&empty, &empty).unwrap(), 1.0);
        assert_eq!(edge_f1(&empty, &gt).unwrap(), 0.0);
        assert_eq!(edge_f1(&gt, &empty).unwrap(), 0.0);
        assert!(edge_f1(&gt, &GrayImage::new(3, 4)).is_err());
        // Swapping roles exchanges precision and recall only.
        assert_eq!(edge_f1(&gt, &half).unwrap(), edge_f1(&half, &gt).unwrap());
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = GrayImage::from_fn(9, 7, |_, _| Luma([rng.random_range(0..=200)]));
        assert_eq!(depth_mse(&a, &a).unwrap(), 0.0);
        let shifted = GrayImage::from_fn(9, 7, |x, y| Luma([a.get_pixel(x, y).0[0] + 10]));
        assert_eq!(depth_mse(&a, &shifted).unwrap(), 100.0);
        let b = GrayImage::from_fn(9, 7, |_, _| Luma([rng.random_range(0..=255)]));
        // Two-pass reference: differences first, then their mean square.
        let diffs: Vec<f64> = a
            .pixels()
            .zip(b.pixels())
            .map(|(p, q)| f64::from(p.0[0]) - f64::from(q.0[0]))
            .collect();
        let reference = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((depth_mse(&a, &b).unwrap() - reference).abs() < 1e-6);
        assert_eq!(depth_mse(&a, &b).unwrap(), depth_mse(&b, &a).unwrap());
    }

    #[test]
    fn ssim_cases() {
        let s = gen_scene(5).target;
        assert!((ssim(&s, &s).unwrap() - 1.0).abs() < 1e-12);
        let black = RgbImage::from_pixel(16, 16, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&black, &white).unwrap() - expected).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = RgbImage::from_fn(32, 32, |x, y| {
            let p = s.get_pixel(x, y).0;
            Rgb(p.map(|v| (i16::from(v) + rng.random_range(-2..=2)).clamp(0, 255) as u8))
        });
        assert!(ssim(&s, &noisy).unwrap() > 0.95);
        assert_eq!(ssim(&s, &noisy).unwrap(), ssim(&noisy, &s).unwrap());
        let tiny = RgbImage::new(4, 4);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Dimension(_))));
    }

    #[test]
    fn depth_estimator_recovers_rendered_layers() {
        for seed in 0..200 {
            let s = gen_scene(seed);
            assert_eq!(estimate_depth(&s.target), depth_map(&s.scene), "seed {seed}");
        }
    }

    #[test]
    fn perfect_generation_scores() {
        let s = gen_scene(11);
        let case = EvalCase::from(&s);
        let m = score_image(&s.target, &case).unwrap();
        assert_eq!((m.f1, m.mse), (1.0, 0.0));
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let report = MetricReport::from_samples("x".into(), vec![m.clone(), SampleMetrics { f1: 0.0, ..m }]);
        assert_eq!(report.f1, 0.5);
        assert_eq!(report.count, 2);
        assert!(report.summary().contains("edge_f1"));
        let text = report.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(MetricReport::from_jsonl(&text).unwrap(), report);
        assert!(MetricReport::from_jsonl(text.lines().next().unwrap()).is_err());
        let empty = MetricReport::from_samples("x".into(), vec![]);
        assert_eq!((empty.count, empty.f1), (0, 0.0));
    }

    #[test]
    fn mask_tokens_follow_majority() {
        let mask = GrayImage::from_fn(8, 8, |x, y| Luma([if x < 4 && y < 6 { 255 } else { 0 }]));
        assert_eq!(mask_to_tokens(&mask, 4), vec![true, false, true, false]);
    }

    #[test]
    fn attention_trace_is_a_valid_slice() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model: Model<f64> = Model::init(cfg.clone(), &mut rng).unwrap();
        for k in [ConditionType::Subject, ConditionType::MaskFill] {
            let a = model.new_adapter(&mut rng).unwrap();
            model.adapters.insert(k, a).unwrap();
        }
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for n in names {
            let t = model.tensor_mut(&n).unwrap();
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
        let s = gen_scene(21);
        let x_t = Tensor::randn(&cfg.image_shape(), 1.0, &mut rng);
        let subj: Tensor<f64> = image_to_tensor(&s.conditions[&ConditionType::Subject]);
        let fill: Tensor<f64> = image_to_tensor(&s.conditions[&ConditionType::MaskFill]);
        let conds = [
            Condition { kind: ConditionType::MaskFill, image: &fill },
            Condition { kind: ConditionType::Subject, image: &subj },
        ];
        let inputs = XattnInputs {
            x_t: &x_t,
            t: 0.5,
            caption: &s.caption,
            conditions: &conds,
            opts: ForwardOptions::default(),
        };
        let region = mask_to_tokens(&s.hole, cfg.patch_size);
        let trace = xattn_map(&model, &inputs, ConditionType::Subject, Some(&region), None).unwrap();
        assert_eq!(trace.heat.len(), cfg.tokens_per_image());
        assert!(trace.heat.iter().all(|&v| v >= 0.0));
        assert!(trace.mass() <= 1.0 + 1e-9 && trace.mass() > 0.0);
        for (on, off) in &trace.row_split {
            assert!(*on <= 1.0 + 1e-12);
            assert!((on + off - 1.0).abs() < 1e-5);
        }
        let blocks = cfg.block_names().len();
        assert_eq!(trace.per_block_head.len(), blocks * cfg.num_heads);
        let c = trace.concentration(&mask_to_tokens(&s.subject_mask, cfg.patch_size)).unwrap();
        assert!((0.0..=1.0).contains(&c));
        assert_eq!(trace.to_image(4).dimensions(), (32, 32));

        let only = [String::from("dual0")];
        let one = xattn_map(&model, &inputs, ConditionType::Subject, Some(&region), Some(&only)).unwrap();
        assert_eq!(one.per_block_head.len(), cfg.num_heads);
        assert!(xattn_map(&model, &inputs, ConditionType::Canny, None, None).is_err());
    }
}
