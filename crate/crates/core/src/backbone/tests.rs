use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::BranchLayout;
use crate::tensor::{Graph, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        head_dim: 4,
        num_heads: 2,
        num_dual_blocks: 1,
        num_single_blocks: 1,
        patch_size: 4,
        image_size: 8,
        rope_axes: [0, 2, 2],
        mlp_ratio: 2,
        time_freq_dim: 4,
        lora_rank: 2,
        lora_alpha: 2.0,
        ..ModelConfig::default()
    }
}

/// Every tensor (including zero-initialized modulation, head and adapter
/// `B`) replaced by random values so all paths carry signal.
fn randomize<S: Scalar>(model: &mut Model<S>, seed: u64, std: f64) {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut r = rng(seed);
    for name in names {
        let t = model.tensor_mut(&name).unwrap();
        *t = Tensor::randn(t.shape(), std, &mut r);
    }
}

fn model_with<S: Scalar>(config: ModelConfig, kinds: &[ConditionType], seed: u64) -> Model<S> {
    let mut r = rng(seed);
    let mut m = Model::init(config, &mut r).unwrap();
    for &k in kinds {
        let a = m.new_adapter(&mut r).unwrap();
        m.adapters.insert(k, a).unwrap();
    }
    m
}

fn image<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Tensor<S> {
    Tensor::randn(&cfg.image_shape(), 1.0, &mut rng(seed))
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    tiny_config().validate().unwrap();
    let bad = [
        ModelConfig { embed_dim: 60, ..ModelConfig::default() },
        ModelConfig { patch_size: 5, ..ModelConfig::default() },
        ModelConfig { num_dual_blocks: 0, ..ModelConfig::default() },
        ModelConfig { rope_axes: [8, 12, 10], ..ModelConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn patchify_round_trip_and_order() {
    let img = Tensor::<f32>::from_fn(&[4, 4, 3], |i| i as f32);
    let p = patchify(&img, 2).unwrap();
    assert_eq!(p.shape(), &[4, 12]);
    // Patch (0, 1) starts at pixel (0, 2).
    assert_eq!(p.data()[12], img.data()[2 * 3]);
    assert_eq!(unpatchify(&p, 2, 4, 4, 3).unwrap(), img);
    assert!(patchify(&img, 3).is_err());
}

#[test]
fn embedding_token_counts() {
    let cfg = ModelConfig {
        patch_size: 2,
        max_text_len: 16,
        ..ModelConfig::default()
    };
    let model: Model<f32> = model_with(cfg.clone(), &[], 0);
    let mut sess = Session::inference(&model);
    let x = image::<f32>(&cfg, 1);
    let c1 = image::<f32>(&cfg, 2);
    let c2 = image::<f32>(&cfg, 3);
    let conds = [
        Condition { kind: ConditionType::Canny, image: &c1 },
        Condition { kind: ConditionType::Depth, image: &c2 },
    ];
    let caption = [0, 1, 2, 3, 4, 5, 6, 7];
    let (t, xv, cs) = embed_branches(&mut sess, &x, &caption, &conds).unwrap();
    assert_eq!(sess.graph.shape(xv), &[256, 64]);
    assert_eq!(sess.graph.shape(t), &[8, 64]);
    assert_eq!(cs.len(), 2);
    assert!(cs.iter().all(|&c| sess.graph.shape(c) == [256, 64]));

    let small = Tensor::<f32>::zeros(&[16, 16, 3]);
    assert!(matches!(
        embed_branches(&mut sess, &small, &caption, &[]),
        Err(Error::Dimension(_))
    ));
    assert!(embed_branches(&mut sess, &x, &[99], &[]).is_err());
}

#[test]
fn timestep_embedding_contract() {
    let model: Model<f64> = model_with(ModelConfig::default(), &[], 3);
    let embed = |t: f64| {
        let mut sess = Session::inference(&model);
        let v = timestep_embed(&mut sess, t)?;
        Ok::<_, Error>(sess.graph.value(v).clone())
    };
    let (a, b) = (embed(0.0).unwrap(), embed(1.0).unwrap());
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(1.0 - dot / (na * nb) > 0.0);
    assert_eq!(embed(0.3).unwrap(), embed(0.3).unwrap());
    let mut r = rng(4);
    for _ in 0..1000 {
        let t = rand::Rng::random_range(&mut r, 0.0..=1.0);
        assert!(embed(t).unwrap().all_finite());
    }
    assert!(matches!(embed(1.5), Err(Error::Contract(_))));
    assert!(matches!(embed(-0.1), Err(Error::Contract(_))));
}

#[test]
fn output_shape_matches_input() {
    let cfg = ModelConfig::default();
    let mut model: Model<f32> = model_with(cfg.clone(), &[ConditionType::Canny], 5);
    randomize(&mut model, 6, 0.2);
    let x = image::<f32>(&cfg, 7);
    let c = image::<f32>(&cfg, 8);
    let conds = [Condition { kind: ConditionType::Canny, image: &c }];
    let out = model_forward(&model, &x, 0.4, &[0, 4, 7, 9], &conds, ForwardOptions::default()).unwrap();
    assert_eq!(out.velocity.shape(), x.shape());
    assert!(out.velocity.all_finite());
    let missing = [Condition { kind: ConditionType::Subject, image: &c }];
    let err = model_forward(&model, &x, 0.4, &[0], &missing, ForwardOptions::default()).unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("SUBJECT")));
}

#[test]
fn zero_adapters_are_bit_identical() {
    let cfg = ModelConfig::default();
    let mut model: Model<f32> = model_with(cfg.clone(), &[ConditionType::Canny], 9);
    // Trained-looking base weights; adapters keep B = 0.
    let adapters = model.adapters.clone();
    randomize(&mut model, 10, 0.2);
    model.adapters = adapters;
    let mut r = rng(11);
    model.adapters.denoising = Some(model.new_adapter(&mut r).unwrap());

    let x = image::<f32>(&cfg, 12);
    let c = image::<f32>(&cfg, 13);
    let run = |m: &Model<f32>, kind: ConditionType, denoising: bool| {
        let conds = [Condition { kind, image: &c }];
        let opts = ForwardOptions { denoising, ..Default::default() };
        model_forward(m, &x, 0.7, &[1, 5, 8, 10], &conds, opts).unwrap().velocity
    };
    let base = run(&model, ConditionType::Canny, false);
    assert_eq!(run(&model, ConditionType::Canny, true), base);

    // A different zero-delta adapter, registered under another type that
    // shares the position policy, gives the same bits.
    let mut other = model.clone();
    let canny = other.adapters.remove(ConditionType::Canny).unwrap();
    let mut depth = other.new_adapter(&mut r).unwrap();
    assert_ne!(depth, canny);
    depth.frozen = true;
    other.adapters.insert(ConditionType::Depth, depth).unwrap();
    assert_eq!(run(&other, ConditionType::Depth, false), base);
}

#[test]
fn condition_permutation_invariance() {
    let cfg = ModelConfig::default();
    let kinds = [ConditionType::Canny, ConditionType::Depth, ConditionType::Subject];
    let mut model: Model<f64> = model_with(cfg.clone(), &kinds, 14);
    randomize(&mut model, 15, 0.2);
    let x = image::<f64>(&cfg, 16);
    let imgs: Vec<Tensor<f64>> = (0..3).map(|i| image(&cfg, 17 + i)).collect();
    let conds: Vec<Condition<'_, f64>> = kinds
        .iter()
        .zip(&imgs)
        .map(|(&kind, image)| Condition { kind, image })
        .collect();
    let caption = [2, 6, 8, 9];
    let a = model_forward(&model, &x, 0.5, &caption, &conds, ForwardOptions::default()).unwrap();
    let permuted = [conds[2], conds[0], conds[1]];
    let b = model_forward(&model, &x, 0.5, &caption, &permuted, ForwardOptions::default()).unwrap();
    let diff = a.velocity.max_abs_diff(&b.velocity);
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn adapter_switching_is_exclusive_per_branch() {
    let cfg = ModelConfig::default();
    let kinds = [ConditionType::Canny, ConditionType::Depth];
    let mut model: Model<f32> = model_with(cfg.clone(), &kinds, 20);
    model.adapters.denoising = Some(model.new_adapter(&mut rng(21)).unwrap());
    let x = image::<f32>(&cfg, 22);
    let c = image::<f32>(&cfg, 23);
    let d = image::<f32>(&cfg, 24);
    let conds = [
        Condition { kind: ConditionType::Canny, image: &c },
        Condition { kind: ConditionType::Depth, image: &d },
        Condition { kind: ConditionType::Canny, image: &d },
    ];
    for denoising in [false, true] {
        let mut sess = Session::inference(&model);
        let opts = ForwardOptions { denoising, ..Default::default() };
        forward_patches(&mut sess, &x, 0.2, &[0, 4], &conds, opts).unwrap();
        let log = &sess.adapter_log;
        let expected_calls = cfg.block_names().len() * PROJECTIONS.len();
        for (i, c) in conds.iter().enumerate() {
            let used: BTreeSet<AdapterKind> =
                log.iter().filter(|u| u.branch == i + 2).map(|u| u.adapter).collect();
            assert_eq!(used, BTreeSet::from([AdapterKind::Condition(c.kind)]));
            assert_eq!(log.iter().filter(|u| u.branch == i + 2).count(), expected_calls);
        }
        assert!(log.iter().all(|u| u.branch != 0));
        let x_uses: Vec<_> = log.iter().filter(|u| u.branch == 1).collect();
        if denoising {
            assert_eq!(x_uses.len(), expected_calls);
            assert!(x_uses.iter().all(|u| u.adapter == AdapterKind::Denoising));
        } else {
            assert!(x_uses.is_empty());
        }
    }
}

#[test]
fn dual_stream_only_adapters() {
    let cfg = ModelConfig {
        lora_single_blocks: false,
        ..ModelConfig::default()
    };
    let model: Model<f32> = model_with(cfg.clone(), &[ConditionType::Depth], 25);
    let a = model.adapters.condition(ConditionType::Depth).unwrap();
    assert!(a.targets().all(|(t, _)| t.starts_with("dual")));
    assert!(model.adapters.num_params() <= cfg.adapter_param_bound());

    let x = image::<f32>(&cfg, 26);
    let conds = [Condition { kind: ConditionType::Depth, image: &x }];
    let mut sess = Session::inference(&model);
    forward_patches(&mut sess, &x, 0.2, &[0], &conds, ForwardOptions::default()).unwrap();
    assert!(sess.adapter_log.iter().all(|u| u.block.starts_with("dual")));
    assert!(!sess.adapter_log.is_empty());
}

fn run_block<S: Scalar>(model: &Model<S>, single: bool, inputs: &[Tensor<S>]) -> Vec<Tensor<S>> {
    let cfg = &model.config;
    let mut sess = Session::inference(model);
    let n = cfg.tokens_per_image();
    let layout = BranchLayout::new(inputs[0].shape()[0], n, vec![n; inputs.len() - 2]).unwrap();
    let kinds = [ConditionType::Canny, ConditionType::Depth];
    let positions = assign_positions(cfg, &layout, &kinds[..inputs.len() - 2]);
    let cv = sess.graph.input(Tensor::randn(&[1, cfg.embed_dim], 1.0, &mut rng(30)));
    let mut adapters = vec![None, None];
    adapters.extend(kinds[..inputs.len() - 2].iter().map(|&k| Some(AdapterKind::Condition(k))));
    let ctx = BlockContext {
        rope: Arc::new(rope_table(cfg, &positions)),
        layout,
        cond_vec: cv,
        adapters,
        trace: false,
    };
    let mut streams: Vec<Var> = inputs.iter().map(|t| sess.graph.input(t.clone())).collect();
    if single {
        single_stream_block(&mut sess, 0, &mut streams, &ctx).unwrap();
    } else {
        dual_stream_block(&mut sess, 0, &mut streams, &ctx).unwrap();
    }
    streams.iter().map(|&v| sess.graph.value(v).clone()).collect()
}

#[test]
fn condition_rows_ignore_other_conditions() {
    let cfg = ModelConfig::default();
    let mut model: Model<f32> = model_with(cfg.clone(), &[ConditionType::Canny, ConditionType::Depth], 31);
    randomize(&mut model, 32, 0.2);
    let d = cfg.embed_dim;
    let n = cfg.tokens_per_image();
    let mk = |rows: usize, seed: u64| Tensor::<f32>::randn(&[rows, d], 1.0, &mut rng(seed));
    for single in [false, true] {
        let base_inputs = vec![mk(3, 33), mk(n, 34), mk(n, 35), mk(n, 36)];
        let mut other = base_inputs.clone();
        other[3] = mk(n, 37);
        let a = run_block(&model, single, &base_inputs);
        let b = run_block(&model, single, &other);
        assert_eq!(a[2], b[2], "C_1 rows changed with C_2 (single={single})");
        assert_ne!(a[1], b[1]);
        // The same branch without any other condition present.
        let alone = run_block(&model, single, &base_inputs[..3]);
        assert_eq!(alone[2], a[2]);
        for out in &a {
            assert!(out.all_finite());
        }
        assert_eq!(a[1].shape(), &[n, d]);
    }
}

#[test]
fn rotary_scores_are_translation_invariant() {
    let cfg = ModelConfig::default();
    let n = cfg.tokens_per_image();
    let layout = BranchLayout::new(4, n, vec![n]).unwrap();
    let kinds = [ConditionType::Depth];
    let pos = assign_positions(&cfg, &layout, &kinds);
    let mut moved = pos.clone();
    moved.translate_grid(&layout, 3.0, 5.0);
    let total = layout.total();
    let q = Tensor::<f64>::randn(&[cfg.num_heads, total, cfg.head_dim], 1.0, &mut rng(40));
    let k = Tensor::<f64>::randn(&[cfg.num_heads, total, cfg.head_dim], 1.0, &mut rng(41));
    let scores = |p: &PositionAssignment| {
        let mut g = Graph::inference();
        let table = Arc::new(rope_table::<f64>(&cfg, p));
        let qv = g.input(q.clone());
        let kv = g.input(k.clone());
        let qr = g.rope(qv, table.clone()).unwrap();
        let kr = g.rope(kv, table).unwrap();
        let (qr, kr) = (g.value(qr).clone(), g.value(kr).clone());
        let hd = cfg.head_dim;
        let mut out = Vec::new();
        for h in 0..cfg.num_heads {
            for i in layout.x_span() {
                for j in layout.x_span() {
                    let a = &qr.data()[(h * total + i) * hd..][..hd];
                    let b = &kr.data()[(h * total + j) * hd..][..hd];
                    out.push(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>());
                }
            }
        }
        out
    };
    let (a, b) = (scores(&pos), scores(&moved));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn aligned_conditions_share_rotations() {
    let cfg = ModelConfig::default();
    let n = cfg.tokens_per_image();
    let layout = BranchLayout::new(2, n, vec![n, n]).unwrap();
    let pos = assign_positions(&cfg, &layout, &[ConditionType::Canny, ConditionType::Subject]);
    let table = rope_table::<f64>(&cfg, &pos);
    let half = table.half;
    let row = |i: usize| (&table.cos[i * half..(i + 1) * half], &table.sin[i * half..(i + 1) * half]);
    let mut subject_differs = false;
    for p in 0..n {
        let x = layout.x_span().start + p;
        assert_eq!(row(x), row(layout.cond_span(0).start + p));
        subject_differs |= row(x) != row(layout.cond_span(1).start + p);
        // Reference tokens land outside X's column range.
        assert!(pos.coords[layout.cond_span(1).start + p][2] >= cfg.grid() as f64);
    }
    assert!(subject_differs);
}

/// Central differences against reverse mode for `mean((v - target)^2)`
/// over sampled coordinates of every parameter tensor.
#[test]
fn end_to_end_gradient_check() {
    let cfg = tiny_config();
    let kinds = [ConditionType::Canny, ConditionType::Subject];
    for seed in 0..3u64 {
        let mut model: Model<f64> = model_with(cfg.clone(), &kinds, 50 + seed);
        model.adapters.denoising = Some(model.new_adapter(&mut rng(60 + seed)).unwrap());
        randomize(&mut model, 70 + seed, 0.5);
        let x = image::<f64>(&cfg, 80 + seed);
        let c1 = image::<f64>(&cfg, 81 + seed);
        let c2 = image::<f64>(&cfg, 82 + seed);
        let target = patchify(&image::<f64>(&cfg, 83 + seed), cfg.patch_size).unwrap();
        let caption = [1, 4, 8];
        let opts = ForwardOptions { denoising: true, ..Default::default() };

        let build = |sess: &mut Session<'_, f64>| {
            let conds = [
                Condition { kind: kinds[0], image: &c1 },
                Condition { kind: kinds[1], image: &c2 },
            ];
            let out = forward_patches(sess, &x, 0.37, &caption, &conds, opts).unwrap();
            let tv = sess.graph.input(target.clone());
            let diff = sess.graph.sub(out, tv).unwrap();
            let sq = sess.graph.mul(diff, diff).unwrap();
            sess.graph.mean(sq).unwrap()
        };
        let eval = |m: &Model<f64>| {
            let mut sess = Session::inference(m);
            let l = build(&mut sess);
            sess.graph.value(l).item()
        };
        let mut sess = Session::new(&model, Trainable::Everything);
        let l = build(&mut sess);
        sess.graph.backward(l).unwrap();
        let grads = sess.gradients();
        assert_eq!(grads.len(), model.named_tensors().len());

        let step = 1e-5;
        let mut r = rng(90 + seed);
        let mut worst = (0.0f64, String::new());
        for (name, grad) in &grads {
            for _ in 0..3 {
                let i = rand::Rng::random_range(&mut r, 0..grad.len());
                let mut probe = model.clone();
                let orig = probe.tensor(name).unwrap().data()[i];
                probe.tensor_mut(name).unwrap().data_mut()[i] = orig + step;
                let up = eval(&probe);
                probe.tensor_mut(name).unwrap().data_mut()[i] = orig - step;
                let down = eval(&probe);
                let numeric = (up - down) / (2.0 * step);
                let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-3);
                if err > worst.0 {
                    worst = (err, format!("{name}[{i}]: {} vs {numeric}", grad[i]));
                }
            }
        }
        assert!(worst.0 < 1e-4, "seed {seed}: {}", worst.1);
    }
}

#[test]
fn named_tensor_lookup() {
    let mut model: Model<f32> = model_with(ModelConfig::default(), &[ConditionType::MaskFill], 1);
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n == "cond_lora/MASK_FILL/dual0/q/A"));
    assert!(names.iter().any(|n| n == "base/single1/fc2/w"));
    for n in &names {
        assert!(model.tensor(n).is_some(), "{n}");
        assert!(model.tensor_mut(n).is_ok(), "{n}");
    }
    assert!(model.tensor("cond_lora/CANNY/dual0/q/A").is_none());
    assert!(model.tensor_mut("base/nope").is_err());
    let total: usize = model.base_param_count() + model.adapters.num_params();
    assert!(total < 4_000_000);
}
