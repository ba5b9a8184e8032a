//! Command-line orchestration: dataset generation, staged training,
//! sampling, evaluation and diagnostics.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use cmmdit_core::attention::{count_attn_ops, format_millions, AttentionMode, BranchLayout};
use cmmdit_core::backbone::{Condition, ForwardOptions, Model};
use cmmdit_core::evalkit::{self, mask_to_tokens, EvalCase, EvalSettings, XattnInputs};
use cmmdit_core::flow::{
    self, interpolate, prepare_stage, sample_euler, sampler_noise, trainable_param_count, SampleMode, TrainStage,
    TrainState,
};
use cmmdit_core::lora::{ConditionType, LoraRegistry};
use cmmdit_core::toydata::{self, encode_caption, image_to_tensor, load_rgb, tensor_to_image, Split};
use cmmdit_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

/// Environment variable read for log verbosity (`error` .. `trace`).
pub const LOG_ENV: &str = "CMMDIT_LOG";

#[derive(Debug, Parser)]
#[command(name = "cmmdit", version, about = "Toy multi-conditional diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural dataset with a JSONL manifest.
    GenData(GenDataArgs),
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Generate images from prompt lines.
    Sample(SampleArgs),
    /// Generate the records of a split and score them.
    Eval(EvalArgs),
    /// Count attention operations of a branch layout.
    CountOps(CountOpsArgs),
    /// Heat map of X-query attention on one condition branch.
    AttnMap(AttnMapArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Options shared by commands that read a run config.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed for every stochastic step of the command.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// base, condition-lora:<TYPE> or denoising-lora.
    #[arg(long)]
    pub stage: TrainStage,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoints providing base weights (first) and adapters (all).
    #[arg(long = "from")]
    pub from: Vec<PathBuf>,
    /// Continue the run stored in this checkpoint.
    #[arg(long, conflicts_with = "from")]
    pub resume: Option<PathBuf>,
    /// Total optimizer steps (overrides `train.steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Condition types of the denoising stage (overrides `train.conditions`).
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<ConditionType>>,
    /// Loss curve CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// File of prompt lines: `caption words | TYPE=image.png | ...`.
    #[arg(long, conflicts_with_all = ["caption", "cond"])]
    pub prompts: Option<PathBuf>,
    /// Caption of a single prompt.
    #[arg(long)]
    pub caption: Option<String>,
    /// Condition of a single prompt as TYPE=image.png; repeatable.
    #[arg(long)]
    pub cond: Vec<String>,
    #[arg(long)]
    pub mode: Option<SampleMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Condition types to sample with; an empty string means none.
    #[arg(long)]
    pub conditions: Option<String>,
    #[arg(long)]
    pub mode: Option<SampleMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Evaluate at most this many records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report path (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountOpsArgs {
    #[arg(long)]
    pub t: usize,
    #[arg(long)]
    pub x: usize,
    /// Comma-separated condition lengths; empty for none.
    #[arg(long, default_value = "")]
    pub c: String,
    #[arg(long)]
    pub blocks: u64,
    #[arg(long)]
    pub mode: AttentionMode,
}

#[derive(Debug, Args)]
pub struct AttnMapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest seed of the record to inspect.
    #[arg(long)]
    pub record: u64,
    #[arg(long, default_value = "SUBJECT")]
    pub target: ConditionType,
    #[arg(long, value_delimiter = ',', default_value = "MASK_FILL,SUBJECT")]
    pub conditions: Vec<ConditionType>,
    #[arg(long, default_value = "training-free")]
    pub mode: SampleMode,
    /// Flow time of the noised input.
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Restrict to these blocks (e.g. dual0,single1).
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<String>>,
    /// Heat map PNG.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::CountOps(a) => cmd_count_ops(&a, out),
        Command::AttnMap(a) => cmd_attn_map(&a, out),
    }
}

/// Error rendered as a single `error[kind]: message` line.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Dimension(_) => "dimension",
        Error::Contract(_) => "contract",
        Error::Numeric(_) => "numeric",
        Error::Config(_) => "config",
        Error::Format(_) => "format",
        Error::Io { .. } => "io",
    };
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{kind}]: {msg}")
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(d) = &common.data {
        cfg.data.dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.sampling.seed = s;
    }
    Ok(cfg)
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut impl Write) -> Result<()> {
    let records = toydata::write_dataset(&a.out, a.count, a.seed)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    writeln!(
        out,
        "wrote {} samples to {} (train {}, test {}, discard {})",
        records.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Test),
        count(Split::Discard)
    )
    .map_err(io_out)
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "discard" => Ok(Split::Discard),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

/// Records of one split, loaded with their images.
pub fn load_split(dir: &Path, split: Split, limit: Option<usize>) -> Result<Vec<toydata::LoadedRecord>> {
    toydata::read_manifest(dir)?
        .into_iter()
        .filter(|r| r.split == split)
        .take(limit.unwrap_or(usize::MAX))
        .map(|r| toydata::load_record(dir, &r))
        .collect()
}

/// Base weights from the first checkpoint and the adapters of all of them.
/// Every checkpoint must carry the same base weights.
pub fn merge_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint<f32>> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    let mut merged: Checkpoint<f32> = checkpoint::load(first)?;
    merged.state = None;
    for path in rest {
        let other: Checkpoint<f32> = checkpoint::load(path)?;
        if other.base_hash != merged.base_hash {
            return Err(Error::Config(format!(
                "{} was trained on different base weights than {}",
                path.display(),
                first.display()
            )));
        }
        for (kind, adapter) in other.model.adapters.conditions() {
            if !merged.model.adapters.contains(kind) {
                merged.model.adapters.insert(kind, adapter.clone())?;
            }
        }
        if merged.model.adapters.denoising.is_none() {
            merged.model.adapters.denoising = other.model.adapters.denoising;
        }
        if merged.model.adapters.text.is_none() {
            merged.model.adapters.text = other.model.adapters.text;
        }
    }
    Ok(merged)
}

pub fn cmd_train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(c) = &a.conditions {
        cfg.train.conditions = c.clone();
    }
    cfg.validate()?;
    let plan = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    let (mut model, mut state) = if let Some(path) = &a.resume {
        let ckpt: Checkpoint<f32> = checkpoint::load(path)?;
        let state = ckpt
            .state
            .ok_or_else(|| Error::Config(format!("{} holds no training state to resume", path.display())))?;
        (ckpt.model, state)
    } else {
        let mut model = if a.from.is_empty() {
            if a.stage != TrainStage::Base {
                return Err(Error::Config(format!(
                    "stage {} needs --from with pretrained base weights",
                    a.stage
                )));
            }
            Model::init(cfg.model.clone(), &mut rng)?
        } else {
            merge_checkpoints(&a.from)?.model
        };
        match a.stage {
            TrainStage::Base => {}
            TrainStage::ConditionLora(kind) => {
                // The output holds the base and this one adapter only.
                let adapter = match model.adapters.remove(kind) {
                    Some(existing) => existing,
                    None => model.new_adapter(&mut rng)?,
                };
                model.adapters = LoraRegistry::new();
                model.adapters.insert(kind, adapter)?;
            }
            TrainStage::DenoisingLora => {
                if model.adapters.denoising.is_none() {
                    model.adapters.denoising = Some(model.new_adapter(&mut rng)?);
                }
            }
        }
        (model, TrainState::new(a.stage, plan))
    };

    let trainable = prepare_stage(&mut model, a.stage, plan)?;
    writeln!(out, "trainable parameters: {}", trainable_param_count(&model, trainable)).map_err(io_out)?;

    let data: Vec<_> = load_split(&cfg.data.dir, Split::Train, None)?
        .iter()
        .map(|r| r.to_example::<f32>())
        .collect();
    if data.is_empty() {
        return Err(Error::Config(format!("no train records in {}", cfg.data.dir.display())));
    }
    log::info!("training {} on {} examples from step {}", a.stage, data.len(), state.step);
    flow::train(&mut model, a.stage, plan, &data, &mut state, |step, loss| {
        log::info!("step {step} loss {loss:.5}");
    })?;

    checkpoint::save(&a.out, &model, Some(&state))?;
    let curve_path = a.curve.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &state.curve {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(&curve_path, csv).map_err(|e| Error::io(&curve_path, e))?;
    let last = state.curve.last().map_or(f64::NAN, |c| c.1);
    writeln!(
        out,
        "saved {} at step {} (last loss {last:.5}); curve {}",
        a.out.display(),
        state.step,
        curve_path.display()
    )
    .map_err(io_out)
}

/// One generation request.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub caption: Vec<usize>,
    pub conditions: Vec<(ConditionType, PathBuf)>,
}

/// Parses `caption words | TYPE=path | ...`; relative paths resolve
/// against `base`.
pub fn parse_prompt(line: &str, base: &Path) -> Result<Prompt> {
    let mut parts = line.split('|');
    let words: Vec<&str> = parts.next().unwrap_or_default().split_whitespace().collect();
    let caption = encode_caption(&words)?;
    let conditions = parts
        .map(|p| parse_cond(p.trim(), base))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prompt { caption, conditions })
}

fn parse_cond(spec: &str, base: &Path) -> Result<(ConditionType, PathBuf)> {
    let (kind, path) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("condition '{spec}' is not TYPE=path")))?;
    Ok((ConditionType::from_str(kind.trim())?, base.join(path.trim())))
}

pub fn cmd_sample(a: &SampleArgs, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let mode = a.mode.unwrap_or(cfg.sampling.mode);
    let steps = a.steps.unwrap_or(cfg.sampling.steps);
    let prompts = match &a.prompts {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = path.parent().unwrap_or(Path::new("."));
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| parse_prompt(l, base))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let caption = a
                .caption
                .as_deref()
                .ok_or_else(|| Error::Config("give --prompts or --caption".into()))?;
            let words: Vec<&str> = caption.split_whitespace().collect();
            vec![Prompt {
                caption: encode_caption(&words)?,
                conditions: a.cond.iter().map(|c| parse_cond(c, Path::new(""))).collect::<Result<_>>()?,
            }]
        }
    };
    let ckpt: Checkpoint<f32> = checkpoint::load(&a.ckpt)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, prompt) in prompts.iter().enumerate() {
        let images = prompt
            .conditions
            .iter()
            .map(|(_, p)| load_rgb(p).map(|img| image_to_tensor::<f32>(&img)))
            .collect::<Result<Vec<_>>>()?;
        let conds: Vec<Condition<'_, f32>> = prompt
            .conditions
            .iter()
            .zip(&images)
            .map(|((kind, _), image)| Condition { kind: *kind, image })
            .collect();
        let seed = cfg.sampling.seed + i as u64;
        let img = sample_euler(&ckpt.model, &prompt.caption, &conds, steps, seed, mode)?;
        let path = a.out.join(format!("{i:03}_seed{seed}_{mode}.png"));
        toydata::save_rgb(&tensor_to_image(&img)?, &path)?;
        writeln!(out, "{}", path.display()).map_err(io_out)?;
    }
    Ok(())
}

fn parse_condition_list(s: &str) -> Result<Vec<ConditionType>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(ConditionType::from_str)
        .collect()
}

pub fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let settings = EvalSettings {
        conditions: match &a.conditions {
            Some(list) => parse_condition_list(list)?,
            None => cfg.sampling.conditions.clone(),
        },
        mode: a.mode.unwrap_or(cfg.sampling.mode),
        steps: a.steps.unwrap_or(cfg.sampling.steps),
        seed: cfg.sampling.seed,
    };
    let ckpt: Checkpoint<f32> = checkpoint::load(&a.ckpt)?;
    let records = load_split(&cfg.data.dir, parse_split(&a.split)?, a.limit)?;
    let cases: Vec<EvalCase> = records.iter().map(EvalCase::from).collect();
    let report = evalkit::evaluate(&ckpt.model, &cases, &settings)?;
    let jsonl = report.to_jsonl()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&a.out, jsonl).map_err(|e| Error::io(&a.out, e))?;
    write!(out, "{}", report.summary()).map_err(io_out)
}

pub fn cmd_count_ops(a: &CountOpsArgs, out: &mut impl Write) -> Result<()> {
    let conds = a
        .c
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad condition length '{p}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = BranchLayout::new(a.t, a.x, conds)?;
    let n = count_attn_ops(&layout, a.blocks, a.mode);
    writeln!(out, "{n} ({})", format_millions(n)).map_err(io_out)
}

pub fn cmd_attn_map(a: &AttnMapArgs, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let ckpt: Checkpoint<f32> = checkpoint::load(&a.ckpt)?;
    let model = &ckpt.model;
    let dir = &cfg.data.dir;
    let record = toydata::read_manifest(dir)?
        .into_iter()
        .find(|r| r.seed == a.record)
        .ok_or_else(|| Error::Config(format!("no record with seed {} in {}", a.record, dir.display())))?;
    let rec = toydata::load_record(dir, &record)?;

    let images = a
        .conditions
        .iter()
        .map(|k| {
            rec.conditions
                .get(k)
                .map(image_to_tensor::<f32>)
                .ok_or_else(|| Error::Config(format!("record has no {k} condition")))
        })
        .collect::<Result<Vec<_>>>()?;
    let conds: Vec<Condition<'_, f32>> = a
        .conditions
        .iter()
        .zip(&images)
        .map(|(&kind, image)| Condition { kind, image })
        .collect();
    let x1 = image_to_tensor::<f32>(&rec.target);
    let x0 = sampler_noise::<f32>(x1.shape(), cfg.sampling.seed);
    let x_t = interpolate(&x0, &x1, a.t)?;
    let inputs = XattnInputs {
        x_t: &x_t,
        t: a.t,
        caption: &rec.caption,
        conditions: &conds,
        opts: ForwardOptions {
            denoising: a.mode == SampleMode::TrainingBased,
            ..Default::default()
        },
    };
    let patch = model.config.patch_size;
    let region = mask_to_tokens(&rec.hole, patch);
    let trace = evalkit::xattn_map(model, &inputs, a.target, Some(&region), a.blocks.as_deref())?;
    let concentration = trace.concentration(&mask_to_tokens(&rec.subject_mask, patch))?;
    toydata::save_gray(&trace.to_image(patch as u32), &a.out)?;
    writeln!(
        out,
        "mass={:.6} concentration={concentration:.6} heatmap={}",
        trace.mass(),
        a.out.display()
    )
    .map_err(io_out)
}
