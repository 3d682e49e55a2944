//! The command-line workflow as library calls: dataset generation,
//! pretraining, fine-tuning, evaluation and inference. Every file is written
//! atomically.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{generator_config_map, load_generator, save_discriminator, save_generator, ConfigMap};
use crate::config::RunConfig;
use crate::data::{
    center_crop, denormalize, gen_synthetic_dataset, load_dataset, normalize, read_image, write_atomic,
    write_dataset, write_image, CloudRange, DatasetSplit, ImagePair, RiceVariant,
};
use crate::discriminator::DiscriminatorModel;
use crate::error::{Error, Result};
use crate::generator::{generate, GeneratorModel};
use crate::metrics::{ImageU8, MetricReport};
use crate::optim::TrainState;
use crate::train::{evaluate, finetune, history_csv, identity_baseline, pretrain_epoch, step_log_csv, FinetuneOutcome};

pub const SEED_ENV: &str = "PGCR_SEED";

pub const BEST_GENERATOR: &str = "generator_best.ckpt";
pub const FINAL_DISCRIMINATOR: &str = "discriminator_final.ckpt";
pub const HISTORY: &str = "history.csv";
pub const STEP_LOG: &str = "steps.csv";

/// Derived seeds for the independent random streams of a run.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9)) ^ stream
}

/// `PGCR_SEED`, if set, replaces the configured seed.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, text.as_bytes())
}

/// Writes a synthetic dataset in the RICE layout plus `manifest.csv`.
pub fn gen_data(out: &Path, count: usize, size: usize, range: &CloudRange, seed: u64) -> Result<DatasetSplit> {
    let split = gen_synthetic_dataset(count, size, range, seed)?;
    ensure_dir(out)?;
    write_dataset(&split, out)?;
    Ok(split)
}

fn variant(cfg: &RunConfig) -> Result<Option<RiceVariant>> {
    match cfg.rice_variant.as_str() {
        "none" => Ok(None),
        v => v.parse().map(Some),
    }
}

pub fn load_split(cfg: &RunConfig, data: &Path) -> Result<DatasetSplit> {
    load_dataset(data, variant(cfg)?)
}

fn load_pairs(split: &DatasetSplit, name: &str) -> Result<Vec<ImagePair>> {
    let pairs = DatasetSplit::load_all(split.split(name)?)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("the {name} split is empty")));
    }
    Ok(pairs)
}

fn run_settings(cfg: &RunConfig, keys: &[&str]) -> ConfigMap {
    keys.iter().map(|k| (k.to_string(), cfg.get(k).expect("known key"))).collect()
}

pub struct PretrainOutcome {
    pub model: GeneratorModel,
    /// Mean masked-reconstruction loss per epoch.
    pub losses: Vec<f64>,
}

/// Masked reconstruction on the clean images of the train split.
pub fn pretrain_model(cfg: &RunConfig, split: &DatasetSplit) -> Result<PretrainOutcome> {
    let mut model = GeneratorModel::init(cfg.generator()?, stream_seed(cfg.seed, 1))?;
    let images: Vec<ImageU8> = load_pairs(split, "train")?.into_iter().map(|p| p.clean).collect();
    let mut state = TrainState::new(stream_seed(cfg.seed, 3), cfg.lambda_adv);
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        losses.push(pretrain_epoch(&mut model, &images, cfg.mask_ratio, &mut state, cfg.pretrain_lr)?);
    }
    Ok(PretrainOutcome { model, losses })
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// `<out>` without its extension, plus `.loss.csv`.
pub fn pretrain_loss_path(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

/// Pretrains, then writes the generator checkpoint and its loss CSV.
pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PretrainOutcome> {
    let split = load_split(cfg, data)?;
    let outcome = pretrain_model(cfg, &split)?;
    ensure_parent(out)?;
    let extra = run_settings(cfg, &["mask_ratio", "pretrain_epochs", "pretrain_lr", "seed"]);
    save_generator(out, &outcome.model, &extra)?;
    write_text(&pretrain_loss_path(out), &loss_csv(&outcome.losses))?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Init {
    Random,
    Checkpoint(PathBuf),
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "" => Err(Error::InvalidArgument("--init needs a checkpoint path or random".into())),
            path => Ok(Init::Checkpoint(path.into())),
        }
    }
}

fn describe(map: &ConfigMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

/// The starting generator. A checkpoint must match the run's architecture.
pub fn initial_generator(cfg: &RunConfig, init: &Init) -> Result<GeneratorModel> {
    let wanted = cfg.generator()?;
    match init {
        Init::Random => GeneratorModel::init(wanted, stream_seed(cfg.seed, 1)),
        Init::Checkpoint(path) => {
            let (model, _) = load_generator(path)?;
            let g = model.config.grid;
            if g != wanted.grid {
                return Err(Error::Config(format!(
                    "{} was trained on a {}px grid of {}px patches with {} channels, but this run uses a {}px grid of {}px patches with {} channels",
                    path.display(),
                    g.image_size,
                    g.patch_size,
                    g.channels,
                    wanted.grid.image_size,
                    wanted.grid.patch_size,
                    wanted.grid.channels
                )));
            }
            if model.config != wanted {
                return Err(Error::Config(format!(
                    "{} holds generator {}, but this run configures {}",
                    path.display(),
                    describe(&generator_config_map(&model.config)),
                    describe(&generator_config_map(&wanted))
                )));
            }
            Ok(model)
        }
    }
}

pub fn finetune_models(cfg: &RunConfig, split: &DatasetSplit, init: &Init) -> Result<(FinetuneOutcome, DiscriminatorModel)> {
    let mut gen = initial_generator(cfg, init)?;
    let mut disc = DiscriminatorModel::init(cfg.discriminator()?, stream_seed(cfg.seed, 2))?;
    let train = load_pairs(split, "train")?;
    let val = load_pairs(split, "val")?;
    let outcome = finetune(&mut gen, &mut disc, &train, &val, cfg.finetune_epochs, &cfg.train())?;
    Ok((outcome, disc))
}

/// Fine-tunes and writes the best generator, the final discriminator, the
/// per-epoch history and the per-step loss log into `out`.
pub fn finetune_run(cfg: &RunConfig, data: &Path, init: &Init, out: &Path) -> Result<FinetuneOutcome> {
    let split = load_split(cfg, data)?;
    let (outcome, disc) = finetune_models(cfg, &split, init)?;
    ensure_dir(out)?;
    let mut extra = run_settings(cfg, &["base_lr", "batch_size", "finetune_epochs", "lambda_adv", "llrd_decay", "seed"]);
    extra.insert("init".into(), match init {
        Init::Random => "random".into(),
        Init::Checkpoint(p) => p.display().to_string(),
    });
    if let Some(e) = outcome.best_epoch {
        extra.insert("best_epoch".into(), e.to_string());
    }
    save_generator(&out.join(BEST_GENERATOR), &outcome.best, &extra)?;
    save_discriminator(&out.join(FINAL_DISCRIMINATOR), &disc, &extra)?;
    write_text(&out.join(HISTORY), &history_csv(&outcome.history))?;
    write_text(&out.join(STEP_LOG), &step_log_csv(&outcome.steps))?;
    Ok(outcome)
}

pub struct EvalOutcome {
    pub model: MetricReport,
    pub baseline: MetricReport,
}

/// Paths written by [`eval`] for a report prefix.
pub fn report_paths(prefix: &Path) -> [PathBuf; 4] {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    [with(".csv"), with(".json"), with(".baseline.csv"), with(".baseline.json")]
}

/// Scores the generator and the identity baseline on one split.
pub fn eval(cfg: &RunConfig, data: &Path, checkpoint: &Path, split_name: &str, report: &Path) -> Result<EvalOutcome> {
    let (gen, _) = load_generator(checkpoint)?;
    let split = load_split(cfg, data)?;
    let pairs = load_pairs(&split, split_name)?;
    let (model, _) = evaluate(&gen, &pairs)?;
    let baseline = identity_baseline(&pairs, gen.config.grid.image_size)?;
    let [csv, json, bcsv, bjson] = report_paths(report);
    write_text(&csv, &model.to_csv())?;
    write_text(&json, &model.to_json())?;
    write_text(&bcsv, &baseline.to_csv())?;
    write_text(&bjson, &baseline.to_json())?;
    Ok(EvalOutcome { model, baseline })
}

/// Center crop to the grid, generate, clamp and quantize.
pub fn infer_image(gen: &GeneratorModel, input: &ImageU8) -> Result<ImageU8> {
    let s = gen.config.grid.image_size;
    let (w, h) = input.dims();
    if w < s || h < s {
        return Err(Error::Data(format!("input is {w}x{h}, smaller than the {s}x{s} grid")));
    }
    let pair = ImagePair::new("", input.clone(), input.clone(), None)?;
    let crop = center_crop(&pair, s)?;
    denormalize(&generate(gen, &normalize(&crop.cloudy))?)
}

pub fn infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<ImageU8> {
    let (gen, _) = load_generator(checkpoint)?;
    let img = infer_image(&gen, &read_image(input)?)?;
    ensure_parent(out)?;
    write_image(out, &img)?;
    Ok(img)
}
