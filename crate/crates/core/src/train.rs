//! Masked-reconstruction pretraining, the alternating GAN step, and the
//! fine-tuning loop with validation and best-checkpoint tracking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{center_crop, denormalize, random_crop, stack, ImagePair};
use crate::discriminator::DiscriminatorModel;
use crate::error::{shape_err, Error, Result};
use crate::generator::{BoundGenerator, GeneratorModel};
use crate::losses::{combined_var, d_loss_var, g_adv_loss_var, mse_var, LossReport, DEFAULT_EPS, DEFAULT_LAMBDA_ADV};
use crate::metrics::{format_psnr, ImageU8, MetricReport};
use crate::optim::{adam_step, discriminator_param_groups, generator_param_groups, TrainState};
use crate::patch::{self, MaskPlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Generator output-most group and discriminator learning rate.
    pub base_lr: f64,
    pub llrd_decay: f64,
    pub batch_size: usize,
    pub lambda_adv: f64,
    pub eps: f64,
    pub freeze_discriminator: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            llrd_decay: 0.75,
            batch_size: 8,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            eps: DEFAULT_EPS,
            freeze_discriminator: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_adv must be non-negative, got {}", self.lambda_adv)));
        }
        crate::optim::layer_wise_lr(self.base_lr, self.llrd_decay, 0, 1).map(|_| ())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.rotate_left(17) ^ b.rotate_left(41));
    rng.random()
}

/// Generator forward over a batch, kept alive for the later generator update.
pub struct GeneratorPass {
    graph: Graph<f32>,
    bound: BoundGenerator,
    fake: Var,
}

impl GeneratorPass {
    /// Raw prediction, detached from the graph.
    pub fn fake(&self) -> Tensor {
        self.graph.to_tensor(self.fake)
    }
}

pub fn generator_forward(gen: &GeneratorModel, cloudy: &Tensor) -> Result<GeneratorPass> {
    let mut graph = Graph::new();
    let bound = gen.bind(&mut graph, true);
    let x = graph.constant(cloudy);
    let fake = bound.generate(&mut graph, x)?;
    Ok(GeneratorPass { graph, bound, fake })
}

/// One Adam step on the discriminator with `real` and `fake` as plain
/// inputs; returns the discriminator loss. With `frozen` set only the loss
/// is evaluated.
pub fn discriminator_update(
    disc: &mut DiscriminatorModel,
    state: &mut TrainState,
    real: &Tensor,
    fake: &Tensor,
    lr: f64,
    frozen: bool,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let bound = disc.bind(&mut g, !frozen);
    let (r, f) = (g.constant(real), g.constant(fake));
    let sr = bound.discriminate(&mut g, r)?;
    let sf = bound.discriminate(&mut g, f)?;
    let loss = d_loss_var(&mut g, sr, sf, DEFAULT_EPS)?;
    let value = g.scalar(loss) as f64;
    if !frozen {
        g.backward(loss)?;
        disc.accumulate_grads(&g, &bound)?;
        let mut groups = discriminator_param_groups(disc, lr)?;
        adam_step(state, &mut groups)?;
    }
    Ok(value)
}

/// Generator step on `mse + λ·g_adv`, scoring the pass's output with the
/// current discriminator held constant. Returns `(mse, g_adv)`.
pub fn generator_update(
    pass: GeneratorPass,
    gen: &mut GeneratorModel,
    state: &mut TrainState,
    disc: &DiscriminatorModel,
    clean: &Tensor,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let GeneratorPass { mut graph, bound, fake } = pass;
    let g = &mut graph;
    let critic = disc.bind(g, false);
    let target = g.constant(clean);
    let mse = mse_var(g, fake, target)?;
    let scores = critic.discriminate(g, fake)?;
    let adv = g_adv_loss_var(g, scores, cfg.eps)?;
    let total = combined_var(g, mse, adv, state.lambda_adv)?;
    let values = (g.scalar(mse) as f64, g.scalar(adv) as f64);
    g.check_finite(total, "generator loss")?;
    g.backward(total)?;
    gen.accumulate_grads(g, &bound)?;
    let mut groups = generator_param_groups(gen, cfg.base_lr, cfg.llrd_decay)?;
    adam_step(state, &mut groups)?;
    Ok(values)
}

fn check_batch(gen: &GeneratorModel, batch: &[ImagePair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let s = gen.config.grid.image_size;
    for p in batch {
        if p.dims() != (s, s) {
            return Err(shape_err!("pair {} is {:?}, grid needs {s}x{s}", p.id, p.dims()));
        }
    }
    Ok(())
}

/// Discriminator update on detached generator output, then generator update
/// against the updated discriminator.
pub fn gan_train_step(
    gen: &mut GeneratorModel,
    disc: &mut DiscriminatorModel,
    batch: &[ImagePair],
    gen_state: &mut TrainState,
    disc_state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    check_batch(gen, batch)?;
    if disc.config.grid != gen.config.grid {
        return Err(shape_err!("discriminator grid {:?} differs from generator grid {:?}", disc.config.grid, gen.config.grid));
    }
    let cloudy = stack(&batch.iter().map(|p| &p.cloudy).collect::<Vec<_>>())?;
    let clean = stack(&batch.iter().map(|p| &p.clean).collect::<Vec<_>>())?;
    let pass = generator_forward(gen, &cloudy)?;
    let d_loss = discriminator_update(disc, disc_state, &clean, &pass.fake(), cfg.base_lr, cfg.freeze_discriminator)?;
    let (mse, g_adv) = generator_update(pass, gen, gen_state, disc, &clean, cfg)?;
    Ok(LossReport::new(mse, g_adv, d_loss, gen_state.lambda_adv))
}

fn gather_rows(g: &mut Graph<f32>, x: Var, rows: &[usize], width: usize) -> Result<Var> {
    let index = rows.iter().flat_map(|&r| r * width..(r + 1) * width).collect();
    g.gather(x, index, &[rows.len(), width])
}

/// Reconstruction loss of one image: MSE over the masked patches, or over
/// every patch when nothing is masked.
pub fn masked_reconstruction_loss(
    g: &mut Graph<f32>,
    bound: &BoundGenerator,
    image: &Tensor,
    plan: &MaskPlan,
) -> Result<Var> {
    let grid = bound.config.grid;
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = g.constant(&image.clone().reshape(&shape)?);
    let patches = patch::patchify_var(g, x, &grid)?;
    let plans = std::slice::from_ref(plan);
    let latents = bound.encode(g, patches, Some(plans))?;
    let pred = bound.decode(g, latents, Some(plans))?;
    let masked = plan.masked_indices();
    if masked.is_empty() {
        return mse_var(g, pred, patches);
    }
    let pd = grid.patch_dim();
    let p = gather_rows(g, pred, &masked, pd)?;
    let t = gather_rows(g, patches, &masked, pd)?;
    mse_var(g, p, t)
}

/// One pass over `images` in a seeded order, one Adam step per image at a
/// uniform learning rate. Returns the mean loss.
pub fn pretrain_epoch(
    gen: &mut GeneratorModel,
    images: &[ImageU8],
    mask_ratio: f64,
    state: &mut TrainState,
    lr: f64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs at least one image".into()));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in [0, 1), got {mask_ratio}")));
    }
    let grid = gen.config.grid;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(state.rng_seed, state.step, 0)));
    let mut total = 0.0;
    for i in order {
        let salt = state.step;
        let pair = ImagePair::new("", images[i].clone(), images[i].clone(), None)?;
        let crop = random_crop(&pair, grid.image_size, mix(state.rng_seed, salt, 1))?;
        let image = crate::data::normalize(&crop.clean);
        let plan = MaskPlan::random(grid.num_patches(), mask_ratio, mix(state.rng_seed, salt, 2))?;
        let mut g = Graph::<f32>::new();
        let bound = gen.bind(&mut g, true);
        let loss = masked_reconstruction_loss(&mut g, &bound, &image, &plan)?;
        g.check_finite(loss, "reconstruction loss")?;
        total += g.scalar(loss) as f64;
        g.backward(loss)?;
        gen.accumulate_grads(&g, &bound)?;
        let mut groups = generator_param_groups(gen, lr, 1.0)?;
        adam_step(state, &mut groups)?;
    }
    Ok(total / images.len() as f64)
}

/// Center-crop scores of `gen` on `pairs`, plus the float-domain MSE of the
/// clamped prediction.
pub fn evaluate(gen: &GeneratorModel, pairs: &[ImagePair]) -> Result<(MetricReport, f64)> {
    let s = gen.config.grid.image_size;
    let crops = pairs.iter().map(|p| center_crop(p, s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(crops.len());
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in crops.chunks(16) {
        let cloudy = stack(&chunk.iter().map(|p| &p.cloudy).collect::<Vec<_>>())?;
        let pred = crate::generator::generate_batch(gen, &cloudy)?;
        let per = 3 * s * s;
        for (k, pair) in chunk.iter().enumerate() {
            let clamped: Vec<f32> = pred.data()[k * per..(k + 1) * per].iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let clean = crate::data::normalize(&pair.clean);
            sq += clamped.iter().zip(clean.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += per;
            let img = denormalize(&Tensor::new(vec![3, s, s], clamped)?)?;
            rows.push((pair.id.clone(), img, pair.clean.clone()));
        }
    }
    let report = MetricReport::evaluate(rows.iter().map(|(id, p, c)| (id.clone(), p, c)))?;
    Ok((report, sq / count as f64))
}

/// Cloudy input scored against the clean reference.
pub fn identity_baseline(pairs: &[ImagePair], size: usize) -> Result<MetricReport> {
    let crops = pairs.iter().map(|p| center_crop(p, size)).collect::<Result<Vec<_>>>()?;
    MetricReport::evaluate(crops.iter().map(|p| (p.id.clone(), &p.cloudy, &p.clean)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mse: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub report: LossReport,
}

pub struct FinetuneOutcome {
    /// Weights from the epoch with the highest validation PSNR.
    pub best: GeneratorModel,
    pub best_epoch: Option<usize>,
    pub best_val_psnr: f64,
    pub history: Vec<HistoryRow>,
    pub steps: Vec<StepRow>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,mse,g_adv,d_loss,val_psnr,val_ssim\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.mse, r.g_adv, r.d_loss, format_psnr(r.val_psnr), r.val_ssim));
    }
    s
}

pub fn step_log_csv(rows: &[StepRow]) -> String {
    let mut s = String::from("step,mse,g_adv,d_loss,g_total\n");
    for r in rows {
        let l = &r.report;
        s.push_str(&format!("{},{},{},{},{}\n", r.step, l.mse, l.g_adv, l.d_loss, l.g_total));
    }
    s
}

/// Adversarial fine-tuning. `gen` and `disc` end at their final weights; the
/// best generator by validation PSNR is returned separately.
pub fn finetune(
    gen: &mut GeneratorModel,
    disc: &mut DiscriminatorModel,
    train: &[ImagePair],
    val: &[ImagePair],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs non-empty train and val splits".into()));
    }
    cfg.validate()?;
    let size = gen.config.grid.image_size;
    let mut outcome =
        FinetuneOutcome { best: gen.clone(), best_epoch: None, best_val_psnr: f64::NEG_INFINITY, history: vec![], steps: vec![] };
    let mut gen_state = TrainState::new(cfg.seed, cfg.lambda_adv);
    let mut disc_state = TrainState::new(cfg.seed, cfg.lambda_adv);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk.iter().map(|&i| random_crop(&train[i], size, rng.random())).collect::<Result<Vec<_>>>()?;
            let report = gan_train_step(gen, disc, &batch, &mut gen_state, &mut disc_state, cfg)?;
            sums[0] += report.mse;
            sums[1] += report.g_adv;
            sums[2] += report.d_loss;
            n += 1;
            outcome.steps.push(StepRow { step: gen_state.step, report });
        }
        let (report, val_mse) = evaluate(gen, val)?;
        let row = HistoryRow {
            epoch,
            mse: sums[0] / n as f64,
            g_adv: sums[1] / n as f64,
            d_loss: sums[2] / n as f64,
            val_psnr: report.mean_psnr,
            val_ssim: report.mean_ssim,
            val_mse,
        };
        if row.val_psnr > outcome.best_val_psnr {
            outcome.best_val_psnr = row.val_psnr;
            outcome.best_epoch = Some(epoch);
            outcome.best = gen.clone();
        }
        outcome.history.push(row);
    }
    Ok(outcome)
}
