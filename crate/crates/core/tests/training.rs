use pgcr::data::{gen_synthetic_dataset, stack, CloudRange, DatasetSplit, ImagePair};
use pgcr::discriminator::{DiscriminatorConfig, DiscriminatorModel};
use pgcr::generator::{GeneratorConfig, GeneratorModel};
use pgcr::nn::ParamTree;
use pgcr::optim::TrainState;
use pgcr::train::{
    discriminator_update, finetune, gan_train_step, generator_forward, generator_update, history_csv, pretrain_epoch,
    TrainConfig,
};

fn pairs(n: usize, seed: u64) -> Vec<ImagePair> {
    let split = gen_synthetic_dataset(n, 64, &CloudRange::default(), seed).unwrap();
    let mut all = DatasetSplit::load_all(&split.train).unwrap();
    all.extend(DatasetSplit::load_all(&split.val).unwrap());
    all.extend(DatasetSplit::load_all(&split.test).unwrap());
    all
}

fn models() -> (GeneratorModel, DiscriminatorModel) {
    let gen = GeneratorModel::init(GeneratorConfig::toy(), 1).unwrap();
    let disc = DiscriminatorModel::init(DiscriminatorConfig::new(gen.config.grid), 2).unwrap();
    (gen, disc)
}

fn snapshot<P: ParamTree<pgcr::Tensor>>(p: &P) -> Vec<Vec<f32>> {
    let mut out = vec![];
    p.visit_params("", &mut |_, t| out.push(t.data().to_vec()));
    out
}

fn has_grads<P: ParamTree<pgcr::Tensor>>(p: &P) -> bool {
    let mut any = false;
    p.visit_params("", &mut |_, t| any |= t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
    any
}

#[test]
fn zero_lambda_with_frozen_discriminator_is_plain_regression() {
    let (mut gen, mut disc) = models();
    let batch = pairs(10, 4)[..4].to_vec();
    let cfg = TrainConfig { lambda_adv: 0.0, freeze_discriminator: true, ..TrainConfig::default() };
    let (mut gs, mut ds) = (TrainState::new(0, 0.0), TrainState::new(0, 0.0));
    let before = snapshot(&disc.params);
    let r = gan_train_step(&mut gen, &mut disc, &batch, &mut gs, &mut ds, &cfg).unwrap();
    assert_eq!(r.g_total, r.mse);
    assert_eq!(snapshot(&disc.params), before);
}

#[test]
fn updates_are_isolated() {
    let (mut gen, mut disc) = models();
    let batch = pairs(10, 4)[..4].to_vec();
    let cfg = TrainConfig::default();
    let (mut gs, mut ds) = (TrainState::new(0, cfg.lambda_adv), TrainState::new(0, cfg.lambda_adv));
    let cloudy = stack(&batch.iter().map(|p| &p.cloudy).collect::<Vec<_>>()).unwrap();
    let clean = stack(&batch.iter().map(|p| &p.clean).collect::<Vec<_>>()).unwrap();
    let (g0, d0) = (snapshot(&gen.params), snapshot(&disc.params));

    let pass = generator_forward(&gen, &cloudy).unwrap();
    discriminator_update(&mut disc, &mut ds, &clean, &pass.fake(), cfg.base_lr, false).unwrap();
    assert!(!has_grads(&gen.params));
    assert_eq!(snapshot(&gen.params), g0);
    let d1 = snapshot(&disc.params);
    assert_ne!(d1, d0);

    generator_update(pass, &mut gen, &mut gs, &disc, &clean, &cfg).unwrap();
    assert!(!has_grads(&disc.params));
    assert_eq!(snapshot(&disc.params), d1);
    assert_ne!(snapshot(&gen.params), g0);
}

#[test]
fn train_step_is_deterministic() {
    let batch = pairs(10, 5)[..3].to_vec();
    let run = || {
        let (mut gen, mut disc) = models();
        let (mut gs, mut ds) = (TrainState::new(7, 0.1), TrainState::new(7, 0.1));
        let cfg = TrainConfig::default();
        let a = gan_train_step(&mut gen, &mut disc, &batch, &mut gs, &mut ds, &cfg).unwrap();
        let b = gan_train_step(&mut gen, &mut disc, &batch, &mut gs, &mut ds, &cfg).unwrap();
        (a, b, snapshot(&gen.params))
    };
    let (a, b, p) = run();
    let (a2, b2, p2) = run();
    assert_eq!((a.mse.to_bits(), a.d_loss.to_bits(), b.g_total.to_bits()), (a2.mse.to_bits(), a2.d_loss.to_bits(), b2.g_total.to_bits()));
    assert_eq!(p, p2);
    assert!(a.is_finite() && b.is_finite());
}

#[test]
fn pretraining_loss_decreases() {
    let images: Vec<_> = pairs(40, 7).into_iter().map(|p| p.clean).collect();
    let mut gen = GeneratorModel::init(GeneratorConfig::toy(), 1).unwrap();
    let mut st = TrainState::new(3, 0.1);
    let losses: Vec<f64> = (0..5).map(|_| pretrain_epoch(&mut gen, &images, 0.75, &mut st, 1e-4).unwrap()).collect();
    assert!(losses[4] < losses[0], "{losses:?}");

    let mut again = GeneratorModel::init(GeneratorConfig::toy(), 1).unwrap();
    let mut st2 = TrainState::new(3, 0.1);
    assert_eq!(pretrain_epoch(&mut again, &images, 0.75, &mut st2, 1e-4).unwrap(), losses[0]);
    assert!(pretrain_epoch(&mut again, &[], 0.75, &mut st2, 1e-4).is_err());
    assert!(pretrain_epoch(&mut again, &images, 1.0, &mut st2, 1e-4).is_err());
}

#[test]
fn finetune_history_and_best_checkpoint() {
    let data = pairs(20, 8);
    let (train, val) = data.split_at(14);
    let (mut gen, mut disc) = models();
    let initial = snapshot(&gen.params);
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let out = finetune(&mut gen, &mut disc, train, val, 0, &cfg).unwrap();
    assert!(out.history.is_empty() && out.best_epoch.is_none());
    assert_eq!(snapshot(&out.best.params), initial);

    let out = finetune(&mut gen, &mut disc, train, val, 3, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.steps.len(), 3 * 4);
    let max = out.history.iter().map(|r| r.val_psnr).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_psnr, max);
    let best = out.best_epoch.unwrap();
    assert_eq!(out.history[best - 1].val_psnr, max);
    assert_eq!(history_csv(&out.history).lines().count(), 4);
    assert!(finetune(&mut gen, &mut disc, &[], val, 1, &cfg).is_err());
}
