//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use pgcr::checkpoint::{load_generator, save_generator, ConfigMap};
use pgcr::config::RunConfig;
use pgcr::data::{gen_synthetic_dataset, normalize, write_dataset, write_image, CloudRange, DatasetSplit, RiceVariant};
use pgcr::discriminator::{discriminate, DiscriminatorConfig, DiscriminatorModel};
use pgcr::generator::{generate, reconstruct, GeneratorConfig, GeneratorModel};
use pgcr::losses::{d_loss, g_adv_loss, mse_loss, LossReport, DEFAULT_EPS};
use pgcr::metrics::{psnr, ssim, ImageU8};
use pgcr::optim::layer_wise_lr;
use pgcr::patch::{patchify, unpatchify, PatchGrid};
use pgcr::train::{evaluate, history_csv, identity_baseline};
use pgcr::verify::{format_table, run_grad_check, GradCheckOptions};
use pgcr::workflow::{finetune_models, load_split, pretrain_model, Init};
use pgcr::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lcg_image(w: usize, h: usize, seed: u64) -> ImageU8 {
    let mut s = seed;
    ImageU8::from_fn(w, h, |_, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 56) as u8
    })
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn published_scores_disclaimer() -> Outcome {
    let readme = e(std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")))?;
    let needed = ["33.659", "0.976", "34.056", "0.955", "not reproducible"];
    let missing: Vec<&str> = needed.iter().copied().filter(|n| !readme.contains(n)).collect();
    check(missing.is_empty(), format!("README states the published RICE scores are out of reach; missing {missing:?}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = e(run_grad_check(&GradCheckOptions::default()))?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    if !failed.is_empty() {
        eprint!("{}", format_table(&rows));
    }
    check(
        failed.is_empty() && elapsed <= Duration::from_secs(120),
        format!("{} rows, worst rel err {worst:.2e}, {:.1}s, failing {failed:?}", rows.len(), elapsed.as_secs_f64()),
    )
}

fn loss_oracles() -> Outcome {
    let half = Tensor::full(&[64], 0.5);
    let d = e(d_loss(&half, &half, DEFAULT_EPS))?;
    let g = e(g_adv_loss(&half, DEFAULT_EPS))?;
    let p = e(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]))?;
    let m = e(mse_loss(&p, &Tensor::zeros(&[1, 2, 2])))?;
    let r = LossReport::new(0.25, g, d, 0.1);
    let ln2 = std::f64::consts::LN_2;
    let ok = (d - 2.0 * ln2).abs() < 1e-6
        && (g - ln2).abs() < 1e-6
        && (m - 7.5).abs() < 1e-6
        && r.gan_total == d + g
        && (r.g_total - 0.3193147).abs() < 1e-6;
    check(ok, format!("d_loss {d:.7}, g_adv {g:.7}, mse {m}, gan_total {}", r.gan_total))
}

fn metric_oracles() -> Outcome {
    let x = lcg_image(20, 17, 5);
    let same = e(ssim(&x, &x))?;
    let a = ImageU8::from_fn(32, 32, |i, j, c| ((i * 7 + j * 3 + c * 40) % 230) as u8);
    let b = ImageU8::from_fn(32, 32, |i, j, c| a.get(i, j, c) + 16);
    let offset = e(psnr(&a, &b))?;
    // scikit-image structural_similarity with Gaussian weights, sigma 1.5,
    // population covariance and data_range 255.
    let refs = [(21, 22, -0.01188497081042629), (31, 32, 0.01758335935071112)];
    let mut worst: f64 = 0.0;
    for (s1, s2, want) in refs {
        worst = worst.max((e(ssim(&lcg_image(16, 16, s1), &lcg_image(16, 16, s2)))? - want).abs());
    }
    let ok = (same - 1.0).abs() < 1e-9 && (offset - 24.0484).abs() < 1e-3 && worst < 1e-6;
    check(ok, format!("ssim(X,X) {same}, psnr offset 16 {offset:.4} dB, reference gap {worst:.1e}"))
}

struct Transfer {
    pretrained_psnr: f64,
    pretrained_ssim: f64,
    baseline_psnr: f64,
    baseline_ssim: f64,
    pretrained_val_mse: f64,
    random_val_mse: f64,
    elapsed: Duration,
}

fn final_val_mse(history: &[pgcr::train::HistoryRow]) -> f64 {
    history.last().map_or(f64::NAN, |r| r.val_mse)
}

fn transfer_experiment(root: &Path) -> Result<Transfer, String> {
    let start = Instant::now();
    let cfg = RunConfig::toy();
    let data = root.join("data");
    let split = e(gen_synthetic_dataset(200, 64, &CloudRange::default(), cfg.seed))?;
    e(write_dataset(&split, &data))?;
    let split = e(load_split(&cfg, &data))?;

    let pre = e(pretrain_model(&cfg, &split))?;
    let ckpt = root.join("pretrained.ckpt");
    e(save_generator(&ckpt, &pre.model, &ConfigMap::new()))?;
    let (tuned, _) = e(finetune_models(&cfg, &split, &Init::Checkpoint(ckpt)))?;
    let (scratch, _) = e(finetune_models(&cfg, &split, &Init::Random))?;

    let test = e(DatasetSplit::load_all(&split.test))?;
    let (model, _) = e(evaluate(&tuned.best, &test))?;
    let baseline = e(identity_baseline(&test, 64))?;
    Ok(Transfer {
        pretrained_psnr: model.mean_psnr,
        pretrained_ssim: model.mean_ssim,
        baseline_psnr: baseline.mean_psnr,
        baseline_ssim: baseline.mean_ssim,
        pretrained_val_mse: final_val_mse(&tuned.history),
        random_val_mse: final_val_mse(&scratch.history),
        elapsed: start.elapsed(),
    })
}

fn toy_transfer(t: &Result<Transfer, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    let gain = t.pretrained_psnr - t.baseline_psnr;
    check(
        gain >= 2.0 && t.pretrained_ssim > t.baseline_ssim && t.elapsed <= Duration::from_secs(15 * 60),
        format!(
            "test psnr {:.3} vs cloudy {:.3} (+{gain:.2} dB), ssim {:.4} vs {:.4}, {:.0}s for both runs",
            t.pretrained_psnr,
            t.baseline_psnr,
            t.pretrained_ssim,
            t.baseline_ssim,
            t.elapsed.as_secs_f64()
        ),
    )
}

fn transfer_benefit(t: &Result<Transfer, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    check(
        t.pretrained_val_mse <= 1.05 * t.random_val_mse,
        format!("final val mse pretrained {:.5} vs random {:.5} (limit x1.05)", t.pretrained_val_mse, t.random_val_mse),
    )
}

fn structure() -> Outcome {
    let paper = PatchGrid::paper();
    let disc = e(DiscriminatorModel::init(DiscriminatorConfig::new(paper), 1))?;
    let scores = e(discriminate(&disc, &normalize(&lcg_image(224, 224, 1))))?;

    let toy = PatchGrid::toy();
    let img = normalize(&lcg_image(64, 64, 2));
    let round_trip = e(unpatchify(&e(patchify(&img, &toy))?, &toy))?.bit_eq(&img);

    let gen = e(GeneratorModel::init(GeneratorConfig::toy(), 3))?;
    let (pred, plan) = e(reconstruct(&gen, &img, 0.75, 4))?;
    let mut patches = e(patchify(&img, &toy))?;
    let w = toy.patch_dim();
    for p in plan.masked_indices() {
        patches.data_mut()[p * w..(p + 1) * w].iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    let (pred2, _) = e(reconstruct(&gen, &e(unpatchify(&patches, &toy))?, 0.75, 4))?;
    let independent = pred.bit_eq(&pred2);

    let ok = scores.numel() == 196 && paper.patch_dim() == 768 && round_trip && independent;
    check(
        ok,
        format!(
            "disc length {}, patch width {}, round trip {round_trip}, masked-patch independence {independent}",
            scores.numel(),
            paper.patch_dim()
        ),
    )
}

fn lr_table() -> Outcome {
    let lrs: Vec<f64> = (0..4).map(|i| layer_wise_lr(1e-3, 0.5, i, 4)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let want = [1.25e-4, 2.5e-4, 5e-4, 1e-3];
    let top = GeneratorConfig::toy().num_lr_groups();
    let top_lr = e(layer_wise_lr(3e-4, 0.75, top - 1, top))?;
    check(lrs == want && top_lr == 3e-4, format!("{lrs:?}; output-most group {top_lr:e}"))
}

fn determinism(root: &Path) -> Outcome {
    let mut cfg = RunConfig::toy();
    cfg.finetune_epochs = 2;
    cfg.batch_size = 4;
    let data = root.join("small");
    let split = e(gen_synthetic_dataset(24, 64, &CloudRange::default(), 5))?;
    e(write_dataset(&split, &data))?;
    let split = e(load_split(&cfg, &data))?;
    let (a, _) = e(finetune_models(&cfg, &split, &Init::Random))?;
    let (b, _) = e(finetune_models(&cfg, &split, &Init::Random))?;
    let same_history = history_csv(&a.history) == history_csv(&b.history);

    let path = root.join("best.ckpt");
    e(save_generator(&path, &a.best, &ConfigMap::new()))?;
    let (loaded, _) = e(load_generator(&path))?;
    let x = normalize(&lcg_image(64, 64, 6));
    let same_forward = e(generate(&a.best, &x))?.bit_eq(&e(generate(&loaded, &x))?);
    check(same_history && same_forward, format!("history identical {same_history}, reloaded forward identical {same_forward}"))
}

fn mock_rice(root: &Path, n: usize) -> Result<(), String> {
    let px = ImageU8::filled(2, 2, [9, 9, 9]);
    for sub in ["cloud", "label"] {
        e(std::fs::create_dir_all(root.join(sub)))?;
    }
    for i in 0..n {
        e(write_image(&root.join(format!("cloud/{i}.png")), &px))?;
        e(write_image(&root.join(format!("label/{i}.png")), &px))?;
    }
    Ok(())
}

fn rice_splits(root: &Path) -> Outcome {
    let (r1, r2) = (root.join("rice1"), root.join("rice2"));
    mock_rice(&r1, 500)?;
    mock_rice(&r2, 736)?;
    let a = e(pgcr::data::load_rice(&r1, RiceVariant::Rice1))?;
    let b = e(pgcr::data::load_rice(&r2, RiceVariant::Rice2))?;
    let sizes = (a.train.len(), a.val.len(), a.test.len());
    check(sizes == (320, 80, 100) && b.test.len() == 148, format!("RICE1 {sizes:?}, RICE2 test {}", b.test.len()))
}

fn main() {
    // Under `cargo test -- --list` and similar harness queries there is nothing to run.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let transfer = transfer_experiment(root);
    let criteria: Vec<(&str, Outcome)> = vec![
        ("1 published scores out of reach", published_scores_disclaimer()),
        ("2 gradient check", gradients()),
        ("3 loss oracles", loss_oracles()),
        ("4 metric oracles", metric_oracles()),
        ("5 toy transfer beats cloudy input", toy_transfer(&transfer)),
        ("6 pretraining helps", transfer_benefit(&transfer)),
        ("7 structural contracts", structure()),
        ("8 layer-wise lr table", lr_table()),
        ("9 determinism and persistence", determinism(root)),
        ("10 RICE split arithmetic", rice_splits(root)),
    ];
    let mut failed = 0;
    for (name, outcome) in &criteria {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
