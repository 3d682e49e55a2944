use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use pgcr::autograd::gradcheck::Precision;
use pgcr::config::{RunConfig, KEYS};
use pgcr::data::CloudRange;
use pgcr::generator::GeneratorConfig;
use pgcr::verify::{format_table, run_grad_check, GradCheckOptions};
use pgcr::workflow::{self, Init};
use pgcr::{Error, Result};

#[derive(Parser)]
#[command(name = "pgcr", version, about = "Cloud removal with a masked-autoencoder generator and a per-patch discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset in the RICE layout with a split manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Cloud coverage, either a single value or `lo..hi`.
        #[arg(long, default_value = "0.3..0.5")]
        coverage: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked-reconstruction pretraining of the generator.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generator checkpoint to write; the loss CSV goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Adversarial fine-tuning from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generator checkpoint, or `random`.
        #[arg(long)]
        init: String,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// PSNR/SSIM of a generator and of the identity baseline on one split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path prefix; `.csv`, `.json` and `.baseline.*` are appended.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Remove clouds from one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and of the model losses.
    GradCheck {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        coords: usize,
        /// Check the f64 backward pass instead of f32.
        #[arg(long)]
        f64: bool,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// `--config FILE` plus one flag per configuration key.
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut s = ConfigArgs { file: None, overrides: vec![] };
        s.update_from_arg_matches(m)?;
        Ok(s)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        self.file = m.get_one::<PathBuf>("config").cloned();
        self.overrides = KEYS
            .iter()
            .filter_map(|k| m.get_one::<String>(k).map(|v| (*k, v.clone())))
            .collect();
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value run configuration"),
        );
        KEYS.iter().fold(cmd, |cmd, k| {
            cmd.arg(
                Arg::new(*k)
                    .long(flag(k))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help_heading("Configuration overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl ConfigArgs {
    /// Defaults, then the file, then `PGCR_SEED`, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::toy(),
        };
        if let Some(seed) = workflow::seed_override()? {
            cfg.seed = seed;
        }
        if let Some((_, preset)) = self.overrides.iter().find(|(k, _)| *k == "preset") {
            cfg.set("preset", preset)?;
        }
        for (k, v) in self.overrides.iter().filter(|(k, _)| *k != "preset") {
            cfg.set(k, v).map_err(|e| Error::Config(format!("--{}: {e}", flag(k))))?;
        }
        Ok(cfg)
    }
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let num = |v: &str| {
        v.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad coverage {s:?}; use 0.4 or 0.3..0.5")))
    };
    match s.split_once("..") {
        Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
        None => num(s).map(|v| (v, v)),
    }
}

fn data_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(&cfg.data_dir))
}

fn seed_or_env(flag: Option<u64>, default: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => workflow::seed_override()?.unwrap_or(default),
    })
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, count, size, coverage, seed } => {
            let range = CloudRange { coverage: parse_range(&coverage)?, ..CloudRange::default() };
            let split = workflow::gen_data(&out, count, size, &range, seed_or_env(seed, 0)?)?;
            println!(
                "wrote {} pairs to {} (train {}, val {}, test {})",
                count,
                show(&out),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Cmd::Pretrain { data, out, config } => {
            let cfg = config.resolve()?;
            let outcome = workflow::pretrain(&cfg, &data_dir(&data, &cfg), &out)?;
            for (i, l) in outcome.losses.iter().enumerate() {
                println!("epoch {} loss {l:.6}", i + 1);
            }
            println!("wrote {} and {}", show(&out), show(&workflow::pretrain_loss_path(&out)));
        }
        Cmd::Finetune { data, init, out, config } => {
            let cfg = config.resolve()?;
            let init: Init = init.parse()?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let outcome = workflow::finetune_run(&cfg, &data_dir(&data, &cfg), &init, &out)?;
            for r in &outcome.history {
                println!(
                    "epoch {} mse {:.5} g_adv {:.4} d_loss {:.4} val_psnr {:.3} val_ssim {:.4}",
                    r.epoch, r.mse, r.g_adv, r.d_loss, r.val_psnr, r.val_ssim
                );
            }
            match outcome.best_epoch {
                Some(e) => println!("best epoch {e} (val psnr {:.3}); outputs in {}", outcome.best_val_psnr, show(&out)),
                None => println!("no epochs run; outputs in {}", show(&out)),
            }
        }
        Cmd::Eval { data, checkpoint, split, report, config } => {
            let cfg = config.resolve()?;
            let r = workflow::eval(&cfg, &data_dir(&data, &cfg), &checkpoint, &split, &report)?;
            println!("{:<10} {:>10} {:>8} {:>5}", "", "psnr", "ssim", "inf");
            for (name, m) in [("model", &r.model), ("baseline", &r.baseline)] {
                println!("{name:<10} {:>10.4} {:>8.4} {:>5}", m.mean_psnr, m.mean_ssim, m.inf_psnr_count);
            }
            let paths = workflow::report_paths(&report);
            println!("wrote {}", paths.iter().map(|p| show(p)).collect::<Vec<_>>().join(", "));
        }
        Cmd::Infer { checkpoint, input, out } => {
            let img = workflow::infer(&checkpoint, &input, &out)?;
            println!("wrote {}x{} image to {}", img.width, img.height, show(&out));
        }
        Cmd::GradCheck { preset, seed, coords, f64, corrupt } => {
            let generator = match preset.as_str() {
                "toy" => GeneratorConfig::toy(),
                "paper" => GeneratorConfig::paper(),
                other => return Err(Error::InvalidArgument(format!("unknown preset {other:?}; expected toy or paper"))),
            };
            let opts = GradCheckOptions {
                generator,
                seed: seed_or_env(seed, 0)?,
                coords_per_tensor: coords,
                analytic: if f64 { Precision::F64 } else { Precision::F32 },
                corrupt,
                ..GradCheckOptions::default()
            };
            let rows = run_grad_check(&opts)?;
            print!("{}", format_table(&rows));
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Verification(format!("gradient check failed for {}", failed.join(", "))));
            }
            println!("all {} checks passed", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
