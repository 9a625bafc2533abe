use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fspfm_core::checkpoint::{Checkpoint, Stage};
use fspfm_core::config::Config;
use fspfm_core::error::{Error, Result};
use fspfm_core::eval::{render_ablation_report, render_verification_report};
use fspfm_core::gradcheck;
use fspfm_core::manifest::{guard_overwrite, write_atomic, RunManifest};
use fspfm_core::pipeline;
use fspfm_core::synth::{load_dataset, make_dataset, make_finetune_pairs, save_dataset, PROFILE_MIN_ANGLE};
use fspfm_core::train;

#[derive(Parser)]
#[command(name = "fspfm", about = "feature-space pose frontalization pipeline")]
struct Cli {
    /// Line-oriented "key = value" configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Allow replacing existing artifacts.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and evaluation datasets.
    GenData,
    /// Stage-1 pre-training of extractor + frontalization + head.
    Pretrain,
    /// Stage-2 pair-wise fine-tuning from the stage-1 checkpoint.
    Finetune,
    /// 10-fold verification of the latest checkpoint on both splits.
    Eval,
    /// Train and evaluate all five ablation arms.
    Ablate,
    /// Finite-difference checks for every trainable composite.
    Gradcheck,
}

fn log_level() -> u8 {
    match std::env::var("FSPFM_LOG").as_deref() {
        Ok("debug") => 2,
        Ok("info") => 1,
        _ => 0,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= 1 {
            eprintln!("[info] {}", format!($($arg)*));
        }
    };
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::parse_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data_seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn train_data_path(out: &Path) -> PathBuf {
    out.join("train.fspfm-data")
}

fn eval_data_path(out: &Path) -> PathBuf {
    out.join("eval.fspfm-data")
}

fn stage1_path(out: &Path) -> PathBuf {
    out.join("stage1.ckpt")
}

fn stage2_path(out: &Path) -> PathBuf {
    out.join("stage2.ckpt")
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "missing {} (run `fspfm {produced_by}` first)",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let manifest = RunManifest::open(&cli.out)?;
    match cli.command {
        Command::GenData => {
            let train_path = train_data_path(&cli.out);
            let eval_path = eval_data_path(&cli.out);
            guard_overwrite(&train_path, cli.overwrite)?;
            guard_overwrite(&eval_path, cli.overwrite)?;
            info!("generating datasets (seed {})", cfg.data_seed);
            let train = make_dataset(&cfg.train_spec())?;
            let eval_data = make_dataset(&cfg.eval_spec())?;
            save_dataset(&train, &train_path)?;
            save_dataset(&eval_data, &eval_path)?;
            manifest.record("gen-data", "ok", Some(&train_path))?;
            manifest.record("gen-data", "ok", Some(&eval_path))?;
            println!("wrote {} and {}", train_path.display(), eval_path.display());
        }
        Command::Pretrain => {
            let data_path = train_data_path(&cli.out);
            require(&data_path, "gen-data")?;
            let out_path = stage1_path(&cli.out);
            guard_overwrite(&out_path, cli.overwrite)?;
            let dataset = load_dataset(&data_path)?;
            info!("pre-training for {} epochs", cfg.stage1_epochs);
            let (ckpt, log) = train::pretrain(&dataset, &cfg, train::PretrainOptions::default())?;
            ckpt.save(&out_path)?;
            manifest.record("pretrain", "ok", Some(&out_path))?;
            println!(
                "stage-1 done: epoch loss {:.4} -> {:.4}, wrote {}",
                log.epoch_total.first().unwrap_or(&f64::NAN),
                log.epoch_total.last().unwrap_or(&f64::NAN),
                out_path.display()
            );
        }
        Command::Finetune => {
            let data_path = train_data_path(&cli.out);
            require(&data_path, "gen-data")?;
            let s1 = stage1_path(&cli.out);
            require(&s1, "pretrain")?;
            let out_path = stage2_path(&cli.out);
            guard_overwrite(&out_path, cli.overwrite)?;
            let dataset = load_dataset(&data_path)?;
            let ckpt = Checkpoint::load(&s1)?;
            let store = train::clone_nets(&ckpt, &cfg)?;
            let pairs = make_finetune_pairs(&dataset, PROFILE_MIN_ANGLE)?;
            info!("fine-tuning on {} pairs for {} epochs", pairs.pairs.len(), cfg.stage2_epochs);
            let (ckpt, log) =
                train::finetune(store, &dataset, &pairs, &cfg, train::FinetuneOptions::default())?;
            ckpt.save(&out_path)?;
            manifest.record("finetune", "ok", Some(&out_path))?;
            println!(
                "stage-2 done: adaptation loss {:.4} -> {:.4}, wrote {}",
                log.epoch_ada.first().unwrap_or(&f64::NAN),
                log.epoch_ada.last().unwrap_or(&f64::NAN),
                out_path.display()
            );
        }
        Command::Eval => {
            let eval_path = eval_data_path(&cli.out);
            require(&eval_path, "gen-data")?;
            let (ckpt_path, _stage) = if stage2_path(&cli.out).exists() {
                (stage2_path(&cli.out), Stage::Finetune)
            } else {
                let s1 = stage1_path(&cli.out);
                require(&s1, "pretrain")?;
                (s1, Stage::Pretrain)
            };
            let report_path = cli.out.join("eval_report.txt");
            guard_overwrite(&report_path, cli.overwrite)?;
            let eval_data = load_dataset(&eval_path)?;
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let use_fspfm = ckpt.meta.fspfm_enabled;
            let (frontal, cross) =
                pipeline::evaluate_checkpoint(&ckpt, &eval_data, &cfg, use_fspfm)?;
            let mut report = format!(
                "checkpoint = {}\nstage = {:?}\n",
                ckpt_path.display(),
                ckpt.meta.stage
            );
            report.push_str(&render_verification_report(&[frontal.clone(), cross.clone()]));
            write_atomic(&report_path, report.as_bytes())?;
            manifest.record("eval", "ok", Some(&report_path))?;
            println!(
                "frontal accuracy {:.4}, cross-pose accuracy {:.4} ({})",
                frontal.mean_accuracy,
                cross.mean_accuracy,
                report_path.display()
            );
        }
        Command::Ablate => {
            let report_path = cli.out.join("ablation_report.txt");
            guard_overwrite(&report_path, cli.overwrite)?;
            let mut rows = Vec::new();
            for result in pipeline::run_ablation(&cfg)? {
                let arm_path = cli
                    .out
                    .join(format!("arm_{}.ckpt", result.arm.name().replace('+', "")));
                guard_overwrite(&arm_path, cli.overwrite)?;
                result.checkpoint.save(&arm_path)?;
                manifest.record("ablate", "ok", Some(&arm_path))?;
                info!(
                    "{}: frontal {:.4}, cross-pose {:.4}",
                    result.arm.name(),
                    result.frontal.mean_accuracy,
                    result.cross_pose.mean_accuracy
                );
                rows.push(result.row());
            }
            let report = render_ablation_report(&rows);
            write_atomic(&report_path, report.as_bytes())?;
            manifest.record("ablate", "ok", Some(&report_path))?;
            print!("{report}");
        }
        Command::Gradcheck => {
            let reports = gradcheck::gradcheck_all(cfg.seed)?;
            print!("{}", gradcheck::render_report(&reports));
            if let Some(worst) = reports.iter().find(|r| !r.passed()) {
                return Err(Error::Numeric(format!(
                    "gradient check failed for composite '{}' (rel err {:.3e})",
                    worst.name, worst.max_rel_err
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
