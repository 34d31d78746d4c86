use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uda_consistency::autodiff::GradCheckOptions;
use uda_consistency::data::netpbm::{write_pgm, write_ppm};
use uda_consistency::data::Split;
use uda_consistency::diagnostics::{check_loss, LossCheck};
use uda_consistency::error::exit_code;
use uda_consistency::sampling::simulate_coverage;
use uda_consistency::train::experiment::resume_experiment;
use uda_consistency::train::seeds::{derive_seed, stream};
use uda_consistency::train::{run_ablation, run_experiment, AblationAxis, Checkpoint, ExperimentConfig, Trainer};
use uda_consistency::{Error, Result};

#[derive(Parser)]
#[command(name = "uda-cr", version, about = "Self-training domain adaptation with inter-pixel consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, checkpoint and report to the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. `--set lambda_c=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint's student and teacher on the target evaluation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep one ablation axis over several seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of the loss gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write sample source and target images with their label maps.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate pixel coverage of repeated uniform sampling.
    Coverage {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        npair: usize,
        /// Grid size as `HxW`.
        #[arg(long, default_value = "512x512")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the coverage mask as a PGM image.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        if !uda_consistency::train::config::KEYS.contains(&k.trim()) {
            return Err(Error::Config(format!("unknown key `{}`", k.trim())));
        }
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, resume, overrides } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let report = match resume {
                Some(path) => resume_experiment(&cfg, &Checkpoint::load(&path)?)?,
                None => run_experiment(&cfg)?,
            };
            print!("{}", report.to_text());
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(config.as_deref(), &[])?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(cfg, &ckpt)?;
            let e = trainer.evaluate()?;
            println!("step={}", trainer.step_count());
            println!("student_miou={:.4}", e.student.miou);
            println!("teacher_miou={:.4}", e.teacher.miou);
        }
        Command::Ablate { axis, seeds, config, overrides } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_config(config.as_deref(), &overrides)?;
            let report = run_ablation(axis, seeds, &cfg)?;
            let text = report.to_text();
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let path = cfg.out_dir.join(format!("ablation_{axis}.txt"));
            std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            print!("{text}");
        }
        Command::Gradcheck { loss, seed } => {
            let opts = GradCheckOptions { seed, max_elements: Some(64), ..GradCheckOptions::default() };
            for check in LossCheck::select(&loss)? {
                let report = check_loss(check, seed, &opts)?;
                println!("{check}: max relative error {:.3e}", report.max_rel_err());
            }
        }
        Command::GenData { out, config } => {
            let cfg = load_config(config.as_deref(), &[])?;
            let domains = cfg.domains();
            let maxval = (cfg.classes - 1) as u8;
            for (split, name, tag) in [(Split::Source, "source", stream::SOURCE), (Split::Target, "target", stream::TARGET)] {
                let dir = out.join(name);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for i in 0..cfg.export_count {
                    let sample = domains.sample(split, derive_seed(cfg.seed, &[stream::EXPORT, tag, i as u64]))?;
                    write_ppm(&dir.join(format!("{i}.img.ppm")), &sample.image)?;
                    write_pgm(&dir.join(format!("{i}.lbl.pgm")), &sample.labels, cfg.height, cfg.width, maxval)?;
                }
            }
            println!("wrote {} image pairs per domain to {}", cfg.export_count, out.display());
        }
        Command::Coverage { steps, npair, size, seed, mask } => {
            let (h, w) = parse_size(&size)?;
            let tracker = simulate_coverage(h, w, steps, npair, seed)?;
            println!("coverage={:.6}", tracker.fraction());
            if let Some(path) = mask {
                let values: Vec<u8> = tracker.mask().iter().map(|&m| if m { 255 } else { 0 }).collect();
                write_pgm(&path, &values, h, w, 255)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit_code::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
