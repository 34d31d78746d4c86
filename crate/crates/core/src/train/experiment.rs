use std::fs::OpenOptions;
use std::io::LineWriter;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::metrics::EvalMetrics;
use super::trainer::Trainer;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.crda";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub steps: u64,
    pub final_eval: EvalMetrics,
    pub band_violations: usize,
    pub out_dir: PathBuf,
}

fn iou_text(v: &[Option<f64>]) -> String {
    v.iter().map(|x| x.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))).collect::<Vec<_>>().join(",")
}

impl ExperimentReport {
    pub fn to_text(&self) -> String {
        let e = &self.final_eval;
        format!(
            "steps={}\nstudent_miou={:.4}\nstudent_iou={}\nteacher_miou={:.4}\nteacher_iou={}\nband_violations={}\n",
            self.steps,
            e.student.miou,
            iou_text(&e.student.per_class),
            e.teacher.miou,
            iou_text(&e.teacher.per_class),
            self.band_violations
        )
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains `config` from scratch, writing the config, a per-step metrics
/// stream, the final checkpoint and a summary into `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_with(config, None)
}

/// Continues a run from `checkpoint`, appending to its metrics stream.
pub fn resume_experiment(config: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<ExperimentReport> {
    run_with(config, Some(checkpoint))
}

fn run_with(config: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> Result<ExperimentReport> {
    config.validate()?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(checkpoint.is_some())
        .truncate(checkpoint.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut sink = LineWriter::new(file);

    let mut trainer = match checkpoint {
        Some(c) => Trainer::from_checkpoint(config.clone(), c)?,
        None => Trainer::new(config.clone())?,
    };
    log::info!("training {} iterations into {}", config.iterations, dir.display());
    let outcome = trainer.run_to_end(&mut sink)?;
    trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    let report = ExperimentReport {
        steps: trainer.step_count(),
        final_eval: outcome.final_eval,
        band_violations: outcome.band_violations,
        out_dir: dir.clone(),
    };
    write_file(&dir.join(REPORT_FILE), report.to_text().as_bytes())?;
    Ok(report)
}
