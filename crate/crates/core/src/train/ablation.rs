//! One-axis sweeps over the consistency term's pair count, box crop size and
//! similarity measure.

use std::fmt;
use std::str::FromStr;

use super::config::{ExperimentConfig, TrainMode};
use super::seeds::{derive_seed, stream};
use super::trainer::Trainer;
use crate::error::{Error, Result};
use crate::losses::Measure;
use crate::sampling::{SampleMode, SampleSpec};

pub const NPAIR_VALUES: [usize; 6] = [4, 16, 64, 256, 512, 1024];
pub const BOX_N_BOX: usize = 32;
pub const BOX_N_PAIR: usize = 16;
/// Crop sizes as divisors of the image height.
pub const BOX_CROP_DIVISORS: [usize; 3] = [2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    NPair,
    Box,
    Measure,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::NPair => "npair",
            AblationAxis::Box => "box",
            AblationAxis::Measure => "measure",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "npair" => Ok(AblationAxis::NPair),
            "box" => Ok(AblationAxis::Box),
            "measure" => Ok(AblationAxis::Measure),
            other => Err(Error::Config(format!("unknown ablation axis `{other}` (npair | box | measure)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    /// The swept value as text: a pair count, a crop size or a measure name.
    pub value: String,
    pub config: ExperimentConfig,
}

/// Cell configurations for `axis`, each a copy of `base` with the swept
/// setting replaced. Consistency training is always on.
pub fn cells(axis: AblationAxis, base: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    let mut base = base.clone();
    base.mode = TrainMode::Uda;
    let cells: Vec<AblationCell> = match axis {
        AblationAxis::NPair => NPAIR_VALUES
            .iter()
            .map(|&n| AblationCell {
                value: n.to_string(),
                config: ExperimentConfig { sample: SampleSpec::uniform(n), ..base.clone() },
            })
            .collect(),
        AblationAxis::Box => BOX_CROP_DIVISORS
            .iter()
            .map(|&d| {
                let crop = base.height.min(base.width) / d;
                AblationCell {
                    value: crop.to_string(),
                    config: ExperimentConfig {
                        sample: SampleSpec::box_local(BOX_N_BOX, BOX_N_PAIR, crop),
                        ..base.clone()
                    },
                }
            })
            .collect(),
        AblationAxis::Measure => Measure::ALL
            .iter()
            .map(|&m| AblationCell {
                value: m.to_string(),
                config: ExperimentConfig { measure: m, lambda_c: m.default_lambda(), ..base.clone() },
            })
            .collect(),
    };
    for cell in &cells {
        cell.config
            .validate()
            .map_err(|e| Error::Config(format!("ablation cell {}={}: {e}", axis, cell.value)))?;
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub value: String,
    pub measure: Measure,
    pub lambda_c: f64,
    pub sample: SampleSpec,
    pub seeds: Vec<u64>,
    pub student_miou: Vec<f64>,
    pub teacher_miou: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl CellResult {
    pub fn mean_miou(&self) -> f64 {
        mean(&self.student_miou)
    }

    pub fn std_miou(&self) -> f64 {
        let m = self.mean_miou();
        (self.student_miou.iter().map(|x| (x - m).powi(2)).sum::<f64>() / self.student_miou.len() as f64).sqrt()
    }

    pub fn mean_teacher_miou(&self) -> f64 {
        mean(&self.teacher_miou)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub cells: Vec<CellResult>,
}

/// Seed of replicate `replicate` in cell `cell`.
pub fn cell_seed(base_seed: u64, cell: usize, replicate: usize) -> u64 {
    derive_seed(base_seed, &[stream::ABLATION, cell as u64, replicate as u64])
}

/// Trains `replicates` runs per cell and collects final target mIoU.
pub fn run_ablation(axis: AblationAxis, replicates: usize, base: &ExperimentConfig) -> Result<AblationReport> {
    if replicates == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut results = Vec::new();
    for (i, cell) in cells(axis, base)?.into_iter().enumerate() {
        let mut result = CellResult {
            value: cell.value.clone(),
            measure: cell.config.measure,
            lambda_c: cell.config.lambda_c,
            sample: cell.config.sample.clone(),
            seeds: Vec::new(),
            student_miou: Vec::new(),
            teacher_miou: Vec::new(),
        };
        for r in 0..replicates {
            let seed = cell_seed(base.seed, i, r);
            let config = ExperimentConfig { seed, eval_interval: cell.config.iterations, ..cell.config.clone() };
            let mut trainer = Trainer::new(config)?;
            let outcome = trainer.run_to_end(&mut std::io::sink())?;
            log::info!(
                "{axis}={} seed {seed}: student mIoU {:.4}, teacher mIoU {:.4}",
                cell.value,
                outcome.final_eval.student.miou,
                outcome.final_eval.teacher.miou
            );
            result.seeds.push(seed);
            result.student_miou.push(outcome.final_eval.student.miou);
            result.teacher_miou.push(outcome.final_eval.teacher.miou);
        }
        results.push(result);
    }
    Ok(AblationReport { axis, cells: results })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl AblationReport {
    /// A header line followed by one line per cell.
    pub fn to_text(&self) -> String {
        let mut out = format!("axis={} cells={}\n", self.axis, self.cells.len());
        for c in &self.cells {
            out.push_str(&format!(
                "value={} measure={} lambda_c={} sample_mode={} n_pair={} n_box={} crop_size={} mean_miou={} std_miou={} mean_teacher_miou={} seeds={} miou={} teacher_miou={}\n",
                c.value,
                c.measure,
                c.lambda_c,
                c.sample.mode,
                c.sample.n_pair,
                c.sample.n_box,
                c.sample.crop_size,
                c.mean_miou(),
                c.std_miou(),
                c.mean_teacher_miou(),
                join(&c.seeds),
                join(&c.student_miou),
                join(&c.teacher_miou),
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("ablation report: {what}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = fields(lines.next().ok_or_else(|| bad("empty"))?)?;
        let axis: AblationAxis = lookup(&header, "axis")?.parse()?;
        let count: usize = lookup(&header, "cells")?.parse().map_err(|_| bad("bad cell count"))?;
        let mut cells = Vec::new();
        for line in lines {
            let f = fields(line)?;
            let num = |k: &str| -> Result<usize> { lookup(&f, k)?.parse().map_err(|_| bad(k)) };
            let list_f64 = |k: &str| -> Result<Vec<f64>> {
                lookup(&f, k)?.split(',').map(|v| v.parse().map_err(|_| bad(k))).collect()
            };
            let mode: SampleMode = lookup(&f, "sample_mode")?.parse()?;
            cells.push(CellResult {
                value: lookup(&f, "value")?.to_string(),
                measure: lookup(&f, "measure")?.parse()?,
                lambda_c: lookup(&f, "lambda_c")?.parse().map_err(|_| bad("lambda_c"))?,
                sample: SampleSpec { mode, n_pair: num("n_pair")?, n_box: num("n_box")?, crop_size: num("crop_size")? },
                seeds: lookup(&f, "seeds")?.split(',').map(|v| v.parse().map_err(|_| bad("seeds"))).collect::<Result<_>>()?,
                student_miou: list_f64("miou")?,
                teacher_miou: list_f64("teacher_miou")?,
            });
        }
        if cells.len() != count {
            return Err(bad(&format!("header announces {count} cells, found {}", cells.len())));
        }
        Ok(AblationReport { axis, cells })
    }
}

fn fields(line: &str) -> Result<Vec<(&str, &str)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("ablation report: malformed field `{tok}`")))
        })
        .collect()
}

fn lookup<'a>(fields: &[(&str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::InvalidArgument(format!("ablation report: missing `{key}`")))
}
