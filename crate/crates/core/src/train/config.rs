//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors, and every key has a default (see [`ExperimentConfig::default`]).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{DomainStyle, SyntheticDomains};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Measure};
use crate::sampling::{SampleMode, SampleSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Source supervision plus self-training (and consistency when `lambda_c > 0`).
    Uda,
    /// Source supervision only.
    SourceOnly,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Uda => "uda",
            TrainMode::SourceOnly => "source_only",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uda" => Ok(TrainMode::Uda),
            "source_only" => Ok(TrainMode::SourceOnly),
            other => Err(Error::Config(format!("unknown mode `{other}` (uda | source_only)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub mode: TrainMode,
    pub alpha: f64,
    pub tau: f64,
    pub lambda_c: f64,
    pub measure: Measure,
    pub sample: SampleSpec,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub jitter_strength: f64,
    /// Largest hue rotation of the student input, in degrees.
    pub jitter_hue: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub classmix: bool,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub eval_interval: u64,
    pub eval_size: usize,
    pub eval_seed: u64,
    pub export_count: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            height: 32,
            width: 32,
            classes: 4,
            batch_size: 2,
            iterations: 2000,
            mode: TrainMode::Uda,
            alpha: 0.99,
            tau: 0.968,
            lambda_c: 1.0,
            measure: Measure::Cosine,
            sample: SampleSpec { mode: SampleMode::Uniform, n_pair: 32, n_box: 32, crop_size: 16 },
            lr: 1e-3,
            weight_decay: 0.01,
            warmup: 150,
            jitter_strength: 0.2,
            jitter_hue: 45.0,
            blur_prob: 0.5,
            blur_sigma_max: 1.15,
            classmix: true,
            source_style: DomainStyle::identity(),
            target_style: DomainStyle::default_target(),
            eval_interval: 500,
            eval_size: 32,
            eval_seed: 12_345,
            export_count: 8,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "height",
    "width",
    "classes",
    "batch_size",
    "iterations",
    "mode",
    "alpha",
    "tau",
    "lambda_c",
    "measure",
    "sample_mode",
    "n_pair",
    "n_box",
    "crop_size",
    "lr",
    "weight_decay",
    "warmup",
    "jitter_strength",
    "jitter_hue",
    "blur_prob",
    "blur_sigma_max",
    "classmix",
    "source_hue_shift",
    "source_brightness",
    "source_contrast",
    "source_noise",
    "source_texture",
    "source_blur",
    "target_hue_shift",
    "target_brightness",
    "target_contrast",
    "target_noise",
    "target_texture",
    "target_blur",
    "eval_interval",
    "eval_size",
    "eval_seed",
    "export_count",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn style_field<'a>(style: &'a mut DomainStyle, field: &str) -> &'a mut f64 {
    match field {
        "hue_shift" => &mut style.hue_shift,
        "brightness" => &mut style.brightness,
        "contrast" => &mut style.contrast,
        "noise" => &mut style.noise_sigma,
        "texture" => &mut style.texture_amplitude,
        "blur" => &mut style.blur_sigma,
        _ => unreachable!("style keys are checked against KEYS"),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "alpha" => self.alpha = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "measure" => self.measure = value.parse()?,
            "sample_mode" => self.sample.mode = value.parse()?,
            "n_pair" => self.sample.n_pair = parse(key, value)?,
            "n_box" => self.sample.n_box = parse(key, value)?,
            "crop_size" => self.sample.crop_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "jitter_strength" => self.jitter_strength = parse(key, value)?,
            "jitter_hue" => self.jitter_hue = parse(key, value)?,
            "blur_prob" => self.blur_prob = parse(key, value)?,
            "blur_sigma_max" => self.blur_sigma_max = parse(key, value)?,
            "classmix" => self.classmix = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "export_count" => self.export_count = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            k if k.starts_with("source_") => *style_field(&mut self.source_style, &k[7..]) = parse(key, value)?,
            k if k.starts_with("target_") => *style_field(&mut self.target_style, &k[7..]) = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.height < 8 || self.width < 8 {
            return fail(format!("image must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.classes < 2 || self.classes > 255 {
            return fail(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if self.iterations < 1 {
            return fail("iterations must be at least 1".into());
        }
        if self.iterations <= self.warmup {
            return fail(format!("iterations ({}) must exceed warmup ({})", self.iterations, self.warmup));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        LossWeights::new(self.lambda_c, self.tau, self.measure)?;
        self.sample.validate(self.height, self.width)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return fail(format!("weight_decay must lie in [0, 1), got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return fail(format!("jitter_strength must lie in [0, 1], got {}", self.jitter_strength));
        }
        if !(0.0..=180.0).contains(&self.jitter_hue) {
            return fail(format!("jitter_hue must lie in [0, 180] degrees, got {}", self.jitter_hue));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return fail(format!("blur_prob must lie in [0, 1], got {}", self.blur_prob));
        }
        if !(0.15..=5.0).contains(&self.blur_sigma_max) {
            return fail(format!("blur_sigma_max must lie in [0.15, 5], got {}", self.blur_sigma_max));
        }
        self.source_style.validate()?;
        self.target_style.validate()?;
        if self.eval_interval < 1 {
            return fail("eval_interval must be at least 1".into());
        }
        if self.eval_size < 1 {
            return fail("eval_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_c: self.lambda_c, tau: self.tau, measure: self.measure }
    }

    pub fn domains(&self) -> SyntheticDomains {
        SyntheticDomains {
            c_classes: self.classes,
            h: self.height,
            w: self.width,
            source: self.source_style.clone(),
            target: self.target_style.clone(),
        }
    }

    fn value_of(&self, key: &str) -> String {
        let s = &self.source_style;
        let t = &self.target_style;
        match key {
            "seed" => self.seed.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "classes" => self.classes.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "iterations" => self.iterations.to_string(),
            "mode" => self.mode.to_string(),
            "alpha" => self.alpha.to_string(),
            "tau" => self.tau.to_string(),
            "lambda_c" => self.lambda_c.to_string(),
            "measure" => self.measure.to_string(),
            "sample_mode" => self.sample.mode.to_string(),
            "n_pair" => self.sample.n_pair.to_string(),
            "n_box" => self.sample.n_box.to_string(),
            "crop_size" => self.sample.crop_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup" => self.warmup.to_string(),
            "jitter_strength" => self.jitter_strength.to_string(),
            "jitter_hue" => self.jitter_hue.to_string(),
            "blur_prob" => self.blur_prob.to_string(),
            "blur_sigma_max" => self.blur_sigma_max.to_string(),
            "classmix" => self.classmix.to_string(),
            "source_hue_shift" => s.hue_shift.to_string(),
            "source_brightness" => s.brightness.to_string(),
            "source_contrast" => s.contrast.to_string(),
            "source_noise" => s.noise_sigma.to_string(),
            "source_texture" => s.texture_amplitude.to_string(),
            "source_blur" => s.blur_sigma.to_string(),
            "target_hue_shift" => t.hue_shift.to_string(),
            "target_brightness" => t.brightness.to_string(),
            "target_contrast" => t.contrast.to_string(),
            "target_noise" => t.noise_sigma.to_string(),
            "target_texture" => t.texture_amplitude.to_string(),
            "target_blur" => t.blur_sigma.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_size" => self.eval_size.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "export_count" => self.export_count.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!(),
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    /// Hash of every setting except `out_dir`, stored in checkpoints.
    pub fn config_hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        for k in KEYS.iter().filter(|&&k| k != "out_dir") {
            hasher.update(format!("{k}={}\n", self.value_of(k)).as_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
