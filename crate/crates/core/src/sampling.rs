//! Pixel selection for similarity matrices.
//!
//! Uniform sampling draws `n_pair` distinct pixels from the whole image.
//! Box-local sampling draws `n_box` square windows with independent, uniformly
//! random corners (windows may overlap) and `n_pair` distinct pixels inside each.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Uniform,
    BoxLocal,
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMode::Uniform => "uniform",
            SampleMode::BoxLocal => "box_local",
        })
    }
}

impl FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SampleMode::Uniform),
            "box_local" => Ok(SampleMode::BoxLocal),
            other => Err(Error::Config(format!("unknown sample mode `{other}` (uniform | box_local)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub mode: SampleMode,
    pub n_pair: usize,
    pub n_box: usize,
    pub crop_size: usize,
}

impl SampleSpec {
    pub fn uniform(n_pair: usize) -> Self {
        SampleSpec { mode: SampleMode::Uniform, n_pair, n_box: 1, crop_size: 0 }
    }

    pub fn box_local(n_box: usize, n_pair: usize, crop_size: usize) -> Self {
        SampleSpec { mode: SampleMode::BoxLocal, n_pair, n_box, crop_size }
    }

    /// Checks the spec against an `h`×`w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.n_pair < 1 {
            return Err(Error::Config("n_pair must be at least 1".into()));
        }
        match self.mode {
            SampleMode::Uniform if self.n_pair > h * w => {
                Err(Error::Config(format!("n_pair {} exceeds the {} pixels of a {h}x{w} image", self.n_pair, h * w)))
            }
            SampleMode::Uniform => Ok(()),
            SampleMode::BoxLocal => {
                if self.n_box < 1 {
                    return Err(Error::Config("n_box must be at least 1".into()));
                }
                if self.crop_size < 1 || self.crop_size > h.min(w) {
                    return Err(Error::Config(format!("crop_size {} must be in 1..={}", self.crop_size, h.min(w))));
                }
                if self.n_pair > self.crop_size * self.crop_size {
                    return Err(Error::Config(format!(
                        "n_pair {} exceeds the {} pixels of a {}x{} crop",
                        self.n_pair,
                        self.crop_size * self.crop_size,
                        self.crop_size,
                        self.crop_size
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<PixelSample> {
        match self.mode {
            SampleMode::Uniform => sample_uniform(h, w, self.n_pair, rng).map(PixelSample::Uniform),
            SampleMode::BoxLocal => {
                sample_box_local(h, w, self.n_box, self.n_pair, self.crop_size, rng).map(PixelSample::BoxLocal)
            }
        }
    }
}

/// An axis-aligned square window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Window {
    pub fn contains(&self, flat: usize, w: usize) -> bool {
        let (y, x) = (flat / w, flat % w);
        y >= self.top && y < self.top + self.size && x >= self.left && x < self.left + self.size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxSample {
    pub window: Window,
    pub indices: Vec<usize>,
}

/// Pixel indices drawn for one image in one step.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelSample {
    Uniform(Vec<usize>),
    BoxLocal(Vec<BoxSample>),
}

impl PixelSample {
    /// Index lists, one per similarity block.
    pub fn lists(&self) -> Vec<&[usize]> {
        match self {
            PixelSample::Uniform(v) => vec![v.as_slice()],
            PixelSample::BoxLocal(boxes) => boxes.iter().map(|b| b.indices.as_slice()).collect(),
        }
    }

    pub fn is_box_local(&self) -> bool {
        matches!(self, PixelSample::BoxLocal(_))
    }
}

/// `n_pair` distinct flat indices drawn uniformly without replacement.
pub fn sample_uniform<R: Rng + ?Sized>(h: usize, w: usize, n_pair: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_pair > h * w {
        return Err(Error::InvalidArgument(format!("cannot draw {n_pair} distinct pixels from {h}x{w}")));
    }
    Ok(index::sample(rng, h * w, n_pair).into_vec())
}

pub fn sample_box_local<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    n_box: usize,
    n_pair: usize,
    crop_size: usize,
    rng: &mut R,
) -> Result<Vec<BoxSample>> {
    if crop_size == 0 || crop_size > h.min(w) {
        return Err(Error::InvalidArgument(format!("crop size {crop_size} does not fit in {h}x{w}")));
    }
    if n_pair > crop_size * crop_size {
        return Err(Error::InvalidArgument(format!("cannot draw {n_pair} distinct pixels from a {crop_size}² crop")));
    }
    if n_box == 0 {
        return Err(Error::InvalidArgument("n_box must be at least 1".into()));
    }
    let mut boxes = Vec::with_capacity(n_box);
    for _ in 0..n_box {
        let top = rng.random_range(0..=h - crop_size);
        let left = rng.random_range(0..=w - crop_size);
        let indices = index::sample(rng, crop_size * crop_size, n_pair)
            .into_iter()
            .map(|k| (top + k / crop_size) * w + left + k % crop_size)
            .collect();
        boxes.push(BoxSample { window: Window { top, left, size: crop_size }, indices });
    }
    Ok(boxes)
}

/// Fraction of the `h`×`w` grid touched by the union of all index lists.
pub fn coverage_fraction<'a, I>(h: usize, w: usize, step_samples: I) -> f64
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut tracker = CoverageTracker::new(h, w);
    for s in step_samples {
        tracker.add(s);
    }
    tracker.fraction()
}

/// Incremental coverage map.
#[derive(Clone, Debug)]
pub struct CoverageTracker {
    h: usize,
    w: usize,
    hit: Vec<bool>,
    covered: usize,
}

impl CoverageTracker {
    pub fn new(h: usize, w: usize) -> Self {
        CoverageTracker { h, w, hit: vec![false; h * w], covered: 0 }
    }

    pub fn add(&mut self, indices: &[usize]) {
        for &i in indices {
            if let Some(slot) = self.hit.get_mut(i) {
                if !*slot {
                    *slot = true;
                    self.covered += 1;
                }
            }
        }
    }

    pub fn fraction(&self) -> f64 {
        self.covered as f64 / (self.h * self.w) as f64
    }

    pub fn mask(&self) -> &[bool] {
        &self.hit
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

/// Union coverage of `steps` independent uniform draws of `n_pair` pixels.
pub fn simulate_coverage(h: usize, w: usize, steps: usize, n_pair: usize, seed: u64) -> Result<CoverageTracker> {
    SampleSpec::uniform(n_pair).validate(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = CoverageTracker::new(h, w);
    for _ in 0..steps {
        tracker.add(&sample_uniform(h, w, n_pair, &mut rng)?);
    }
    Ok(tracker)
}

/// Errors if a list has repeated indices.
pub fn ensure_distinct(indices: &[usize]) -> Result<()> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if !seen.insert(i) {
            return Err(Error::InvalidArgument(format!("pixel index {i} sampled twice")));
        }
    }
    Ok(())
}
