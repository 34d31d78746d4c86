use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Random brightness, contrast and saturation perturbation of a `[3, H, W]` image.
///
/// Offsets are bounded by `strength`: brightness `±0.25·s`, contrast and
/// saturation factors in `1 ± 0.5·s`. Geometry is untouched.
pub fn color_jitter<R: Rng + ?Sized>(image: &Tensor<f32>, strength: f64, rng: &mut R) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("jitter strength {strength} outside [0, 1]")));
    }
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("color_jitter", format!("expected 3 channels, got {c}")));
    }
    let u: [f64; 3] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    if strength == 0.0 {
        return Ok(image.clone());
    }
    let brightness = (0.25 * strength * u[0]) as f32;
    let contrast = (1.0 + 0.5 * strength * u[1]) as f32;
    let saturation = (1.0 + 0.5 * strength * u[2]) as f32;

    let hw = h * w;
    let d = image.data();
    let luma = |p: usize| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p];
    let mean_luma = (0..hw).map(luma).sum::<f32>() / hw as f32;
    let mut out = vec![0f32; 3 * hw];
    for p in 0..hw {
        let gray = luma(p);
        for ch in 0..3 {
            let saturated = gray + (d[ch * hw + p] - gray) * saturation;
            let contrasted = (saturated - mean_luma) * contrast + mean_luma;
            out[ch * hw + p] = (contrasted + brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Normalized discrete Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Rotates every pixel about the gray axis by an angle drawn uniformly from
/// `[-max_degrees, max_degrees]`.
pub fn hue_jitter<R: Rng + ?Sized>(image: &Tensor<f32>, max_degrees: f64, rng: &mut R) -> Result<Tensor<f32>> {
    if !(0.0..=180.0).contains(&max_degrees) {
        return Err(Error::InvalidArgument(format!("hue jitter {max_degrees} outside [0, 180] degrees")));
    }
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("hue_jitter", format!("expected 3 channels, got {c}")));
    }
    let angle = rng.random_range(-1.0..=1.0) * max_degrees;
    if max_degrees == 0.0 {
        return Ok(image.clone());
    }
    let m = super::hue_rotation(angle);
    let hw = h * w;
    let d = image.data();
    let mut out = vec![0f32; 3 * hw];
    for p in 0..hw {
        for (i, row) in m.iter().enumerate() {
            let v: f64 = (0..3).map(|j| row[j] * d[j * hw + p] as f64).sum();
            out[i * hw + p] = (v as f32).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Separable Gaussian blur with edge replication, applied per channel.
pub fn gaussian_blur<T: Real>(image: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (c, h, w) = image.chw()?;
    let taps: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::of).collect();
    let r = (taps.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![T::zero(); src.len()];
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let sx = clampi(x as isize + k as isize - r, w);
                    acc = acc + t * src[base + y * w + sx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let sy = clampi(y as isize + k as isize - r, h);
                    acc = acc + t * tmp[base + sy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// `mask ? a : b` per pixel, for `[C, H, W]` tensors of any channel count.
pub fn composite<T: Real>(mask: &[bool], a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("composite", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.chw()?;
    let hw = h * w;
    if mask.len() != hw {
        return Err(Error::shape("composite", format!("mask has {} entries for {hw} pixels", mask.len())));
    }
    let data = (0..c * hw).map(|i| if mask[i % hw] { a.data()[i] } else { b.data()[i] }).collect();
    Tensor::new(&[c, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    /// `true` where the pixel was pasted from `a`.
    pub mask: Vec<bool>,
    pub selected: Vec<u8>,
}

/// Pastes the pixels of `⌈K/2⌉` randomly chosen classes of `labels_a`
/// (out of the `K` present) onto `image_b`, compositing labels the same way.
pub fn classmix<R: Rng + ?Sized>(
    image_a: &Tensor<f32>,
    labels_a: &[u8],
    image_b: &Tensor<f32>,
    labels_b: &[u8],
    rng: &mut R,
) -> Result<MixResult> {
    let present: Vec<u8> = labels_a.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("classmix: empty label map".into()));
    }
    let k = present.len();
    let mut picks = index::sample(rng, k, k.div_ceil(2)).into_vec();
    picks.sort_unstable();
    let selected: Vec<u8> = picks.into_iter().map(|i| present[i]).collect();
    classmix_with_classes(image_a, labels_a, image_b, labels_b, &selected)
}

/// ClassMix with an explicit set of pasted classes.
pub fn classmix_with_classes(
    image_a: &Tensor<f32>,
    labels_a: &[u8],
    image_b: &Tensor<f32>,
    labels_b: &[u8],
    selected: &[u8],
) -> Result<MixResult> {
    if image_a.shape() != image_b.shape() {
        return Err(Error::shape("classmix", format!("images {:?} vs {:?}", image_a.shape(), image_b.shape())));
    }
    let (_, h, w) = image_a.chw()?;
    if labels_a.len() != h * w || labels_b.len() != h * w {
        return Err(Error::shape(
            "classmix",
            format!("label maps {} and {} for {h}x{w} images", labels_a.len(), labels_b.len()),
        ));
    }
    let mask: Vec<bool> = labels_a.iter().map(|l| selected.contains(l)).collect();
    let labels = mask.iter().zip(labels_a.iter().zip(labels_b)).map(|(&m, (&a, &b))| if m { a } else { b }).collect();
    let image = composite(&mask, image_a, image_b)?;
    Ok(MixResult { image, labels, mask, selected: selected.to_vec() })
}
