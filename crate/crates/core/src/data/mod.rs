//! Synthetic two-domain segmentation scenes.
//!
//! A scene is a background plus 1–4 non-overlapping shapes. Each foreground
//! class has a fixed shape kind and a fixed base color, so the source domain
//! (flat colors) and the target domain (hue-rotated, darker, textured, noisy)
//! share labels but differ in appearance.

mod augment;
pub mod netpbm;

pub use augment::{classmix, classmix_with_classes, color_jitter, composite, gaussian_blur, gaussian_kernel, hue_jitter, MixResult};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    /// Shape kind drawn for foreground class `class` (1-based).
    pub fn for_class(class: u8) -> Self {
        match (class as usize - 1) % 3 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDesc {
    pub kind: ShapeKind,
    pub class: u8,
    /// Center in pixel coordinates (x, y).
    pub center: (f64, f64),
    /// Radius for disks and circumradius for triangles; half-extents for rectangles.
    pub size: (f64, f64),
    pub base_color: [f32; 3],
}

impl ShapeDesc {
    fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Disk | ShapeKind::Triangle => self.size.0,
            ShapeKind::Rectangle => self.size.0.hypot(self.size.1),
        }
    }

    /// Whether the point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center;
        let (dx, dy) = (x - cx, y - cy);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.size.0 * self.size.0,
            ShapeKind::Rectangle => dx.abs() <= self.size.0 && dy.abs() <= self.size.1,
            ShapeKind::Triangle => {
                let r = self.size.0;
                let s3 = 3f64.sqrt();
                // upward-pointing equilateral triangle with circumradius r
                let v = [(0.0, -r), (-r * s3 / 2.0, r / 2.0), (r * s3 / 2.0, r / 2.0)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0) || (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
            }
        }
    }
}

/// Label map plus the shapes that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub h: usize,
    pub w: usize,
    pub c_classes: usize,
    pub labels: Vec<u8>,
    pub shapes: Vec<ShapeDesc>,
}

/// Base colors: index 0 is the background, classes `1..C` are spread evenly in hue.
pub fn palette(c_classes: usize) -> Vec<[f32; 3]> {
    let mut colors = vec![[0.5, 0.5, 0.5]];
    let fg = c_classes.saturating_sub(1).max(1);
    for k in 0..c_classes.saturating_sub(1) {
        colors.push(hsv_to_rgb(k as f64 * 360.0 / fg as f64, 0.7, 0.85));
    }
    colors
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = hue.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Places 1–4 non-overlapping shapes with random classes.
pub fn generate_scene<R: Rng + ?Sized>(c_classes: usize, h: usize, w: usize, rng: &mut R) -> Result<Scene> {
    if c_classes < 2 {
        return Err(Error::InvalidArgument(format!("a scene needs at least two classes, got {c_classes}")));
    }
    let extent = h.min(w) as f64;
    if extent < 8.0 {
        return Err(Error::InvalidArgument(format!("scene of {h}x{w} is too small")));
    }
    let colors = palette(c_classes);
    let target = rng.random_range(1..=4usize);
    let mut shapes: Vec<ShapeDesc> = Vec::with_capacity(target);
    let mut attempts = 0;
    while shapes.len() < target && attempts < 200 {
        attempts += 1;
        let class = rng.random_range(1..c_classes as u8);
        let kind = ShapeKind::for_class(class);
        let major = rng.random_range(0.12 * extent..0.25 * extent);
        let size = match kind {
            ShapeKind::Rectangle => (major, major * rng.random_range(0.5..1.0)),
            _ => (major, major),
        };
        let mut shape = ShapeDesc { kind, class, center: (0.0, 0.0), size, base_color: colors[class as usize] };
        let r = shape.bounding_radius();
        if 2.0 * r >= extent {
            continue;
        }
        shape.center = (rng.random_range(r..w as f64 - r), rng.random_range(r..h as f64 - r));
        let clear = shapes.iter().all(|o| {
            let d = (o.center.0 - shape.center.0).hypot(o.center.1 - shape.center.1);
            d > o.bounding_radius() + r + 1.0
        });
        if clear {
            shapes.push(shape);
        }
    }

    let mut labels = vec![0u8; h * w];
    for s in &shapes {
        for y in 0..h {
            for x in 0..w {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * w + x] = s.class;
                }
            }
        }
    }
    if labels.iter().all(|&l| l == 0) {
        // every placed shape was too thin to cover a pixel center; fall back to
        // a disk in the middle
        let r = 0.2 * extent;
        let s = ShapeDesc {
            kind: ShapeKind::Disk,
            class: 1,
            center: (w as f64 / 2.0, h as f64 / 2.0),
            size: (r, r),
            base_color: colors[1],
        };
        for y in 0..h {
            for x in 0..w {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * w + x] = 1;
                }
            }
        }
        shapes = vec![s];
    }
    Ok(Scene { h, w, c_classes, labels, shapes })
}

/// Appearance transform applied when rendering a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    /// Rotation about the gray axis, in degrees.
    pub hue_shift: f64,
    /// Added to every channel.
    pub brightness: f64,
    /// Scales deviations from mid-gray.
    pub contrast: f64,
    /// Standard deviation of per-channel Gaussian noise.
    pub noise_sigma: f64,
    /// Amplitude of a sinusoidal luminance texture.
    pub texture_amplitude: f64,
    pub blur_sigma: f64,
}

impl DomainStyle {
    pub fn identity() -> Self {
        DomainStyle { hue_shift: 0.0, brightness: 0.0, contrast: 1.0, noise_sigma: 0.0, texture_amplitude: 0.0, blur_sigma: 0.0 }
    }

    /// Default target-domain shift.
    pub fn default_target() -> Self {
        DomainStyle { hue_shift: 40.0, brightness: -0.1, contrast: 1.0, noise_sigma: 0.05, texture_amplitude: 0.1, blur_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.hue_shift.abs() <= 180.0
            && self.brightness.abs() <= 0.5
            && (0.0..=3.0).contains(&self.contrast)
            && (0.0..=0.5).contains(&self.noise_sigma)
            && (0.0..=0.5).contains(&self.texture_amplitude)
            && (0.0..=5.0).contains(&self.blur_sigma);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("domain style outside safe ranges: {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Deterministic color transform (hue, contrast, brightness) of one RGB value, unclamped.
    pub fn transform_color(&self, rgb: [f32; 3]) -> [f32; 3] {
        let m = hue_rotation(self.hue_shift);
        let mut out = [0f32; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let rotated: f64 = (0..3).map(|j| m[i][j] * rgb[j] as f64).sum();
            *o = ((rotated - 0.5) * self.contrast + 0.5 + self.brightness) as f32;
        }
        out
    }
}

/// Rotation by `deg` about the (1, 1, 1) axis of RGB space.
pub(crate) fn hue_rotation(deg: f64) -> [[f64; 3]; 3] {
    if deg == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let (s, c) = deg.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

/// Renders `scene` as a `[3, H, W]` image in `[0, 1]`.
pub fn render<R: Rng + ?Sized>(scene: &Scene, style: &DomainStyle, rng: &mut R) -> Result<Tensor<f32>> {
    let (h, w) = (scene.h, scene.w);
    let hw = h * w;
    let colors = palette(scene.c_classes);
    let mut img = vec![0f32; 3 * hw];
    for (p, &k) in scene.labels.iter().enumerate() {
        for ch in 0..3 {
            img[ch * hw + p] = colors[k as usize][ch];
        }
    }
    if style.is_identity() {
        return Tensor::new(&[3, h, w], img);
    }

    if style.texture_amplitude > 0.0 {
        let period = rng.random_range(4.0..10.0f64);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (fy, fx) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let t = (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / period + phase).sin();
                let delta = (style.texture_amplitude * t) as f32;
                for ch in 0..3 {
                    img[ch * hw + y * w + x] += delta;
                }
            }
        }
    }

    for p in 0..hw {
        let rgb = style.transform_color([img[p], img[hw + p], img[2 * hw + p]]);
        for ch in 0..3 {
            img[ch * hw + p] = rgb[ch];
        }
    }

    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).expect("valid sigma");
        for v in img.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }

    let mut out = Tensor::new(&[3, h, w], img)?;
    if style.blur_sigma > 0.0 {
        out = gaussian_blur(&out, style.blur_sigma)?;
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// An image with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Generator for paired source and target images.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomains {
    pub c_classes: usize,
    pub h: usize,
    pub w: usize,
    pub source: DomainStyle,
    pub target: DomainStyle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
}

impl SyntheticDomains {
    /// Scene geometry and rendering noise both derive from `seed`.
    pub fn sample(&self, split: Split, seed: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(self.c_classes, self.h, self.w, &mut rng)?;
        let style = match split {
            Split::Source => &self.source,
            Split::Target => &self.target,
        };
        let image = render(&scene, style, &mut rng)?;
        Ok(Sample { image, labels: scene.labels })
    }
}
