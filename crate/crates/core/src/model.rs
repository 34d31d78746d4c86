//! A fixed three-layer convolutional per-pixel classifier.
//!
//! `conv3x3(C_in→16) → relu → conv3x3(16→16) → relu → conv3x3(16→C)`, zero
//! padded so logits come out at input resolution. There are no normalization
//! layers, so the teacher copy has no running statistics to average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NamedTensor, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const HIDDEN_CHANNELS: usize = 16;

pub const PARAM_NAMES: [&str; 6] =
    ["layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias", "layer3.weight", "layer3.bias"];

/// Named weights of the classifier, in a fixed schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    c_in: usize,
    c_classes: usize,
    tensors: Vec<NamedTensor<T>>,
}

fn schema(c_in: usize, c_classes: usize) -> [Vec<usize>; 6] {
    let h = HIDDEN_CHANNELS;
    [vec![h, c_in, 3, 3], vec![h], vec![h, h, 3, 3], vec![h], vec![c_classes, h, 3, 3], vec![c_classes]]
}

impl<T: Real> ModelParams<T> {
    /// Weights uniform in `±sqrt(1 / fan_in)` with `fan_in = C_in·9`, biases zero.
    pub fn init(c_in: usize, c_classes: usize, seed: u64) -> Result<Self> {
        check_dims(c_in, c_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = schema(c_in, c_classes)
            .iter()
            .zip(PARAM_NAMES)
            .map(|(shape, name)| {
                let tensor = if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = (shape[1] * 9) as f64;
                    let bound = (1.0 / fan_in).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                    Tensor::new(shape, data).expect("schema shape")
                };
                NamedTensor::new(name, tensor)
            })
            .collect();
        Ok(ModelParams { c_in, c_classes, tensors })
    }

    pub fn zeros(c_in: usize, c_classes: usize) -> Result<Self> {
        check_dims(c_in, c_classes)?;
        let tensors = schema(c_in, c_classes)
            .iter()
            .zip(PARAM_NAMES)
            .map(|(shape, name)| NamedTensor::new(name, Tensor::zeros(shape)))
            .collect();
        Ok(ModelParams { c_in, c_classes, tensors })
    }

    /// Rebuilds params from tensors in schema order, validating every shape.
    pub fn from_tensors(c_in: usize, c_classes: usize, tensors: Vec<Tensor<T>>) -> Result<Self> {
        check_dims(c_in, c_classes)?;
        let expected = schema(c_in, c_classes);
        if tensors.len() != expected.len() {
            return Err(Error::shape("model params", format!("expected 6 tensors, got {}", tensors.len())));
        }
        let mut named = Vec::with_capacity(6);
        for ((t, shape), name) in tensors.into_iter().zip(expected.iter()).zip(PARAM_NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("model params", format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            named.push(NamedTensor::new(name, t));
        }
        Ok(ModelParams { c_in, c_classes, tensors: named })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_classes(&self) -> usize {
        self.c_classes
    }

    pub fn tensors(&self) -> &[NamedTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut().map(|n| &mut n.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|n| n.name == name).map(|n| &n.tensor)
    }

    pub fn same_schema<U>(&self, other: &ModelParams<U>) -> bool {
        self.c_in == other.c_in && self.c_classes == other.c_classes
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|n| n.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|n| n.tensor.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            c_in: self.c_in,
            c_classes: self.c_classes,
            tensors: self.tensors.iter().map(|n| NamedTensor::new(n.name.clone(), n.tensor.cast())).collect(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|n| tape.leaf(n.tensor.clone(), requires_grad)).collect()
    }

    /// Logits for one image without keeping the graph.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = forward(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}

fn check_dims(c_in: usize, c_classes: usize) -> Result<()> {
    if c_in < 1 {
        return Err(Error::InvalidArgument("model needs at least one input channel".into()));
    }
    if c_classes < 2 {
        return Err(Error::InvalidArgument(format!("model needs at least two classes, got {c_classes}")));
    }
    Ok(())
}

/// Records the classifier on `tape` for an image `[C_in, H, W]`, returning
/// logits `[C, H, W]`. `params` are the registered vars in schema order.
pub fn forward<T: Real>(tape: &mut Tape<T>, params: &[Var], image: Var) -> Result<Var> {
    if params.len() != 6 {
        return Err(Error::shape("forward", format!("expected 6 parameter vars, got {}", params.len())));
    }
    let h1 = tape.conv2d(image, params[0], params[1])?;
    let a1 = tape.relu(h1)?;
    let h2 = tape.conv2d(a1, params[2], params[3])?;
    let a2 = tape.relu(h2)?;
    tape.conv2d(a2, params[4], params[5])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(3, 4, 9).unwrap();
        let b = ModelParams::<f32>::init(3, 4, 9).unwrap();
        let bits = |p: &ModelParams<f32>| -> Vec<u32> {
            p.tensors().iter().flat_map(|n| n.tensor.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&ModelParams::<f32>::init(3, 4, 10).unwrap()));
    }

    #[test]
    fn init_biases_are_zero_and_weights_bounded() {
        let p = ModelParams::<f64>::init(3, 4, 1).unwrap();
        for n in p.tensors() {
            if n.name.ends_with("bias") {
                assert!(n.tensor.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = (1.0 / (n.tensor.shape()[1] * 9) as f64).sqrt();
                assert!(n.tensor.data().iter().all(|&v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn layer1_weight_mean_within_three_sigma() {
        // U(-b, b) has variance b²/3; the mean of n samples has σ = b / sqrt(3n).
        let p = ModelParams::<f64>::init(3, 4, 2024).unwrap();
        let w = p.get("layer1.weight").unwrap();
        assert_eq!(w.len(), 16 * 3 * 3 * 3);
        let b = (1.0f64 / 27.0).sqrt();
        let sigma = b / (3.0 * w.len() as f64).sqrt();
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn rejects_degenerate_dims() {
        assert!(ModelParams::<f32>::init(0, 4, 0).is_err());
        assert!(ModelParams::<f32>::init(3, 1, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ModelParams::<f64>::zeros(3, 4).unwrap();
        let out = p.infer(&image(0, 3, 6, 6)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input_resolution() {
        let p = ModelParams::<f32>::init(3, 4, 0).unwrap();
        let out = p.infer(&image(1, 3, 32, 32).cast()).unwrap();
        assert_eq!(out.shape(), &[4, 32, 32]);
    }

    #[test]
    fn wrong_channel_count_is_an_error() {
        let p = ModelParams::<f64>::init(3, 4, 0).unwrap();
        assert!(p.infer(&image(1, 2, 8, 8)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = ModelParams::<f32>::init(3, 4, 5).unwrap();
        let x = image(3, 3, 16, 16).cast::<f32>();
        let a = p.infer(&x).unwrap();
        let b = p.infer(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn interior_logits_translate_with_the_input() {
        // Receptive field is 7x7, so away from a 3-pixel border the output
        // depends only on unpadded pixels and must shift with the input.
        let p = ModelParams::<f64>::init(3, 4, 8).unwrap();
        let (h, w, dy, dx) = (20usize, 20usize, 2usize, 3usize);
        let x = image(4, 3, h, w);
        let mut shifted = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = ((y + h - dy) % h, (xx + w - dx) % w);
                    shifted.data_mut()[(c * h + y) * w + xx] = x.data()[(c * h + sy) * w + sx];
                }
            }
        }
        let a = p.infer(&x).unwrap();
        let b = p.infer(&shifted).unwrap();
        let margin = 3;
        for c in 0..4 {
            for y in margin..h - margin - dy {
                for xx in margin..w - margin - dx {
                    let va = a.data()[(c * h + y) * w + xx];
                    let vb = b.data()[(c * h + y + dy) * w + xx + dx];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn param_roundtrip_through_tensors() {
        let p = ModelParams::<f32>::init(3, 4, 0).unwrap();
        let rebuilt =
            ModelParams::from_tensors(3, 4, p.tensors().iter().map(|n| n.tensor.clone()).collect()).unwrap();
        assert_eq!(p, rebuilt);
        assert!(ModelParams::<f32>::from_tensors(3, 5, rebuilt.tensors().iter().map(|n| n.tensor.clone()).collect())
            .is_err());
    }
}
