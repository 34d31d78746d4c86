//! Loss terms of the adaptation objective.
//!
//! - supervised pixel-wise cross entropy on labelled source images
//! - argmax pseudo-labels and a confidence estimate from teacher predictions
//! - confidence-weighted self-training cross entropy on target images
//! - inter-pixel similarity matrices and the mean squared error between the
//!   student's and the teacher's matrices
//!
//! Prediction vectors compared by the similarity measures are softmax
//! probabilities. Every logarithm clamps its argument to [`LOG_FLOOR`].

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Real, Tape, Tensor, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::sampling::{ensure_distinct, PixelSample};

/// How two per-pixel probability vectors are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Measure {
    /// `pᵢ·pⱼ / (‖pᵢ‖‖pⱼ‖)`
    Cosine,
    /// `KL(pᵢ ‖ pⱼ) = Σ pᵢ log(pᵢ / pⱼ)`
    Kl,
    /// `−Σ pᵢ log pⱼ`
    CrossEntropy,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Cosine, Measure::CrossEntropy, Measure::Kl];

    /// Tuned consistency weight for each measure.
    pub fn default_lambda(self) -> f64 {
        match self {
            Measure::Cosine => 1.0,
            Measure::CrossEntropy => 1.0e-3,
            Measure::Kl => 0.8e-3,
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, Measure::Cosine)
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Cosine => "cosine",
            Measure::Kl => "kl",
            Measure::CrossEntropy => "cross_entropy",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Measure::Cosine),
            "kl" => Ok(Measure::Kl),
            "cross_entropy" => Ok(Measure::CrossEntropy),
            other => Err(Error::Config(format!("unknown measure `{other}` (cosine | kl | cross_entropy)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub tau: f64,
    pub measure: Measure,
}

impl LossWeights {
    pub fn new(lambda_c: f64, tau: f64, measure: Measure) -> Result<Self> {
        if !(lambda_c >= 0.0 && lambda_c.is_finite()) {
            return Err(Error::Config(format!("lambda_c must be a finite value >= 0, got {lambda_c}")));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
        }
        Ok(LossWeights { lambda_c, tau, measure })
    }
}

/// Encodes class indices `[H·W]` as a one-hot `[C, H, W]` tensor.
pub fn one_hot<T: Real>(classes: &[u8], c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if classes.len() != h * w {
        return Err(Error::shape("one_hot", format!("{} labels for a {h}x{w} map", classes.len())));
    }
    let hw = h * w;
    let mut data = vec![T::zero(); c * hw];
    for (p, &k) in classes.iter().enumerate() {
        let k = k as usize;
        if k >= c {
            return Err(Error::InvalidArgument(format!("class {k} at pixel {p} exceeds {c} classes")));
        }
        data[k * hw + p] = T::one();
    }
    Tensor::new(&[c, h, w], data)
}

/// Channel argmax per pixel; ties resolve to the lowest class index.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = t.chw()?;
    let hw = h * w;
    let d = t.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * hw + p] > d[best * hw + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect())
}

/// Pixel-wise cross entropy `−(1/N) Σ_j Σ_c y log softmax(logits)`.
///
/// `label` must be one-hot at every pixel not flagged in `ignore`. Ignored
/// pixels are excluded from both the sum and the normalizer `N`; with every
/// pixel ignored the loss is zero and so is its gradient.
pub fn supervised_ce<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    label: &Tensor<T>,
    ignore: Option<&[bool]>,
) -> Result<Var> {
    let (c, h, w) = tape.value(logits).chw()?;
    if label.shape() != [c, h, w] {
        return Err(Error::shape("supervised_ce", format!("label {:?} vs logits {:?}", label.shape(), [c, h, w])));
    }
    let hw = h * w;
    if let Some(mask) = ignore {
        if mask.len() != hw {
            return Err(Error::shape("supervised_ce", format!("ignore mask has {} entries for {hw} pixels", mask.len())));
        }
    }
    let ld = label.data();
    let mut weights = ld.to_vec();
    let mut valid = 0usize;
    for p in 0..hw {
        if ignore.is_some_and(|m| m[p]) {
            for ch in 0..c {
                weights[ch * hw + p] = T::zero();
            }
            continue;
        }
        let mut ones = 0;
        for ch in 0..c {
            let v = ld[ch * hw + p];
            if v == T::one() {
                ones += 1;
            } else if v != T::zero() {
                return Err(Error::NotOneHot { pixel: p });
            }
        }
        if ones != 1 {
            return Err(Error::NotOneHot { pixel: p });
        }
        valid += 1;
    }

    let probs = tape.softmax_channels(logits)?;
    let logp = tape.log_floor(probs)?;
    let y = tape.constant(Tensor::new(&[c, h, w], weights)?);
    let picked = tape.mul(logp, y)?;
    let total = tape.sum(picked)?;
    let factor = if valid == 0 { T::zero() } else { -T::one() / T::of(valid as f64) };
    tape.scale(total, factor)
}

/// One-hot pseudo-labels (stored as class indices) with a scalar image confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub classes: Vec<u8>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub confidence: f64,
}

impl PseudoLabelBatch {
    /// Pseudo-labels and confidence from teacher probabilities `[C, H, W]`.
    pub fn from_teacher<T: Real>(teacher_probs: &Tensor<T>, tau: f64) -> Result<Self> {
        let (c, h, w) = teacher_probs.chw()?;
        Ok(PseudoLabelBatch {
            classes: generate_pseudo_label(teacher_probs)?,
            c,
            h,
            w,
            confidence: confidence_estimate(teacher_probs, tau)?,
        })
    }

    pub fn new(classes: Vec<u8>, c: usize, h: usize, w: usize, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!("confidence {confidence} outside [0, 1]")));
        }
        if classes.len() != h * w || classes.iter().any(|&k| k as usize >= c) {
            return Err(Error::InvalidArgument("pseudo-label map does not match its dimensions".into()));
        }
        Ok(PseudoLabelBatch { classes, c, h, w, confidence })
    }

    pub fn one_hot<T: Real>(&self) -> Result<Tensor<T>> {
        one_hot(&self.classes, self.c, self.h, self.w)
    }
}

/// Argmax of the teacher output per pixel. Operates on plain values, so no
/// gradient can flow back to the teacher.
pub fn generate_pseudo_label<T: Real>(teacher_output: &Tensor<T>) -> Result<Vec<u8>> {
    argmax_channels(teacher_output)
}

/// Fraction of pixels whose largest class probability is strictly above `tau`.
pub fn confidence_estimate<T: Real>(teacher_probs: &Tensor<T>, tau: f64) -> Result<f64> {
    let (c, h, w) = teacher_probs.chw()?;
    let hw = h * w;
    let d = teacher_probs.data();
    let confident = (0..hw)
        .filter(|&p| {
            let max = (0..c).map(|ch| d[ch * hw + p]).fold(T::neg_infinity(), T::max);
            max.as_f64() > tau
        })
        .count();
    Ok(confident as f64 / hw as f64)
}

/// Confidence-weighted cross entropy against pseudo-labels:
/// `q · CE(student_logits, p)`. With `q = 1` this is exactly [`supervised_ce`].
pub fn self_training_loss<T: Real>(tape: &mut Tape<T>, student_logits: Var, pseudo: &PseudoLabelBatch) -> Result<Var> {
    let label = pseudo.one_hot::<T>()?;
    let ce = supervised_ce(tape, student_logits, &label, None)?;
    tape.scale(ce, T::of(pseudo.confidence))
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::InvalidArgument("probability vector has a negative component".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("probability vector sums to {s}")));
    }
    Ok(())
}

/// Similarity between two probability vectors under `measure`.
pub fn pixel_similarity(p_i: &[f64], p_j: &[f64], measure: Measure) -> Result<f64> {
    if p_i.len() != p_j.len() {
        return Err(Error::shape("pixel_similarity", format!("{} vs {} classes", p_i.len(), p_j.len())));
    }
    let log = |v: f64| v.max(LOG_FLOOR).ln();
    match measure {
        Measure::Cosine => {
            let ni = p_i.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj = p_j.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ni == 0.0 || nj == 0.0 {
                return Err(Error::InvalidArgument("cosine similarity of a zero-norm vector".into()));
            }
            check_distribution(p_i)?;
            check_distribution(p_j)?;
            Ok(p_i.iter().zip(p_j).map(|(a, b)| a * b).sum::<f64>() / (ni * nj))
        }
        Measure::Kl => {
            check_distribution(p_i)?;
            check_distribution(p_j)?;
            Ok(p_i.iter().zip(p_j).map(|(&a, &b)| a * (log(a) - log(b))).sum())
        }
        Measure::CrossEntropy => {
            check_distribution(p_i)?;
            check_distribution(p_j)?;
            Ok(-p_i.iter().zip(p_j).map(|(&a, &b)| a * log(b)).sum::<f64>())
        }
    }
}

/// Pairwise similarities among sampled pixels, recorded on a tape.
///
/// Holds one `[N_pair, N_pair]` block for uniform sampling, or `N_box`
/// blocks for box-local sampling.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub measure: Measure,
    pub n_pair: usize,
    pub box_local: bool,
    pub blocks: Vec<Var>,
}

impl SimilarityMatrix {
    pub fn n_box(&self) -> usize {
        self.blocks.len()
    }

    pub fn layout(&self) -> Vec<usize> {
        if self.box_local {
            vec![self.blocks.len(), self.n_pair, self.n_pair]
        } else {
            vec![self.n_pair, self.n_pair]
        }
    }

    /// All entries, block-major.
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> Vec<T> {
        self.blocks.iter().flat_map(|&b| tape.value(b).data().to_vec()).collect()
    }
}

fn similarity_block<T: Real>(tape: &mut Tape<T>, probs: Var, indices: &[usize], measure: Measure) -> Result<Var> {
    let p = tape.gather_pixels(probs, indices)?;
    match measure {
        Measure::Cosine => {
            let n = tape.normalize_rows(p)?;
            tape.matmul_nt(n, n)
        }
        Measure::CrossEntropy => {
            let logp = tape.log_floor(p)?;
            let cross = tape.matmul_nt(p, logp)?;
            tape.scale(cross, -T::one())
        }
        Measure::Kl => {
            let logp = tape.log_floor(p)?;
            let cross = tape.matmul_nt(p, logp)?;
            let neg_cross = tape.scale(cross, -T::one())?;
            let plogp = tape.mul(p, logp)?;
            let self_term = tape.row_sum(plogp)?;
            tape.add_rowwise(neg_cross, self_term)
        }
    }
}

/// Similarities among the pixels of `sample` in the probability map `probs`
/// `[C, H, W]`. Differentiable wherever `probs` requires a gradient.
pub fn build_similarity_matrix<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    sample: &PixelSample,
    measure: Measure,
) -> Result<SimilarityMatrix> {
    let lists = sample.lists();
    let n_pair = lists.first().map(|l| l.len()).unwrap_or(0);
    if n_pair == 0 {
        return Err(Error::InvalidArgument("similarity matrix needs at least one pixel".into()));
    }
    let mut blocks = Vec::with_capacity(lists.len());
    for list in lists {
        if list.len() != n_pair {
            return Err(Error::InvalidArgument("box samples differ in size".into()));
        }
        ensure_distinct(list)?;
        blocks.push(similarity_block(tape, probs, list, measure)?);
    }
    Ok(SimilarityMatrix { measure, n_pair, box_local: sample.is_box_local(), blocks })
}

/// Plain-value similarity matrix `[N, N]` for one index list.
pub fn similarity_values<T: Real>(probs: &Tensor<T>, indices: &[usize], measure: Measure) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let m = build_similarity_matrix(&mut tape, p, &PixelSample::Uniform(indices.to_vec()), measure)?;
    Ok(tape.value(m.blocks[0]).clone())
}

/// Mean squared difference between student and teacher similarities, over all
/// `N_box · N_pair²` entries. The teacher matrix must not carry a gradient.
pub fn consistency_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &SimilarityMatrix,
    teacher: &SimilarityMatrix,
) -> Result<Var> {
    if student.layout() != teacher.layout() {
        return Err(Error::shape(
            "consistency_loss",
            format!("student layout {:?} vs teacher layout {:?}", student.layout(), teacher.layout()),
        ));
    }
    if student.measure != teacher.measure {
        return Err(Error::InvalidArgument(format!(
            "student measure {} vs teacher measure {}",
            student.measure, teacher.measure
        )));
    }
    if teacher.blocks.iter().any(|&b| tape.requires_grad(b)) {
        return Err(Error::InvalidArgument("teacher similarity matrix must be detached".into()));
    }
    let mut total: Option<Var> = None;
    for (&s, &t) in student.blocks.iter().zip(&teacher.blocks) {
        let d = tape.sub(s, t)?;
        let sq = tape.square(d)?;
        let block_sum = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, block_sum)?,
            None => block_sum,
        });
    }
    let count = student.blocks.len() * student.n_pair * student.n_pair;
    tape.scale(total.expect("at least one block"), T::one() / T::of(count as f64))
}

/// `l_s + l_t + λ_c·l_c`. With `λ_c = 0` the consistency term is left out of
/// the graph entirely, so the objective is exactly `l_s + l_t`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l_s: Var, l_t: Var, l_c: Var, lambda_c: f64) -> Result<Var> {
    let base = tape.add(l_s, l_t)?;
    if lambda_c == 0.0 {
        return Ok(base);
    }
    let weighted = tape.scale(l_c, T::of(lambda_c))?;
    tape.add(base, weighted)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_difference_check, GradCheckOptions, NamedTensor};
    use crate::sampling::{sample_box_local, sample_uniform};

    fn random_logits(seed: u64, c: usize, h: usize, w: usize, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn softmax(t: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let p = tape.softmax_channels(v).unwrap();
        tape.value(p).clone()
    }

    fn pixel(probs: &Tensor<f64>, p: usize) -> Vec<f64> {
        let (c, h, w) = probs.chw().unwrap();
        (0..c).map(|ch| probs.data()[ch * h * w + p]).collect()
    }

    fn random_labels(seed: u64, c: usize, n: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..c as u8)).collect()
    }

    #[test]
    fn uniform_prediction_gives_log_c() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[4, 3, 3]));
        let label = one_hot(&random_labels(1, 4, 9), 4, 3, 3).unwrap();
        let l = supervised_ce(&mut tape, logits, &label, None).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_prediction_gives_zero_loss() {
        let classes = random_labels(2, 3, 16);
        let label = one_hot::<f64>(&classes, 3, 4, 4).unwrap();
        // a 60-logit margin makes the true-class probability round to 1.0
        let logits = label.map(|v| 60.0 * v);
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let l = supervised_ce(&mut tape, lv, &label, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn all_ignored_gives_zero_loss_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(random_logits(3, 4, 2, 2, 2.0));
        let label = one_hot(&[0, 1, 2, 3], 4, 2, 2).unwrap();
        let l = supervised_ce(&mut tape, logits, &label, Some(&[true; 4])).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.backward(l).unwrap().get(logits).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ignored_pixels_leave_the_normalizer() {
        let logits = random_logits(4, 3, 2, 2, 1.0);
        let classes = vec![0u8, 1, 2, 1];
        let label = one_hot::<f64>(&classes, 3, 2, 2).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let ignore = [false, true, false, true];
        let l = supervised_ce(&mut tape, lv, &label, Some(&ignore)).unwrap();
        let probs = softmax(&logits);
        let expected = -(probs.data()[0].ln() + probs.data()[2 * 4 + 2].ln()) / 2.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_one_hot_label_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 1, 2]));
        let bad = Tensor::new(&[2, 1, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap();
        assert!(matches!(supervised_ce(&mut tape, logits, &bad, None), Err(Error::NotOneHot { pixel: 1 })));
        // the same pixel is fine once ignored
        assert!(supervised_ce(&mut tape, logits, &bad, Some(&[false, true])).is_ok());
        let double = Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(supervised_ce(&mut tape, logits, &double, None), Err(Error::NotOneHot { pixel: 0 })));
    }

    #[test]
    fn pseudo_label_argmax_and_ties() {
        let t = Tensor::new(&[3, 1, 1], vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(generate_pseudo_label(&t).unwrap(), vec![0]);
        let tie = Tensor::new(&[3, 1, 2], vec![0.1, 0.7, 0.7, 0.7, 0.7, 0.1]).unwrap();
        assert_eq!(generate_pseudo_label(&tie).unwrap(), vec![1, 0]);
    }

    #[test]
    fn pseudo_labels_match_brute_force_argmax() {
        let (c, h, w) = (5, 6, 7);
        let t = random_logits(5, c, h, w, 3.0);
        let got = generate_pseudo_label(&t).unwrap();
        for p in 0..h * w {
            let vals = pixel(&t, p);
            let mut best = 0;
            for (k, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = k;
                }
            }
            assert_eq!(got[p] as usize, best);
        }
    }

    #[test]
    fn confidence_counts_pixels_strictly_above_tau() {
        // per-pixel maxima 0.97, 0.95, 0.99, 0.50 with C = 2
        let maxima = [0.97, 0.95, 0.99, 0.50];
        let mut data = maxima.to_vec();
        data.extend(maxima.iter().map(|m| 1.0 - m));
        let probs = Tensor::new(&[2, 2, 2], data).unwrap();
        assert_eq!(confidence_estimate(&probs, 0.968).unwrap(), 0.5);

        let flat = Tensor::new(&[2, 1, 2], vec![0.968, 0.5, 0.032, 0.5]).unwrap();
        assert_eq!(confidence_estimate(&flat, 0.968).unwrap(), 0.0);

        let sure = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(confidence_estimate(&sure, 0.968).unwrap(), 1.0);
    }

    #[test]
    fn self_training_reductions() {
        let logits = random_logits(6, 4, 3, 3, 2.0);
        let classes = random_labels(7, 4, 9);
        let eval = |q: f64| {
            let mut tape = Tape::<f64>::new();
            let lv = tape.param(logits.clone());
            let pseudo = PseudoLabelBatch::new(classes.clone(), 4, 3, 3, q).unwrap();
            let l = self_training_loss(&mut tape, lv, &pseudo).unwrap();
            let g = tape.backward(l).unwrap().get(lv);
            (tape.value(l).item(), g)
        };
        let (full, _) = eval(1.0);
        let (half, _) = eval(0.5);
        let (zero, g0) = eval(0.0);
        assert_eq!(half, 0.5 * full);
        assert_eq!(zero, 0.0);
        assert!(g0.data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(logits.clone());
        let sup = supervised_ce(&mut tape, lv, &one_hot(&classes, 4, 3, 3).unwrap(), None).unwrap();
        assert_eq!(tape.value(sup).item().to_bits(), full.to_bits());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn pixel_similarity_examples() {
        let p = [0.2, 0.3, 0.5];
        assert!((pixel_similarity(&p, &p, Measure::Cosine).unwrap() - 1.0).abs() < 1e-12);
        let cos = pixel_similarity(&[1.0, 0.0], &[0.5, 0.5], Measure::Cosine).unwrap();
        assert!((cos - 0.7071).abs() < 1e-4);
        assert!((cos - 0.5 / (0.5f64.sqrt())).abs() < 1e-12);
        let kl = pixel_similarity(&[0.5, 0.5], &[0.9, 0.1], Measure::Kl).unwrap();
        let kl_oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - kl_oracle).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-3);
        let ce = pixel_similarity(&[0.5, 0.5], &[0.5, 0.5], Measure::CrossEntropy).unwrap();
        assert!((ce - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn pixel_similarity_rejects_bad_input() {
        assert!(pixel_similarity(&[0.0, 0.0], &[0.5, 0.5], Measure::Cosine).is_err());
        assert!(pixel_similarity(&[0.7, 0.7], &[0.5, 0.5], Measure::Kl).is_err());
        assert!(pixel_similarity(&[1.2, -0.2], &[0.5, 0.5], Measure::CrossEntropy).is_err());
        assert!(pixel_similarity(&[1.0], &[0.5, 0.5], Measure::Cosine).is_err());
    }

    #[test]
    fn single_pixel_cosine_matrix_is_one() {
        let probs = softmax(&random_logits(8, 4, 4, 4, 2.0));
        let m = similarity_values(&probs, &[5], Measure::Cosine).unwrap();
        assert_eq!(m.shape(), &[1, 1]);
        assert!((m.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrices_match_pairwise_oracle() {
        let probs = softmax(&random_logits(9, 4, 5, 5, 2.0));
        let idx = sample_uniform(5, 5, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for measure in Measure::ALL {
            let m = similarity_values(&probs, &idx, measure).unwrap();
            for (i, &pi) in idx.iter().enumerate() {
                for (j, &pj) in idx.iter().enumerate() {
                    let oracle = pixel_similarity(&pixel(&probs, pi), &pixel(&probs, pj), measure).unwrap();
                    assert!((m.data()[i * 8 + j] - oracle).abs() < 1e-12, "{measure} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn duplicate_or_out_of_range_indices_are_rejected() {
        let probs = softmax(&random_logits(10, 3, 3, 3, 1.0));
        assert!(similarity_values(&probs, &[1, 4, 1], Measure::Cosine).is_err());
        assert!(similarity_values(&probs, &[1, 9], Measure::Cosine).is_err());
    }

    #[test]
    fn kl_and_cross_entropy_are_asymmetric() {
        let (a, b) = ([0.9, 0.1], [0.5, 0.5]);
        for measure in [Measure::Kl, Measure::CrossEntropy] {
            let ab = pixel_similarity(&a, &b, measure).unwrap();
            let ba = pixel_similarity(&b, &a, measure).unwrap();
            assert!((ab - ba).abs() > 0.05, "{measure}: {ab} vs {ba}");
        }
    }

    #[test]
    fn consistency_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[2, 2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2, 2]));
        let s = SimilarityMatrix { measure: Measure::Cosine, n_pair: 2, box_local: false, blocks: vec![ones] };
        let t = SimilarityMatrix { blocks: vec![zeros], ..s.clone() };
        let l = consistency_loss(&mut tape, &s, &t).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let same = consistency_loss(&mut tape, &s, &s.clone()).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn consistency_rejects_mismatched_layouts_and_attached_teachers() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        let s = SimilarityMatrix { measure: Measure::Cosine, n_pair: 2, box_local: false, blocks: vec![a] };
        let t = SimilarityMatrix { n_pair: 3, blocks: vec![b], ..s.clone() };
        assert!(consistency_loss(&mut tape, &s, &t).is_err());
        let boxed = SimilarityMatrix { box_local: true, ..s.clone() };
        assert!(consistency_loss(&mut tape, &s, &boxed).is_err());
        let kl = SimilarityMatrix { measure: Measure::Kl, ..s.clone() };
        assert!(consistency_loss(&mut tape, &s, &kl).is_err());
        let g = tape.param(Tensor::zeros(&[2, 2]));
        let attached = SimilarityMatrix { blocks: vec![g], ..s.clone() };
        assert!(consistency_loss(&mut tape, &s, &attached).is_err());
    }

    #[test]
    fn box_local_normalizer_averages_every_entry() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s_probs = tape.param(softmax(&random_logits(13, 3, 6, 6, 2.0)));
        let t_probs = tape.constant(softmax(&random_logits(14, 3, 6, 6, 2.0)));
        let boxes = PixelSample::BoxLocal(sample_box_local(6, 6, 3, 4, 3, &mut rng).unwrap());
        let s = build_similarity_matrix(&mut tape, s_probs, &boxes, Measure::Cosine).unwrap();
        let t = build_similarity_matrix(&mut tape, t_probs, &boxes, Measure::Cosine).unwrap();
        assert_eq!(s.layout(), vec![3, 4, 4]);
        let l = consistency_loss(&mut tape, &s, &t).unwrap();
        let (sv, tv) = (s.values(&tape), t.values(&tape));
        let mse = sv.iter().zip(&tv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 48.0;
        assert!((tape.value(l).item() - mse).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let [ls, lt, lc] = [1.0, 0.5, 0.25].map(|v| tape.constant(Tensor::scalar(v)));
        let t = total_loss(&mut tape, ls, lt, lc, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.75);
        let t0 = total_loss(&mut tape, ls, lt, lc, 0.0).unwrap();
        assert_eq!(tape.value(t0).item(), 1.5);
        let big = tape.constant(Tensor::scalar(1000.0));
        let tk = total_loss(&mut tape, ls, lt, big, 0.8e-3).unwrap();
        assert!((tape.value(tk).item() - 2.3).abs() < 1e-12);
    }

    #[test]
    fn loss_weights_validate() {
        assert!(LossWeights::new(1.0, 0.968, Measure::Cosine).is_ok());
        assert!(LossWeights::new(-0.1, 0.5, Measure::Cosine).is_err());
        assert!(LossWeights::new(1.0, 1.0, Measure::Cosine).is_err());
        assert!(LossWeights::new(1.0, 0.0, Measure::Cosine).is_err());
        assert_eq!(Measure::Kl.default_lambda(), 0.8e-3);
        assert_eq!("cross_entropy".parse::<Measure>().unwrap(), Measure::CrossEntropy);
    }

    #[test]
    fn consistency_gradient_matches_central_differences() {
        let student_logits = random_logits(20, 4, 5, 5, 1.5);
        let teacher = softmax(&random_logits(21, 4, 5, 5, 1.5));
        let idx = sample_uniform(5, 5, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for measure in Measure::ALL {
            let build = |t: &mut Tape<f64>, p: &[Var]| {
                let probs = t.softmax_channels(p[0])?;
                let sample = PixelSample::Uniform(idx.clone());
                let s = build_similarity_matrix(t, probs, &sample, measure)?;
                let tp = t.constant(teacher.clone());
                let tm = build_similarity_matrix(t, tp, &sample, measure)?;
                consistency_loss(t, &s, &tm)
            };
            let params = [NamedTensor::new("logits", student_logits.clone())];
            let report = finite_difference_check(build, &params, &GradCheckOptions::default()).unwrap();
            assert!(report.max_rel_err() < 1e-4, "{measure}: {report:?}");
        }
    }

    #[test]
    fn teacher_side_receives_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let s_logits = tape.param(random_logits(22, 3, 4, 4, 1.0));
        let t_probs = tape.constant(softmax(&random_logits(23, 3, 4, 4, 1.0)));
        let s_probs = tape.softmax_channels(s_logits).unwrap();
        let sample = PixelSample::Uniform(vec![0, 5, 10, 15]);
        let s = build_similarity_matrix(&mut tape, s_probs, &sample, Measure::Kl).unwrap();
        let t = build_similarity_matrix(&mut tape, t_probs, &sample, Measure::Kl).unwrap();
        let l = consistency_loss(&mut tape, &s, &t).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(!g.reached(t_probs));
        assert!(t.blocks.iter().all(|&b| !g.reached(b)));
        assert!(g.reached(s_logits));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cosine_matrix_is_symmetric_with_unit_diagonal(seed in 0u64..10_000, n in 1usize..9) {
            let probs = softmax(&random_logits(seed, 4, 4, 4, 3.0));
            let idx = sample_uniform(4, 4, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let m = similarity_values(&probs, &idx, Measure::Cosine).unwrap();
            for i in 0..n {
                prop_assert!((m.data()[i * n + i] - 1.0).abs() < 1e-6);
                for j in 0..n {
                    let v = m.data()[i * n + j];
                    prop_assert!((v - m.data()[j * n + i]).abs() < 1e-6);
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
                }
            }
            for measure in [Measure::Kl, Measure::CrossEntropy] {
                let m = similarity_values(&probs, &idx, measure).unwrap();
                prop_assert!(m.data().iter().all(|&v| v >= -1e-12 && v.is_finite()));
            }
        }

        #[test]
        fn consistency_is_nonnegative_and_zero_only_on_equality(seed in 0u64..10_000) {
            let a = softmax(&random_logits(seed, 3, 4, 4, 2.0));
            let b = softmax(&random_logits(seed + 1, 3, 4, 4, 2.0));
            let idx = sample_uniform(4, 4, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut tape = Tape::<f64>::new();
            let (va, vb) = (tape.constant(a), tape.constant(b));
            let sample = PixelSample::Uniform(idx);
            let ma = build_similarity_matrix(&mut tape, va, &sample, Measure::Cosine).unwrap();
            let mb = build_similarity_matrix(&mut tape, vb, &sample, Measure::Cosine).unwrap();
            let diff = consistency_loss(&mut tape, &ma, &mb).unwrap();
            let same = consistency_loss(&mut tape, &ma, &ma.clone()).unwrap();
            prop_assert!(tape.value(diff).item() > 0.0);
            prop_assert_eq!(tape.value(same).item(), 0.0);
        }

        #[test]
        fn permuting_indices_leaves_consistency_unchanged(seed in 0u64..10_000, m in 0usize..3) {
            let measure = Measure::ALL[m];
            let a = softmax(&random_logits(seed, 4, 5, 5, 2.0));
            let b = softmax(&random_logits(seed + 7, 4, 5, 5, 2.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = sample_uniform(5, 5, 7, &mut rng).unwrap();
            let mut perm = idx.clone();
            perm.reverse();
            perm.swap(0, 3);
            let loss = |order: &[usize]| {
                let mut tape = Tape::<f64>::new();
                let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
                let s = PixelSample::Uniform(order.to_vec());
                let ma = build_similarity_matrix(&mut tape, va, &s, measure).unwrap();
                let mb = build_similarity_matrix(&mut tape, vb, &s, measure).unwrap();
                let l = consistency_loss(&mut tape, &ma, &mb).unwrap();
                tape.value(l).item()
            };
            prop_assert!((loss(&idx) - loss(&perm)).abs() < 1e-6);
        }
    }
}
