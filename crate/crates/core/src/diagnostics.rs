//! Finite-difference checks of the training losses on random inputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_difference_check, GradCheckOptions, GradCheckReport, NamedTensor, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    build_similarity_matrix, consistency_loss, one_hot, self_training_loss, supervised_ce, total_loss, Measure,
    PseudoLabelBatch,
};
use crate::model::{self, ModelParams};
use crate::sampling::SampleSpec;

pub const CHECK_CLASSES: usize = 4;
pub const CHECK_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossCheck {
    /// Cross entropy against ground truth, with respect to the logits.
    Supervised,
    /// Confidence-weighted pseudo-label cross entropy, with respect to the logits.
    SelfTraining,
    /// Similarity-matrix consistency under one measure, with respect to the student logits.
    Consistency(Measure),
    /// The summed objective with respect to every model weight.
    Objective,
}

impl LossCheck {
    pub fn all() -> Vec<LossCheck> {
        let mut v = vec![LossCheck::Supervised, LossCheck::SelfTraining];
        v.extend(Measure::ALL.iter().map(|&m| LossCheck::Consistency(m)));
        v.push(LossCheck::Objective);
        v
    }

    /// Checks selected by a CLI name: `ce`, `self`, `consistency` or `all`.
    pub fn select(name: &str) -> Result<Vec<LossCheck>> {
        match name {
            "ce" => Ok(vec![LossCheck::Supervised]),
            "self" => Ok(vec![LossCheck::SelfTraining]),
            "consistency" => Ok(Measure::ALL.iter().map(|&m| LossCheck::Consistency(m)).collect()),
            "all" => Ok(LossCheck::all()),
            other => Err(Error::Config(format!("unknown loss `{other}` (ce | self | consistency | all)"))),
        }
    }
}

impl fmt::Display for LossCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossCheck::Supervised => f.write_str("ce"),
            LossCheck::SelfTraining => f.write_str("self"),
            LossCheck::Consistency(m) => write!(f, "consistency/{m}"),
            LossCheck::Objective => f.write_str("objective"),
        }
    }
}

impl FromStr for LossCheck {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossCheck::all()
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss check `{s}`")))
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape matches data")
}

fn labels(rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..CHECK_SIZE * CHECK_SIZE).map(|_| rng.random_range(0..CHECK_CLASSES as u8)).collect()
}

fn softmax(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let p = tape.softmax_channels(v)?;
    Ok(tape.value(p).clone())
}

/// Runs one check on a random `4 × 8 × 8` problem drawn from `seed`.
pub fn check_loss(kind: LossCheck, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (c, s) = (CHECK_CLASSES, CHECK_SIZE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = NamedTensor::new("logits", normal(&mut rng, &[c, s, s]));
    match kind {
        LossCheck::Supervised => {
            let y = one_hot::<f64>(&labels(&mut rng), c, s, s)?;
            finite_difference_check(|tape, v| supervised_ce(tape, v[0], &y, None), &[logits], opts)
        }
        LossCheck::SelfTraining => {
            let pseudo = PseudoLabelBatch::new(labels(&mut rng), c, s, s, rng.random_range(0.1..1.0))?;
            finite_difference_check(|tape, v| self_training_loss(tape, v[0], &pseudo), &[logits], opts)
        }
        LossCheck::Consistency(measure) => {
            let teacher = softmax(&normal(&mut rng, &[c, s, s]))?;
            let sample = SampleSpec::uniform(16).sample(s, s, &mut rng)?;
            finite_difference_check(
                |tape, v| {
                    let probs = tape.softmax_channels(v[0])?;
                    let student = build_similarity_matrix(tape, probs, &sample, measure)?;
                    let t = tape.constant(teacher.clone());
                    let teacher = build_similarity_matrix(tape, t, &sample, measure)?;
                    consistency_loss(tape, &student, &teacher)
                },
                &[logits],
                opts,
            )
        }
        LossCheck::Objective => {
            let params = ModelParams::<f64>::init(3, c, rng.random())?;
            let image_s = normal(&mut rng, &[3, s, s]).map(|v| 0.5 + 0.25 * v);
            let image_m = normal(&mut rng, &[3, s, s]).map(|v| 0.5 + 0.25 * v);
            let y = one_hot::<f64>(&labels(&mut rng), c, s, s)?;
            let pseudo = PseudoLabelBatch::new(labels(&mut rng), c, s, s, 0.7)?;
            let teacher = softmax(&normal(&mut rng, &[c, s, s]))?;
            let sample = SampleSpec::box_local(2, 8, 4).sample(s, s, &mut rng)?;
            finite_difference_check(
                |tape, v| {
                    let xs = tape.constant(image_s.clone());
                    let ls = model::forward(tape, v, xs)?;
                    let l_s = supervised_ce(tape, ls, &y, None)?;
                    let xm = tape.constant(image_m.clone());
                    let lm = model::forward(tape, v, xm)?;
                    let l_t = self_training_loss(tape, lm, &pseudo)?;
                    let probs = tape.softmax_channels(lm)?;
                    let student = build_similarity_matrix(tape, probs, &sample, Measure::Cosine)?;
                    let t = tape.constant(teacher.clone());
                    let teacher = build_similarity_matrix(tape, t, &sample, Measure::Cosine)?;
                    let l_c = consistency_loss(tape, &student, &teacher)?;
                    total_loss(tape, l_s, l_t, l_c, 1.0)
                },
                params.tensors(),
                opts,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in LossCheck::all() {
            assert_eq!(c.to_string().parse::<LossCheck>().unwrap(), c);
        }
        assert_eq!(LossCheck::select("consistency").unwrap().len(), 3);
        assert!(LossCheck::select("nope").is_err());
    }

    #[test]
    fn supervised_check_passes() {
        let r = check_loss(LossCheck::Supervised, 0, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err() < 1e-4);
        assert_eq!(r.params[0].checked, 256);
    }
}
