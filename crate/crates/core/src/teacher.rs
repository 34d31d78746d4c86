//! Mean-teacher weight pair.
//!
//! The teacher starts as an exact copy of the student and afterwards tracks an
//! exponential moving average of the student weights, updated once per
//! iteration after the optimizer step: `φ ← α·φ + (1 − α)·θ`.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentState {
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub alpha: f64,
    pub step: u64,
}

impl TeacherStudentState {
    pub fn new(student: ModelParams<f32>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let teacher = student.clone();
        Ok(TeacherStudentState { student, teacher, alpha, step: 0 })
    }

    /// Restores a saved pair.
    pub fn from_parts(student: ModelParams<f32>, teacher: ModelParams<f32>, alpha: f64, step: u64) -> Result<Self> {
        check_alpha(alpha)?;
        if !student.same_schema(&teacher) {
            return Err(Error::shape("teacher/student", "schemas differ"));
        }
        Ok(TeacherStudentState { student, teacher, alpha, step })
    }

    /// One EMA step of the teacher towards the current student.
    pub fn ema_update(&mut self) -> Result<()> {
        if !self.student.same_schema(&self.teacher) {
            return Err(Error::shape("ema_update", "student and teacher schemas differ"));
        }
        let alpha = self.alpha as f32;
        let beta = (1.0 - self.alpha) as f32;
        for (phi, theta) in self.teacher.tensors_mut().zip(self.student.tensors()) {
            if phi.shape() != theta.tensor.shape() {
                return Err(Error::shape("ema_update", format!("{}: {:?} vs {:?}", theta.name, phi.shape(), theta.tensor.shape())));
            }
            for (p, &t) in phi.data_mut().iter_mut().zip(theta.tensor.data()) {
                *p = alpha * *p + beta * t;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Teacher class probabilities `[C, H, W]` for `image`.
    ///
    /// Teacher weights enter the tape as constants, so nothing downstream can
    /// send a gradient back into them.
    pub fn teacher_predict(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict_probs(&self.teacher, image)
    }
}

/// Softmax of the model's logits, computed without gradient tracking.
pub fn predict_probs(params: &ModelParams<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(image.clone());
    let logits = model::forward(&mut tape, &vars, x)?;
    let probs = tape.softmax_channels(logits)?;
    Ok(tape.value(probs).clone())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn filled(value: f32) -> ModelParams<f32> {
        let mut p = ModelParams::<f32>::zeros(3, 4).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(value);
        }
        p
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ema_moves_teacher_towards_student() {
        let mut s = TeacherStudentState::from_parts(filled(1.0), filled(0.0), 0.99, 0).unwrap();
        s.ema_update().unwrap();
        for n in s.teacher.tensors() {
            assert!(n.tensor.data().iter().all(|&v| (v - 0.01).abs() < 1e-7));
        }
        assert_eq!(s.step, 1);
        assert!(s.student.tensors().iter().all(|n| n.tensor.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn equal_weights_are_a_fixed_point() {
        let p = ModelParams::<f32>::init(3, 4, 3).unwrap();
        let mut s = TeacherStudentState::new(p.clone(), 0.99).unwrap();
        s.ema_update().unwrap();
        for (a, b) in s.teacher.tensors().iter().zip(p.tensors()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_alpha_copies_the_student() {
        let p = ModelParams::<f32>::init(3, 4, 4).unwrap();
        let mut s = TeacherStudentState::from_parts(p.clone(), filled(5.0), 0.0, 0).unwrap();
        s.ema_update().unwrap();
        assert_eq!(s.teacher, p);
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let p = ModelParams::<f32>::init(3, 4, 4).unwrap();
        assert!(TeacherStudentState::new(p.clone(), 1.0).is_err());
        assert!(TeacherStudentState::new(p, -0.1).is_err());
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let a = ModelParams::<f32>::init(3, 4, 0).unwrap();
        let b = ModelParams::<f32>::init(3, 5, 0).unwrap();
        assert!(TeacherStudentState::from_parts(a.clone(), b.clone(), 0.9, 0).is_err());
        let mut s = TeacherStudentState::new(a, 0.9).unwrap();
        s.teacher = b;
        assert!(s.ema_update().is_err());
    }

    #[test]
    fn frozen_student_gap_contracts_geometrically() {
        let theta = ModelParams::<f32>::init(3, 4, 1).unwrap();
        let phi0 = ModelParams::<f32>::init(3, 4, 2).unwrap();
        let gap = |phi: &ModelParams<f32>| -> f64 {
            phi.tensors()
                .iter()
                .zip(theta.tensors())
                .flat_map(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()).map(|(x, y)| (x - y).abs() as f64))
                .fold(0.0, f64::max)
        };
        let mut s = TeacherStudentState::from_parts(theta.clone(), phi0.clone(), 0.99, 0).unwrap();
        let g0 = gap(&phi0);
        for t in 1..=100 {
            s.ema_update().unwrap();
            let expected = 0.99f64.powi(t) * g0;
            assert!((gap(&s.teacher) - expected).abs() < 1e-5, "t={t}");
        }
        assert_eq!(s.student, theta);
    }

    #[test]
    fn teacher_predict_matches_forward_plus_softmax() {
        let p = ModelParams::<f32>::init(3, 4, 6).unwrap();
        let s = TeacherStudentState::new(p.clone(), 0.99).unwrap();
        let x = image(1);
        let got = s.teacher_predict(&x).unwrap();

        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true);
        let xv = tape.constant(x);
        let logits = model::forward(&mut tape, &vars, xv).unwrap();
        let probs = tape.softmax_channels(logits).unwrap();
        let expected = tape.value(probs);
        assert!(got.data().iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
