use crate::autodiff::Tensor;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::argmax_channels;
use crate::model::ModelParams;

/// Per-class IoU over a whole evaluation set. `None` marks classes absent
/// from both predictions and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Class-by-class confusion counts, `counts[truth * c + predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    c: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(c: usize) -> Self {
        ConfusionMatrix { c, counts: vec![0; c * c] }
    }

    pub fn add(&mut self, truth: &[u8], predicted: &[u8]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("confusion", format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.c || p >= self.c {
                return Err(Error::InvalidArgument(format!("label {} outside {} classes", t.max(p), self.c)));
            }
            self.counts[t * self.c + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.c + predicted]
    }

    pub fn report(&self) -> Result<IouReport> {
        let c = self.c;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fn_ = (0..c).map(|p| self.count(k, p)).sum::<u64>() - tp;
                let fp = (0..c).map(|t| self.count(t, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument("no pixels were evaluated".into()));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport { per_class, miou })
    }
}

/// IoU of `params` on `eval_set`, predicting the argmax class per pixel.
pub fn evaluate_miou(params: &ModelParams<f32>, eval_set: &[Sample]) -> Result<IouReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut cm = ConfusionMatrix::new(params.c_classes());
    for sample in eval_set {
        let logits: Tensor<f32> = params.infer(&sample.image)?;
        cm.add(&sample.labels, &argmax_channels(&logits)?)?;
    }
    cm.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(c: usize, truth: &[u8], pred: &[u8]) -> IouReport {
        let mut cm = ConfusionMatrix::new(c);
        cm.add(truth, pred).unwrap();
        cm.report().unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let labels = [0, 1, 2, 1, 0, 2];
        let r = report(3, &labels, &labels);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn hand_counted_half_split() {
        let r = report(2, &[0, 0, 1, 1], &[0, 0, 0, 0]);
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = report(3, &[0, 1, 1], &[0, 1, 1]);
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, 1.0);
        let r = report(3, &[0, 0, 1, 1], &[0, 0, 0, 0]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn predicted_but_absent_class_counts_as_zero() {
        let r = report(3, &[0, 0], &[0, 2]);
        assert_eq!(r.per_class, vec![Some(0.5), None, Some(0.0)]);
    }

    #[test]
    fn accumulates_over_the_whole_set() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0], &[0, 0]).unwrap();
        cm.add(&[1, 1], &[0, 0]).unwrap();
        assert_eq!(cm.report().unwrap().miou, 0.25);
    }

    #[test]
    fn errors() {
        let p = ModelParams::<f32>::init(3, 4, 0).unwrap();
        assert!(evaluate_miou(&p, &[]).is_err());
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.add(&[0], &[0, 1]).is_err());
        assert!(cm.add(&[2], &[0]).is_err());
    }
}
