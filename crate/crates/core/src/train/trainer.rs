use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, TrainMode};
use super::eval::evaluate_miou;
use super::metrics::{EvalMetrics, MetricsRecord};
use super::optim::{lr_at, AdamW};
use super::seeds::{derive_seed, stream};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{classmix, color_jitter, composite, gaussian_blur, hue_jitter, MixResult};
use crate::data::{Sample, Split, SyntheticDomains};
use crate::error::{CheckpointError, Error, Result};
use crate::losses::{
    build_similarity_matrix, consistency_loss, one_hot, self_training_loss, supervised_ce, total_loss,
    PseudoLabelBatch,
};
use crate::model::{self, ModelParams};
use crate::sampling::PixelSample;
use crate::teacher::TeacherStudentState;

/// Any loss above this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// Band below the student's mIoU that the teacher is expected to stay within.
pub const TEACHER_BAND: f64 = 0.05;

/// Intermediate values of one batch slot.
#[derive(Clone, Debug)]
pub struct SlotTrace {
    pub source: Sample,
    pub target: Sample,
    pub source_logits: Tensor<f32>,
    pub teacher_target_probs: Option<Tensor<f32>>,
    pub mix: Option<MixResult>,
    pub confidence: f64,
    pub student_input: Option<Tensor<f32>>,
    pub mixed_logits: Option<Tensor<f32>>,
    pub teacher_mixed_probs: Option<Tensor<f32>>,
    pub sample: Option<PixelSample>,
}

/// Everything one training step computed, for inspection in tests and tools.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub batch_seed: u64,
    pub slots: Vec<SlotTrace>,
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_c: f64,
    pub student_grads: Vec<Tensor<f32>>,
    /// Largest gradient magnitude that reached any teacher weight.
    pub teacher_grad_max_abs: f64,
    pub teacher_before: ModelParams<f32>,
    /// Teacher weights after the optimizer step, before the EMA update.
    pub teacher_after_optimizer: ModelParams<f32>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: ExperimentConfig,
    domains: SyntheticDomains,
    state: TeacherStudentState,
    optimizer: AdamW,
    eval_set: Vec<Sample>,
    skip_consistency: bool,
}

/// Target-domain evaluation images, fixed by `eval_seed` alone.
pub fn eval_set(config: &ExperimentConfig) -> Result<Vec<Sample>> {
    let domains = config.domains();
    (0..config.eval_size)
        .map(|i| domains.sample(Split::Target, derive_seed(config.eval_seed, &[stream::EVAL, i as u64])))
        .collect()
}

fn mean_of(tape: &mut Tape<f32>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f32)
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let student = ModelParams::init(3, config.classes, derive_seed(config.seed, &[stream::INIT]))?;
        let optimizer = AdamW::new(&student, config.weight_decay);
        let state = TeacherStudentState::new(student, config.alpha)?;
        Self::assemble(config, state, optimizer)
    }

    /// Resumes from a checkpoint written under the same configuration.
    pub fn from_checkpoint(config: ExperimentConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let expected = config.config_hash();
        if ckpt.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch { expected, found: ckpt.config_hash }.into());
        }
        if ckpt.student.c_classes() != config.classes || ckpt.student.c_in() != 3 {
            return Err(CheckpointError::Malformed("model dimensions differ from the config".into()).into());
        }
        let optimizer = AdamW::from_state(
            &ckpt.student,
            config.weight_decay,
            ckpt.adam_m.clone(),
            ckpt.adam_v.clone(),
            ckpt.step,
        )?;
        let state = TeacherStudentState::from_parts(ckpt.student.clone(), ckpt.teacher.clone(), config.alpha, ckpt.step)?;
        Self::assemble(config, state, optimizer)
    }

    fn assemble(config: ExperimentConfig, state: TeacherStudentState, optimizer: AdamW) -> Result<Self> {
        Ok(Trainer {
            domains: config.domains(),
            eval_set: eval_set(&config)?,
            config,
            state,
            optimizer,
            skip_consistency: false,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn state(&self) -> &TeacherStudentState {
        &self.state
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Completed iterations.
    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.config.iterations
    }

    /// Leaves the consistency term out of the step entirely: no sampling, no
    /// similarity matrices, `loss_c` reported as 0.
    pub fn set_skip_consistency(&mut self, skip: bool) {
        self.skip_consistency = skip;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.config_hash(),
            step: self.state.step,
            student: self.state.student.clone(),
            teacher: self.state.teacher.clone(),
            adam_m: self.optimizer.m.clone(),
            adam_v: self.optimizer.v.clone(),
        }
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        Ok(EvalMetrics {
            student: evaluate_miou(&self.state.student, &self.eval_set)?,
            teacher: evaluate_miou(&self.state.teacher, &self.eval_set)?,
        })
    }

    /// Seed from which every random draw of iteration `step` derives.
    pub fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.config.seed, &[stream::STEP, step])
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        self.run_step(false).map(|(r, _)| r)
    }

    pub fn step_traced(&mut self) -> Result<(MetricsRecord, StepTrace)> {
        self.run_step(true).map(|(r, t)| (r, t.expect("trace requested")))
    }

    fn run_step(&mut self, keep_trace: bool) -> Result<(MetricsRecord, Option<StepTrace>)> {
        let t = self.state.step;
        if t >= self.config.iterations {
            return Err(Error::InvalidArgument(format!("training already completed {t} iterations")));
        }
        let batch_seed = self.batch_seed(t);
        let divergence = |detail: String| Error::Divergence { step: t, batch_seed, detail };
        self.step_inner(t, batch_seed, keep_trace).map_err(|e| match e {
            Error::NonFinite { op } => divergence(format!("non-finite value in {op}")),
            Error::NonFiniteGradient { name } => divergence(format!("non-finite gradient for {name}")),
            other => other,
        })
    }

    fn step_inner(&mut self, t: u64, batch_seed: u64, keep_trace: bool) -> Result<(MetricsRecord, Option<StepTrace>)> {
        let cfg = &self.config;
        let (c, h, w) = (cfg.classes, cfg.height, cfg.width);
        let uda = cfg.mode == TrainMode::Uda;
        let with_consistency = uda && !self.skip_consistency;
        let lr = lr_at(t, cfg.lr, cfg.warmup, cfg.iterations)?;
        let teacher_before = keep_trace.then(|| self.state.teacher.clone());

        let mut tape = Tape::<f32>::new();
        let student_vars = self.state.student.register(&mut tape, true);
        let teacher_vars = self.state.teacher.register(&mut tape, false);
        let (mut ls_terms, mut lt_terms, mut lc_terms) = (Vec::new(), Vec::new(), Vec::new());
        let mut q_sum = 0.0;
        let mut slots = Vec::new();

        for b in 0..cfg.batch_size as u64 {
            let source = self.domains.sample(Split::Source, derive_seed(batch_seed, &[b, stream::SOURCE]))?;
            let target = self.domains.sample(Split::Target, derive_seed(batch_seed, &[b, stream::TARGET]))?;
            let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed, &[b, stream::AUGMENT]));
            let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed, &[b, stream::SAMPLE]));

            let xs = tape.constant(source.image.clone());
            let logits_s = model::forward(&mut tape, &student_vars, xs)?;
            let ys = one_hot::<f32>(&source.labels, c, h, w)?;
            ls_terms.push(supervised_ce(&mut tape, logits_s, &ys, None)?);

            let mut slot = SlotTrace {
                source: source.clone(),
                target: target.clone(),
                source_logits: tape.value(logits_s).clone(),
                teacher_target_probs: None,
                mix: None,
                confidence: 0.0,
                student_input: None,
                mixed_logits: None,
                teacher_mixed_probs: None,
                sample: None,
            };
            if uda {
                let teacher_probs = |tape: &mut Tape<f32>, image: &Tensor<f32>| -> Result<Tensor<f32>> {
                    let x = tape.constant(image.clone());
                    let logits = model::forward(tape, &teacher_vars, x)?;
                    let probs = tape.softmax_channels(logits)?;
                    Ok(tape.value(probs).clone())
                };
                let tp_target = teacher_probs(&mut tape, &target.image)?;
                let pseudo = PseudoLabelBatch::from_teacher(&tp_target, cfg.tau)?;
                q_sum += pseudo.confidence;

                let (mix, teacher_mixed) = if cfg.classmix {
                    let tp_source = teacher_probs(&mut tape, &source.image)?;
                    let mix = classmix(&source.image, &source.labels, &target.image, &pseudo.classes, &mut aug_rng)?;
                    let composited = composite(&mix.mask, &tp_source, &tp_target)?;
                    (mix, composited)
                } else {
                    let mix = MixResult {
                        image: target.image.clone(),
                        labels: pseudo.classes.clone(),
                        mask: vec![false; h * w],
                        selected: Vec::new(),
                    };
                    (mix, tp_target.clone())
                };
                let mixed_pseudo = PseudoLabelBatch::new(mix.labels.clone(), c, h, w, pseudo.confidence)?;

                let mut student_input = color_jitter(&mix.image, cfg.jitter_strength, &mut aug_rng)?;
                student_input = hue_jitter(&student_input, cfg.jitter_hue, &mut aug_rng)?;
                if aug_rng.random_bool(cfg.blur_prob) {
                    let sigma = aug_rng.random_range(0.15..=cfg.blur_sigma_max);
                    student_input = gaussian_blur(&student_input, sigma)?;
                }

                let xm = tape.constant(student_input.clone());
                let logits_m = model::forward(&mut tape, &student_vars, xm)?;
                lt_terms.push(self_training_loss(&mut tape, logits_m, &mixed_pseudo)?);

                if with_consistency {
                    let sample = cfg.sample.sample(h, w, &mut sample_rng)?;
                    let probs_m = tape.softmax_channels(logits_m)?;
                    let student_sim = build_similarity_matrix(&mut tape, probs_m, &sample, cfg.measure)?;
                    let tm = tape.constant(teacher_mixed.clone());
                    let teacher_sim = build_similarity_matrix(&mut tape, tm, &sample, cfg.measure)?;
                    lc_terms.push(consistency_loss(&mut tape, &student_sim, &teacher_sim)?);
                    slot.sample = Some(sample);
                }

                if keep_trace {
                    slot.teacher_target_probs = Some(tp_target);
                    slot.confidence = pseudo.confidence;
                    slot.student_input = Some(student_input);
                    slot.mixed_logits = Some(tape.value(logits_m).clone());
                    slot.teacher_mixed_probs = Some(teacher_mixed);
                    slot.mix = Some(mix);
                }
            }
            if keep_trace {
                slots.push(slot);
            }
        }

        let l_s = mean_of(&mut tape, &ls_terms)?;
        let (total, l_t, l_c) = if uda {
            let l_t = mean_of(&mut tape, &lt_terms)?;
            let l_c = if with_consistency { mean_of(&mut tape, &lc_terms)? } else { tape.constant(Tensor::scalar(0.0)) };
            (total_loss(&mut tape, l_s, l_t, l_c, cfg.lambda_c)?, Some(l_t), Some(l_c))
        } else {
            (l_s, None, None)
        };
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item() as f64);
        let (loss_s, loss_t, loss_c) = (value(Some(l_s)), value(l_t), value(l_c));
        let total_value = value(Some(total));
        for (name, v) in [("loss_s", loss_s), ("loss_t", loss_t), ("loss_c", loss_c), ("total", total_value)] {
            if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { step: t, batch_seed, detail: format!("{name} = {v}") });
            }
        }

        let grads = tape.backward(total)?;
        let student_grads: Vec<Tensor<f32>> = student_vars.iter().map(|&v| grads.get(v)).collect();
        let teacher_grad_max_abs = teacher_vars
            .iter()
            .flat_map(|&v| grads.get(v).into_data())
            .fold(0.0f64, |m, g| m.max((g as f64).abs()));
        self.optimizer.step(&mut self.state.student, &student_grads, lr)?;
        let teacher_after_optimizer = keep_trace.then(|| self.state.teacher.clone());
        self.state.ema_update()?;

        let record = MetricsRecord {
            step: self.state.step,
            loss_s,
            loss_t,
            loss_c,
            q_mean: if uda { q_sum / cfg.batch_size as f64 } else { 0.0 },
            lr,
            eval: None,
        };
        let trace = keep_trace.then(|| StepTrace {
            batch_seed,
            slots,
            loss_s,
            loss_t,
            loss_c,
            student_grads,
            teacher_grad_max_abs,
            teacher_before: teacher_before.expect("kept with trace"),
            teacher_after_optimizer: teacher_after_optimizer.expect("kept with trace"),
        });
        Ok((record, trace))
    }

    /// Trains until the configured iteration count, writing one metrics line
    /// per step to `sink`. Both networks are evaluated every `eval_interval`
    /// steps and at the end.
    pub fn run_to_end(&mut self, sink: &mut dyn Write) -> Result<RunOutcome> {
        self.run_until(self.config.iterations, sink)
    }

    /// Like [`Trainer::run_to_end`] but stops once `stop` iterations are complete.
    pub fn run_until(&mut self, stop: u64, sink: &mut dyn Write) -> Result<RunOutcome> {
        let stop = stop.min(self.config.iterations);
        let mut records = Vec::new();
        let mut band_violations = 0;
        let mut last_eval = None;
        while self.state.step < stop {
            let mut record = self.step()?;
            if record.step % self.config.eval_interval == 0 || record.step == self.config.iterations {
                let eval = self.evaluate()?;
                if record.step > self.config.warmup && eval.teacher.miou < eval.student.miou - TEACHER_BAND {
                    band_violations += 1;
                    log::warn!(
                        "step {}: teacher mIoU {:.4} trails student mIoU {:.4} by more than {TEACHER_BAND}",
                        record.step,
                        eval.teacher.miou,
                        eval.student.miou
                    );
                }
                last_eval = Some(eval.clone());
                record.eval = Some(eval);
            }
            writeln!(sink, "{}", record.to_line()).map_err(|e| Error::io("metrics stream", e))?;
            records.push(record);
        }
        let final_eval = match last_eval {
            Some(e) => e,
            None => self.evaluate()?,
        };
        Ok(RunOutcome { records, final_eval, band_violations })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalMetrics,
    /// Evaluations after warmup where the teacher trailed the student by more
    /// than [`TEACHER_BAND`].
    pub band_violations: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig { height: 16, width: 16, iterations: 6, warmup: 2, eval_size: 2, eval_interval: 3, ..ExperimentConfig::default() }
    }

    fn bits(p: &ModelParams<f32>) -> Vec<u32> {
        p.tensors().iter().flat_map(|n| n.tensor.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn teacher_is_untouched_until_the_ema_update() {
        let mut t = Trainer::new(small()).unwrap();
        for _ in 0..3 {
            let (_, trace) = t.step_traced().unwrap();
            assert_eq!(trace.teacher_before, trace.teacher_after_optimizer);
            assert_eq!(trace.teacher_grad_max_abs, 0.0);
            assert_ne!(&trace.teacher_after_optimizer, &t.state().teacher);
        }
    }

    #[test]
    fn records_are_finite_and_counted() {
        let mut t = Trainer::new(small()).unwrap();
        let out = t.run_to_end(&mut std::io::sink()).unwrap();
        assert_eq!(out.records.len(), 6);
        assert_eq!(out.records.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
        assert!(out.records[2].eval.is_some() && out.records[5].eval.is_some() && out.records[0].eval.is_none());
        for r in &out.records {
            assert!(r.loss_s.is_finite() && r.loss_t.is_finite() && r.loss_c.is_finite());
            assert!((0.0..=1.0).contains(&r.q_mean));
        }
        assert!(t.is_finished());
        assert!(t.step().is_err());
    }

    #[test]
    fn zero_lambda_matches_skipped_consistency_bit_for_bit() {
        let cfg = ExperimentConfig { lambda_c: 0.0, ..small() };
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(cfg).unwrap();
        b.set_skip_consistency(true);
        for _ in 0..6 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert!(ra.loss_c > 0.0);
            assert_eq!(rb.loss_c, 0.0);
            assert_eq!(ra.loss_s.to_bits(), rb.loss_s.to_bits());
            assert_eq!(ra.loss_t.to_bits(), rb.loss_t.to_bits());
            assert_eq!(bits(&a.state().student), bits(&b.state().student));
            assert_eq!(bits(&a.state().teacher), bits(&b.state().teacher));
        }
    }

    #[test]
    fn source_only_reports_zero_adaptation_terms() {
        let mut t = Trainer::new(ExperimentConfig { mode: TrainMode::SourceOnly, ..small() }).unwrap();
        let r = t.step().unwrap();
        assert_eq!((r.loss_t, r.loss_c, r.q_mean), (0.0, 0.0, 0.0));
        assert!(r.loss_s > 0.0);
    }

    #[test]
    fn non_finite_weights_trip_the_watchdog_with_the_batch_seed() {
        let mut t = Trainer::new(small()).unwrap();
        t.step().unwrap();
        for p in t.state.student.tensors_mut() {
            p.data_mut().fill(f32::MAX);
        }
        let expected_seed = t.batch_seed(1);
        match t.step() {
            Err(Error::Divergence { step, batch_seed, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(batch_seed, expected_seed);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_from_another_config_is_rejected() {
        let t = Trainer::new(small()).unwrap();
        let ckpt = t.checkpoint();
        let err = Trainer::from_checkpoint(ExperimentConfig { seed: 99, ..small() }, &ckpt).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::ConfigMismatch { .. })));
    }
}
