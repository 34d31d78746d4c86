use uda_consistency::autodiff::{Tensor, LOG_FLOOR};
use uda_consistency::losses::{pixel_similarity, Measure};
use uda_consistency::sampling::SampleMode;
use uda_consistency::train::experiment::{resume_experiment, CHECKPOINT_FILE, METRICS_FILE};
use uda_consistency::train::{parse_stream, run_experiment, Checkpoint, ExperimentConfig, Trainer};
use uda_consistency::Error;

fn quick(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        height: 16,
        width: 16,
        iterations: 12,
        warmup: 3,
        eval_interval: 4,
        eval_size: 3,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn softmax_at(logits: &Tensor<f32>, p: usize) -> Vec<f64> {
    let shape = logits.shape();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let z: Vec<f64> = (0..c).map(|k| logits.data()[k * hw + p] as f64).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ce(logits: &Tensor<f32>, labels: &[u8]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(p, &y)| -softmax_at(logits, p)[y as usize].max(LOG_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

fn column(probs: &Tensor<f32>, p: usize) -> Vec<f64> {
    let shape = probs.shape();
    let hw = shape[1] * shape[2];
    (0..shape[0]).map(|k| probs.data()[k * hw + p] as f64).collect()
}

fn check_reevaluation(config: ExperimentConfig) {
    let measure = config.measure;
    let mut trainer = Trainer::new(config).unwrap();
    trainer.step().unwrap();
    let (_, trace) = trainer.step_traced().unwrap();
    let (mut ls, mut lt, mut lc) = (0.0, 0.0, 0.0);
    for slot in &trace.slots {
        ls += ce(&slot.source_logits, &slot.source.labels);
        let mixed = slot.mixed_logits.as_ref().unwrap();
        let mix = slot.mix.as_ref().unwrap();
        lt += slot.confidence * ce(mixed, &mix.labels);
        let teacher = slot.teacher_mixed_probs.as_ref().unwrap();
        let sample = slot.sample.as_ref().unwrap();
        let (mut sq, mut count) = (0.0, 0usize);
        for list in sample.lists() {
            for &i in list {
                for &j in list {
                    let s = pixel_similarity(&softmax_at(mixed, i), &softmax_at(mixed, j), measure).unwrap();
                    let t = pixel_similarity(&column(teacher, i), &column(teacher, j), measure).unwrap();
                    sq += (s - t).powi(2);
                    count += 1;
                }
            }
        }
        lc += sq / count as f64;
    }
    let n = trace.slots.len() as f64;
    for (name, got, want) in [("L_S", trace.loss_s, ls / n), ("L_T", trace.loss_t, lt / n), ("L_C", trace.loss_c, lc / n)] {
        assert!((got - want).abs() < 1e-5, "{measure} {name}: tape {got} vs straight-line {want}");
    }
    assert!(trace.loss_c > 0.0);
}

#[test]
fn step_losses_match_straight_line_reevaluation() {
    let dir = tempfile::tempdir().unwrap();
    for m in Measure::ALL {
        check_reevaluation(ExperimentConfig { measure: m, lambda_c: m.default_lambda(), ..quick(dir.path()) });
    }
    let mut boxed = quick(dir.path());
    boxed.sample.mode = SampleMode::BoxLocal;
    boxed.sample.n_box = 4;
    boxed.sample.n_pair = 8;
    boxed.sample.crop_size = 4;
    check_reevaluation(boxed);
}

#[test]
fn mixed_pseudo_labels_follow_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(quick(dir.path())).unwrap();
    let (_, trace) = trainer.step_traced().unwrap();
    for slot in &trace.slots {
        let mix = slot.mix.as_ref().unwrap();
        let tp = slot.teacher_target_probs.as_ref().unwrap();
        let pseudo = uda_consistency::losses::generate_pseudo_label(tp).unwrap();
        for (p, &label) in mix.labels.iter().enumerate() {
            let expected = if mix.mask[p] { slot.source.labels[p] } else { pseudo[p] };
            assert_eq!(label, expected);
        }
        assert!(mix.mask.iter().zip(&slot.source.labels).all(|(&m, l)| !m || mix.selected.contains(l)));
    }
}

#[test]
fn identical_runs_write_identical_streams() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&quick(a.path())).unwrap();
    run_experiment(&quick(b.path())).unwrap();
    let ma = std::fs::read(a.path().join(METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);
    let text = String::from_utf8(ma).unwrap();
    let records = parse_stream(&text).unwrap();
    assert_eq!(records.len(), 12);
    assert_eq!(records.iter().filter(|r| r.eval.is_some()).count(), 3);
    assert_eq!(
        std::fs::read(a.path().join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(b.path().join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = quick(full_dir.path());
    run_experiment(&full).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let half = ExperimentConfig { out_dir: part_dir.path().to_path_buf(), ..full.clone() };
    let mut trainer = Trainer::new(half.clone()).unwrap();
    let mut first = Vec::new();
    for _ in 0..5 {
        first.push(trainer.step().unwrap());
    }
    let ckpt_path = part_dir.path().join("mid.crda");
    trainer.checkpoint().save(&ckpt_path).unwrap();
    drop(trainer);

    let restored = Checkpoint::load(&ckpt_path).unwrap();
    let mut resumed = Trainer::from_checkpoint(half, &restored).unwrap();
    assert_eq!(resumed.step_count(), 5);
    let out = resumed.run_to_end(&mut std::io::sink()).unwrap();
    let uninterrupted = parse_stream(&std::fs::read_to_string(full_dir.path().join(METRICS_FILE)).unwrap()).unwrap();
    let mut stitched: Vec<_> = first.iter().map(|r| r.to_line()).collect();
    stitched.extend(out.records.iter().map(|r| r.to_line()));
    let expected: Vec<_> = uninterrupted
        .iter()
        .map(|r| {
            // The first five steps were taken one by one, without evaluation.
            let mut r = r.clone();
            if r.step <= 5 {
                r.eval = None;
            }
            r.to_line()
        })
        .collect();
    assert_eq!(stitched, expected);
    let final_full = Checkpoint::load(&full_dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(resumed.checkpoint().encode(), final_full.encode());
}

#[test]
fn resume_experiment_appends_to_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut sink = Vec::new();
    for _ in 0..4 {
        let r = trainer.step().unwrap();
        sink.extend_from_slice((r.to_line() + "\n").as_bytes());
    }
    std::fs::write(dir.path().join(METRICS_FILE), &sink).unwrap();
    let report = resume_experiment(&cfg, &trainer.checkpoint()).unwrap();
    assert_eq!(report.steps, 12);
    let records = parse_stream(&std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
}

#[test]
fn unwritable_output_dir_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let cfg = quick(&blocker.join("run"));
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn truncated_checkpoint_leaves_no_state() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::new(quick(dir.path())).unwrap();
    let bytes = trainer.checkpoint().encode();
    let path = dir.path().join("cut.crda");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
}
