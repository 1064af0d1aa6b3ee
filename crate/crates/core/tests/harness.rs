//! Synthetic data, augmentation, training, persistence and sweeps.

use merit_core::harness::{
    augment, evaluate, read_dataset, sample_pool, stack_batch, sweep, train, write_sample, RunConfig, SweepAxis, SynthSpec,
    Trainer, Transform, METRICS_HEADER,
};
use merit_core::metrics::{component_areas, evaluate_case, LabelMask};
use merit_core::model::{load_checkpoint, save_checkpoint, Merit};
use merit_core::RngStream;
use std::f64::consts::PI;

fn quick(steps: usize) -> RunConfig {
    let mut c = RunConfig::compact();
    c.train.max_steps = steps;
    c.train.eval_every = 0;
    c.train.train_samples = 4;
    c.train.eval_samples = 4;
    c.train.batch_size = 2;
    c
}

/// Two objects on a small canvas.
fn small_spec(n: usize) -> SynthSpec {
    let r = n as f64 / 32.0;
    SynthSpec {
        image_size: n,
        objects_per_image: (2, 2),
        radius_small: (2.0 * r, 3.0 * r),
        radius_large: (5.0 * r, 7.0 * r),
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_objects_span_both_scales() {
    let spec = SynthSpec::default();
    let small_max = PI * spec.radius_small.1.powi(2);
    let large_min = 0.9 * PI * spec.radius_large.0.powi(2);
    for i in 0..100 {
        let s = spec.sample(i).unwrap();
        let mut areas = Vec::new();
        for class in 1..spec.num_classes {
            areas.extend(component_areas(&s.mask.binary(class)));
        }
        assert!(areas.iter().any(|&a| a as f64 <= small_max), "sample {i}: {areas:?}");
        assert!(areas.iter().any(|&a| a as f64 >= large_min), "sample {i}: {areas:?}");
        assert!(s.mask.labels().iter().all(|&l| (l as usize) < spec.num_classes));
        assert!(s.image.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn samples_are_reproducible() {
    let spec = SynthSpec::default();
    assert_eq!(spec.sample(7).unwrap(), spec.sample(7).unwrap());
    assert_ne!(spec.sample(7).unwrap(), spec.sample(8).unwrap());
}

fn class_counts(m: &LabelMask) -> [usize; 256] {
    let mut c = [0; 256];
    m.labels().iter().for_each(|&l| c[l as usize] += 1);
    c
}

#[test]
fn exact_transforms_move_image_and_mask_together() {
    let s = small_spec(24)
        .sample(3)
        .unwrap();
    let n = 24;
    // tag every pixel with a unique value in channel 0 and a unique label
    let mut image = s.image.clone();
    for i in 0..n * n {
        image.data_mut()[i] = i as f32;
    }
    let mask = LabelMask::new(n, n, (0..n * n).map(|i| (i % 251) as u8).collect()).unwrap();
    for t in [Transform::HorizontalFlip, Transform::VerticalFlip, Transform::Rot90(1), Transform::Rot90(2), Transform::Rot90(3)] {
        let (img, msk) = t.apply(&image, &mask);
        for r in 0..n {
            for c in 0..n {
                let src = img.data()[r * n + c] as usize;
                assert_eq!(msk.get(r, c), (src % 251) as u8, "{t:?}");
            }
        }
        let (_, m2) = t.apply(&s.image, &s.mask);
        assert_eq!(class_counts(&m2), class_counts(&s.mask), "{t:?}");
    }
}

#[test]
fn random_augmentation_keeps_labels_valid() {
    let spec = small_spec(32);
    let mut rng = RngStream::new(1, 0);
    for i in 0..30 {
        let s = spec.sample(i).unwrap();
        let a = augment(&s, &mut rng);
        assert_eq!(a.image.shape(), s.image.shape());
        assert!(a.mask.labels().iter().all(|&l| l < 3));
    }
}

#[test]
fn one_step_decreases_the_sample_loss() {
    let mut c = quick(1);
    c.train.augment = false;
    let mut t = Trainer::new(&c).unwrap();
    let sample = c.synth.sample(0).unwrap();
    let before = t.loss_on(&[&sample]).unwrap();
    let reported = t.step_on(&[&sample]).unwrap();
    let after = t.loss_on(&[&sample]).unwrap();
    assert!((reported - before).abs() < 1e-4 * before);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn same_seed_same_trace() {
    let c = quick(3);
    let (_, a) = train(&c, None).unwrap();
    let (_, b) = train(&c, None).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.fingerprint(), b.fingerprint());
    let mut other = c.clone();
    other.train.seed = 1;
    let (_, d) = train(&other, None).unwrap();
    assert_ne!(a.losses, d.losses);
    assert_eq!(a.config_hash, d.config_hash);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let c = quick(2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&c).unwrap();
    let rec = t.run(Some(dir.path()), |_, _| {}).unwrap();
    let held = sample_pool(&c.synth, 1000, 4).unwrap();
    let before = evaluate(&t.model, &held, 2).unwrap();
    let mut fresh = Merit::<f32>::new(&c.model, 99).unwrap();
    load_checkpoint(&mut fresh, &dir.path().join("final.ckpt")).unwrap();
    let after = evaluate(&fresh, &held, 2).unwrap();
    assert_eq!(before, after);
    for f in ["config.txt", "metrics.csv", "losses.csv", "best.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, rec.metrics_csv());
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    let cfg = RunConfig::from_text(&std::fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(cfg, c);
    // a second save of the loaded model is byte-identical
    let p2 = dir.path().join("again.ckpt");
    save_checkpoint(&fresh, &p2).unwrap();
    assert_eq!(std::fs::read(p2).unwrap(), std::fs::read(dir.path().join("final.ckpt")).unwrap());
}

#[test]
fn ground_truth_scores_perfectly() {
    let spec = SynthSpec::default();
    for i in 0..5 {
        let s = spec.sample(i).unwrap();
        let r = evaluate_case(&s.mask, &s.mask, 3).unwrap();
        assert_eq!(r.mean_dsc, 100.0);
        assert_eq!(r.mean_hd95, Some(0.0));
        assert_eq!((r.per_class_dsc.len(), r.per_class_hd95.len()), (2, 2));
    }
}

#[test]
fn dataset_round_trip_on_disk() {
    let spec = small_spec(32);
    let dir = tempfile::tempdir().unwrap();
    let samples = sample_pool(&spec, 0, 3).unwrap();
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir.path(), i, s).unwrap();
    }
    assert!(dir.path().join("img_000000.pgm").exists());
    assert!(dir.path().join("msk_000002.pgm").exists());
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.mask, b.mask);
        let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn batches_stack_images_and_labels() {
    let spec = small_spec(32);
    let s = sample_pool(&spec, 0, 2).unwrap();
    let (img, lab) = stack_batch(&[&s[0], &s[1]]).unwrap();
    assert_eq!(img.shape(), &[2, 3, 32, 32]);
    assert_eq!(lab.len(), 2 * 32 * 32);
}

#[test]
fn lambda1_sweep_emits_one_row_per_value_and_seed() {
    let c = quick(1);
    let values = SweepAxis::Lambda1.default_values();
    let table = sweep(&c, SweepAxis::Lambda1, &values, &[0, 1], |_| {}).unwrap();
    assert_eq!(table.rows.len(), 10);
    assert_eq!(table.runs_csv().lines().count(), 11);
    assert_eq!(table.summary_csv().lines().count(), 6);
    let hashes: std::collections::BTreeSet<&str> = table.rows.iter().map(|r| r.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), 5);
}

#[test]
fn invalid_sweep_values_fail_before_training() {
    let c = quick(1);
    let err = sweep(&c, SweepAxis::Interpolation, &["bilinear".into(), "lanczos".into()], &[0], |_| panic!("trained"));
    assert!(err.unwrap_err().is_invalid_argument());
    assert!("depth".parse::<SweepAxis>().is_err());
}

#[test]
fn mutation_toggle_changes_only_its_key() {
    let c = quick(1);
    let mut on = c.clone();
    let mut off = c.clone();
    SweepAxis::Mutation.apply(&mut on, "on").unwrap();
    SweepAxis::Mutation.apply(&mut off, "off").unwrap();
    let diff: Vec<_> = on.to_pairs().into_iter().zip(off.to_pairs()).filter(|(a, b)| a != b).collect();
    assert_eq!(diff.len(), 1);
    assert_eq!(diff[0].0 .0, "use_mutation");
    assert_ne!(on.config_hash(), off.config_hash());
}

#[test]
fn config_text_rejects_unknown_keys() {
    assert!(RunConfig::from_text("learning_rate = 0.001\n# comment\n").is_ok());
    assert!(RunConfig::from_text("depth = 3").is_err());
    assert!(RunConfig::from_text("batch_size = many").is_err());
}

#[test]
fn preset_specs_always_place_their_objects() {
    for spec in [SynthSpec::default(), RunConfig::compact().synth] {
        for i in 0..300 {
            spec.sample(i).unwrap();
            spec.sample(merit_core::harness::HELD_OUT_OFFSET + i).unwrap();
        }
    }
}
