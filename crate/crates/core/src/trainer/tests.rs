use super::*;
use crate::data::generate_synthetic;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        steps: 12,
        batch_size: 4,
        v_local: 2,
        local_size: 4,
        num_anchors: 8,
        k: 2,
        num_patch_anchors: 4,
        k_patch: 0,
        bank_cls: 32,
        bank_patch: 32,
        encoder: EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proj_hidden: 8,
            proj_out: 16,
        },
        ..TrainConfig::default()
    }
}

fn tiny_data() -> ImageDataset {
    generate_synthetic(3, 4, 8, 10.0, 1).unwrap()
}

#[test]
fn config_json_defaults_and_unknown_fields() {
    let cfg = TrainConfig::from_json(r#"{"steps": 5}"#).unwrap();
    assert_eq!(cfg.steps, 5);
    assert_eq!(cfg.num_anchors, TrainConfig::default().num_anchors);
    match TrainConfig::from_json(r#"{"stepz": 5}"#) {
        Err(TrainError::ConfigInvalid { field, .. }) => assert_eq!(field, "stepz"),
        other => panic!("{other:?}"),
    }
    match TrainConfig::from_json(r#"{"num_anchors": 5000}"#) {
        Err(TrainError::ConfigInvalid { field, .. }) => assert_eq!(field, "num_anchors"),
        other => panic!("{other:?}"),
    }
    let cfg = TrainConfig::from_json(
        r#"{"mode": "parametric_baseline", "cls_mode": {"kind": "one_hot"}}"#,
    )
    .unwrap();
    assert_eq!(cfg.mode, TrainMode::ParametricBaseline);
    assert_eq!(cfg.cls_mode, ContributionMode::OneHot);
    let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn steps_are_deterministic() {
    let ds = tiny_data();
    let mut a = TrainState::<f32>::new(tiny_config()).unwrap();
    let mut b = TrainState::<f32>::new(tiny_config()).unwrap();
    for _ in 0..100 {
        let ra = a.train_step(&ds).unwrap();
        let rb = b.train_step(&ds).unwrap();
        assert_eq!(ra.metrics, rb.metrics);
        assert!(ra.metrics.is_finite());
    }
    assert_eq!(a, b);
}

#[test]
fn bank_cursor_advances_by_batch() {
    let ds = tiny_data();
    let mut st = TrainState::<f32>::new(tiny_config()).unwrap();
    for i in 1..=10 {
        st.train_step(&ds).unwrap();
        assert_eq!(st.bank_cls.cursor(), (4 * i) % 32);
        assert_eq!(st.bank_patch.cursor(), (4 * i) % 32);
    }
}

#[test]
fn teacher_follows_ema_of_student_snapshots() {
    let ds = tiny_data();
    let mut st = TrainState::<f64>::new(tiny_config()).unwrap();
    let mut expected: Vec<Matrix<f64>> = st.teacher.tensors().to_vec();
    for s in 0..8 {
        st.train_step(&ds).unwrap();
        let m = momentum_schedule(s, st.config.steps, st.config.m0);
        for (t, snap) in expected.iter_mut().zip(st.student.tensors()) {
            for (a, &b) in t.data_mut().iter_mut().zip(snap.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        for (t, e) in st.teacher.tensors().iter().zip(&expected) {
            assert!(t.max_abs_diff(e) < 1e-6);
        }
    }
}

#[test]
fn anchors_fixed_or_resampled() {
    let ds = tiny_data();
    let mut fixed = TrainState::<f32>::new(fixed_anchor_mode(&tiny_config()).unwrap()).unwrap();
    let first = fixed.train_step(&ds).unwrap();
    for _ in 0..10 {
        let r = fixed.train_step(&ds).unwrap();
        assert_eq!(r.cls_anchors, first.cls_anchors);
        assert_eq!(r.patch_anchors, first.patch_anchors);
    }
    let mut free = TrainState::<f32>::new(tiny_config()).unwrap();
    let mut prev = free.train_step(&ds).unwrap().cls_anchors;
    for _ in 0..10 {
        let cur = free.train_step(&ds).unwrap().cls_anchors;
        assert_ne!(cur, prev);
        assert_eq!(cur.len(), 2);
        prev = cur;
    }
    let base = TrainConfig {
        mode: TrainMode::ParametricBaseline,
        ..tiny_config()
    };
    assert!(fixed_anchor_mode(&base).is_err());
}

#[test]
fn modes_zero_the_unused_loss() {
    let ds = tiny_data();
    let cls_only = TrainConfig {
        mode: TrainMode::ClsOnly,
        ..tiny_config()
    };
    let r = TrainState::<f32>::new(cls_only)
        .unwrap()
        .train_step(&ds)
        .unwrap();
    assert_eq!(r.metrics.loss_patch, 0.0);
    assert!(r.metrics.loss_cls > 0.0);
    assert!(r.patch_anchors.is_empty());

    let mim_only = TrainConfig {
        mode: TrainMode::MimOnly,
        ..tiny_config()
    };
    let r = TrainState::<f32>::new(mim_only)
        .unwrap()
        .train_step(&ds)
        .unwrap();
    assert_eq!(r.metrics.loss_cls, 0.0);
    assert!(r.metrics.loss_patch > 0.0);
}

#[test]
fn baseline_mode_leaves_banks_alone() {
    let ds = tiny_data();
    let cfg = TrainConfig {
        mode: TrainMode::ParametricBaseline,
        ..tiny_config()
    };
    let mut st = TrainState::<f32>::new(cfg).unwrap();
    let bank = st.bank_cls.clone();
    let center = st.baseline.as_ref().unwrap().teacher_cls.center.clone();
    for _ in 0..5 {
        let r = st.train_step(&ds).unwrap();
        assert!(r.metrics.is_finite() && r.metrics.loss_patch > 0.0);
    }
    assert_eq!(st.bank_cls, bank);
    assert_ne!(st.baseline.as_ref().unwrap().teacher_cls.center, center);
}

#[test]
fn non_finite_parameters_abort() {
    let ds = tiny_data();
    let mut st = TrainState::<f32>::new(tiny_config()).unwrap();
    st.student.tensors_mut()[0].data_mut()[0] = f32::NAN;
    match st.train_step(&ds) {
        Err(TrainError::NonFiniteLoss {
            step: 0,
            diagnostic,
        }) => {
            assert!(diagnostic.contains("patch_embed.weight"), "{diagnostic}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..tiny_config()
    };
    let out = run(&cfg, &ds, dir.path(), None).unwrap();
    assert_eq!(out.steps_run, 0);
    assert!(out.final_checkpoint.ends_with("ckpt_000000"));
    let st: TrainState<f32> = load_checkpoint(&out.final_checkpoint).unwrap();
    assert_eq!(st, TrainState::new(cfg).unwrap());
    assert_eq!(
        fs::read_to_string(out.metrics_path).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let ds = tiny_data();
    for mode in [TrainMode::Sop, TrainMode::ParametricBaseline] {
        let cfg = TrainConfig {
            checkpoint_every: 5,
            fixed_anchors: mode == TrainMode::Sop,
            mode,
            ..tiny_config()
        };
        let full = tempfile::tempdir().unwrap();
        let a = run(&cfg, &ds, full.path(), None).unwrap();
        assert_eq!(a.steps_run, 12);

        let split = tempfile::tempdir().unwrap();
        fs::copy(&a.metrics_path, split.path().join("metrics.csv")).unwrap();
        let ckpt = full.path().join(checkpoint_dir_name(5));
        let b = run(&cfg, &ds, split.path(), Some(&ckpt)).unwrap();
        assert_eq!(b.steps_run, 7);
        assert_eq!(
            fs::read_to_string(&a.metrics_path).unwrap(),
            fs::read_to_string(&b.metrics_path).unwrap()
        );
        let sa: TrainState<f32> = load_checkpoint(&a.final_checkpoint).unwrap();
        let sb: TrainState<f32> = load_checkpoint(&b.final_checkpoint).unwrap();
        assert_eq!(sa, sb);

        // resuming a finished run is a no-op
        let c = run(&cfg, &ds, split.path(), Some(&b.final_checkpoint)).unwrap();
        assert_eq!(c.steps_run, 0);
        assert_eq!(read_metrics(&c.metrics_path).unwrap().len(), 12);
    }
}

#[test]
fn resume_rejects_other_config() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 2,
        ..tiny_config()
    };
    let a = run(&cfg, &ds, dir.path(), None).unwrap();
    let other = TrainConfig { k: 3, ..cfg };
    assert!(matches!(
        run(&other, &ds, dir.path(), Some(&a.final_checkpoint)),
        Err(TrainError::ResumeMismatch { .. })
    ));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 1,
        ..tiny_config()
    };
    let a = run(&cfg, &ds, dir.path(), None).unwrap();
    fs::write(a.final_checkpoint.join("bank_cls.f32"), [0u8; 7]).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&a.final_checkpoint),
        Err(TrainError::CheckpointCorrupt(_))
    ));
    assert!(matches!(
        load_checkpoint::<f32>(&dir.path().join("missing")),
        Err(TrainError::CheckpointCorrupt(_))
    ));
}

#[test]
fn dataset_geometry_is_checked() {
    let ds = generate_synthetic(2, 2, 16, 0.0, 1).unwrap();
    let mut st = TrainState::<f32>::new(tiny_config()).unwrap();
    assert!(matches!(
        st.train_step(&ds),
        Err(TrainError::ConfigInvalid { .. })
    ));
}
