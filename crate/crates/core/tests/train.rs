use semi_llie_core::data::{
    make_batch, synthesize_lowlight, synthetic_scene, InMemorySource, LowLightDraw,
};
use semi_llie_core::encoder::build_test_encoder;
use semi_llie_core::losses::ScrForm;
use semi_llie_core::train::{TrainConfig, TrainState};
use semi_llie_core::{Error, ParamRole};

fn tiny() -> TrainConfig {
    TrainConfig {
        width: 4,
        n_groups: 1,
        n_blocks: 1,
        n_state: 4,
        crop: 32,
        unpaired_size: 32,
        paired_per_batch: 2,
        unpaired_per_batch: 2,
        disc_width: 4,
        lr: 1e-3,
        epochs: 10,
        lr_constant_epochs: 5,
        ema_beta: 0.9,
        seed: 5,
        ..Default::default()
    }
}

fn zero_aug(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        blur_sigma_min: 0.0,
        blur_sigma_max: 0.0,
        grayscale_prob: 0.0,
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
        ..cfg
    }
}

fn fixture(n: u64, side: usize, equal: bool) -> InMemorySource<f32> {
    let mut src = InMemorySource::default();
    for i in 0..n {
        let gt = synthetic_scene::<f32>(i, side, side + 4);
        let low = if equal {
            gt.clone()
        } else {
            let draw = LowLightDraw {
                scale: 0.6,
                gamma: 2.5,
                noise_sigma: 0.01,
                noise_seed: i,
            };
            synthesize_lowlight(&gt, &draw).unwrap()
        };
        src.paired.push((low, gt));
        src.unpaired
            .push(synthetic_scene::<f32>(100 + i, side + 2, side));
    }
    src
}

#[test]
fn config_text_round_trips() {
    let mut cfg = TrainConfig {
        lr: 3.5e-4,
        scr_form: ScrForm::Literal,
        encoder_weights: "enc.ckpt".into(),
        adversarial: false,
        ..Default::default()
    };
    cfg.seed = 77;
    let mut back = TrainConfig::default();
    for (k, v) in cfg.to_pairs() {
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert_eq!(TrainConfig::KEYS.len(), cfg.to_pairs().len());
    assert!(matches!(
        back.set("learning_rate", "1"),
        Err(Error::Config(_))
    ));
    assert!(back.set("epochs", "many").is_err());
    assert!(TrainConfig {
        epochs: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn step_zero_losses_vanish_on_identity_fixtures() {
    let cfg = zero_aug(tiny());
    let src = fixture(2, 32, true);
    let enc = build_test_encoder::<f32>(1);
    let mut state = TrainState::<f32>::new(cfg).unwrap();
    let r = state.step_on(&enc, &src).unwrap();
    assert_eq!(r.fidelity, 0.0);
    assert_eq!(r.gradient, 0.0);
    assert_eq!(r.perceptual, 0.0);
    assert_eq!(r.supervised, 0.0);
    assert_eq!(r.consistency, Some(0.0));
    assert_eq!(r.contrastive, Some(0.0));
    assert!(r.adversarial.unwrap() > 0.0);
}

#[test]
fn semi_supervised_steps_stay_finite_and_move_the_teacher() {
    let cfg = tiny();
    let src = fixture(3, 32, false);
    let enc = build_test_encoder::<f32>(2);
    let mut state = TrainState::<f32>::new(cfg.clone()).unwrap();
    let disc0 = state.discriminator().params().clone();
    for _ in 0..4 {
        let before = state.models().clone();
        let r = state.step_on(&enc, &src).unwrap();
        for (name, v) in r.entries() {
            assert!(v.is_finite(), "{name}");
        }
        assert!(r.consistency.is_some() && r.contrastive.is_some());
        assert!(r.adversarial.is_some() && r.discriminator.is_some());
        assert!(r.ema_convex && r.teacher_change > 0.0);

        // teacher moved by exactly the EMA rule towards the updated student
        let c = (1.0f64 - 0.9) as f32;
        for ((_, t), ((_, t0), (_, s))) in state
            .models()
            .teacher()
            .iter()
            .zip(before.teacher().iter().zip(state.models().student().iter()))
        {
            for (got, (a, b)) in t.data().iter().zip(t0.data().iter().zip(s.data())) {
                assert_eq!(*got, a + c * (b - a));
            }
        }
        assert_ne!(state.models().student(), before.student());
    }
    assert_eq!(state.step(), 4);
    assert_ne!(state.discriminator().params(), &disc0);
    assert_eq!(state.models().teacher().role(), ParamRole::Teacher);
}

#[test]
fn seeded_runs_are_identical() {
    let src = fixture(3, 32, false);
    let enc = build_test_encoder::<f32>(3);
    let run = || {
        let mut state = TrainState::<f32>::new(tiny()).unwrap();
        let records: Vec<_> = (0..3).map(|_| state.step_on(&enc, &src).unwrap()).collect();
        (records, state)
    };
    let (ra, sa) = run();
    let (rb, sb) = run();
    assert_eq!(ra, rb);
    assert_eq!(sa, sb);
}

#[test]
fn supervised_only_skips_the_unpaired_branch() {
    let cfg = TrainConfig {
        semi_supervised: false,
        adversarial: false,
        ..tiny()
    };
    let src = fixture(2, 32, false);
    let enc = build_test_encoder::<f32>(4);
    let mut state = TrainState::<f32>::new(cfg).unwrap();
    let disc0 = state.discriminator().clone();
    let r = state.step_on(&enc, &src).unwrap();
    assert!(r.consistency.is_none() && r.adversarial.is_none() && r.discriminator.is_none());
    assert_eq!(r.total, r.supervised);
    assert_eq!(state.discriminator(), &disc0);
}

#[test]
fn explicit_batches_match_step_on() {
    let cfg = tiny();
    let src = fixture(2, 32, false);
    let enc = build_test_encoder::<f32>(5);
    let mut a = TrainState::<f32>::new(cfg.clone()).unwrap();
    let mut b = a.clone();
    let plan = cfg.batch_plan(2, 2);
    let batch = make_batch(&src, &plan, cfg.crop, &cfg.augmentation(), 0).unwrap();
    let ra = a.step_on(&enc, &src).unwrap();
    let rb = b.train_step(&enc, &batch, 0).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn diverging_runs_report_the_offending_loss() {
    let cfg = TrainConfig {
        lr: 1e30,
        semi_supervised: false,
        adversarial: false,
        ..tiny()
    };
    let src = fixture(2, 32, false);
    let enc = build_test_encoder::<f32>(6);
    let mut state = TrainState::<f32>::new(cfg).unwrap();
    let mut err = None;
    for _ in 0..5 {
        if let Err(e) = state.step_on(&enc, &src) {
            err = Some(e);
            break;
        }
    }
    match err {
        Some(Error::NonFinite { name, step }) => {
            assert_eq!(name, "fidelity");
            assert!(step >= 1);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}
