use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semi_llie_core::data::{
    make_batch, paired_crop, synthesize_lowlight, synthetic_scene, BatchPlan, InMemorySource,
    LowLightDraw, SampleSource,
};
use semi_llie_core::image::{crop, rot90};
use semi_llie_core::mean_teacher::{weak_augment, AugmentationPolicy};
use semi_llie_core::ImageTensor;

fn rand_image(seed: u64, h: usize, w: usize) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(1, h, w, |_| rng.random_range(0.0..1.0))
}

// channel 0 encodes the row, channel 1 the column, channel 2 a per-image tag
fn coord_image(h: usize, w: usize, tag: f64) -> ImageTensor<f64> {
    ImageTensor::from_fn(1, h, w, |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        match c {
            0 => y as f64 / h as f64,
            1 => x as f64 / w as f64,
            _ => tag,
        }
    })
}

fn source(paired: usize, unpaired: usize, side: usize) -> InMemorySource<f64> {
    InMemorySource {
        paired: (0..paired as u64)
            .map(|i| {
                (
                    rand_image(i, side, side + 3),
                    rand_image(100 + i, side, side + 3),
                )
            })
            .collect(),
        unpaired: (0..unpaired as u64)
            .map(|i| rand_image(200 + i, side + 5, side))
            .collect(),
    }
}

fn plan(paired: usize, unpaired: usize, per_batch: usize, seed: u64) -> BatchPlan {
    BatchPlan {
        paired_len: paired,
        unpaired_len: unpaired,
        paired_per_batch: per_batch,
        unpaired_per_batch: per_batch,
        seed,
    }
}

fn luminance(img: &ImageTensor<f64>) -> f64 {
    img.tensor().mean()
}

#[test]
fn identity_draw_leaves_images_unchanged() {
    let img = rand_image(1, 9, 7);
    assert_eq!(
        synthesize_lowlight(&img, &LowLightDraw::identity()).unwrap(),
        img
    );
}

#[test]
fn darkening_follows_the_closed_form() {
    let img = rand_image(2, 6, 6);
    let draw = LowLightDraw {
        scale: 0.5,
        gamma: 2.0,
        noise_sigma: 0.0,
        noise_seed: 3,
    };
    let out = synthesize_lowlight(&img, &draw).unwrap();
    for (o, i) in out.tensor().data().iter().zip(img.tensor().data()) {
        assert!((o - (0.5 * i).powf(2.0)).abs() < 1e-15);
    }
    let noisy = LowLightDraw {
        noise_sigma: 0.02,
        ..draw
    };
    let a = synthesize_lowlight(&img, &noisy).unwrap();
    assert_eq!(a, synthesize_lowlight(&img, &noisy).unwrap());
    assert_ne!(a, out);
    assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn paired_crop_keeps_pixels_aligned() {
    let (low, gt) = (coord_image(20, 30, 0.25), coord_image(20, 30, 0.75));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..16 {
        let (l, g, d, up) = paired_crop(&low, &gt, 8, &mut rng).unwrap();
        assert!(!up);
        for c in 0..2 {
            assert_eq!(l.plane(0, c), g.plane(0, c));
        }
        // independent reconstruction of the chosen window
        let want = rot90(&crop(&low, d.y, d.x, 8, 8).unwrap(), d.quarter_turns);
        assert_eq!(l, want);
        let corners: Vec<(f64, f64)> = [(0, 0), (0, 7), (7, 0), (7, 7)]
            .iter()
            .map(|&(y, x)| (l.at(0, 0, y, x) * 20.0, l.at(0, 1, y, x) * 30.0))
            .collect();
        let mut ys: Vec<f64> = corners.iter().map(|c| c.0.round()).collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!((ys[0], ys[3]), (d.y as f64, (d.y + 7) as f64));
    }
}

#[test]
fn small_sources_are_resized_up_with_a_warning() {
    let src = source(2, 0, 6);
    let batch = make_batch(
        &src,
        &plan(2, 0, 2, 0),
        8,
        &AugmentationPolicy::resize_only((8, 8)),
        0,
    )
    .unwrap();
    assert_eq!(batch.paired_low.tensor().shape(), &[2, 3, 8, 8]);
    assert_eq!(batch.warnings.len(), 2);
    assert!(batch.unpaired_weak.is_none());
}

#[test]
fn batches_are_pure_functions_of_step_and_seed() {
    let src = source(5, 3, 16);
    let policy = AugmentationPolicy {
        resize_to: (12, 12),
        ..Default::default()
    };
    let p = plan(5, 3, 2, 9);
    let a = make_batch(&src, &p, 12, &policy, 4).unwrap();
    let b = make_batch(&src, &p, 12, &policy, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(
        a,
        make_batch(&src, &plan(5, 3, 2, 10), 12, &policy, 4).unwrap()
    );
    assert_eq!(a.paired_low.tensor().shape(), &[2, 3, 12, 12]);
    assert_eq!(
        a.unpaired_strong.as_ref().unwrap().tensor().shape(),
        &[2, 3, 12, 12]
    );
    for img in [
        &a.paired_low,
        &a.paired_gt,
        a.unpaired_weak.as_ref().unwrap(),
        a.unpaired_strong.as_ref().unwrap(),
    ] {
        assert!(img.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn weak_and_strong_views_share_their_sources() {
    let src = source(2, 3, 16);
    let policy = AugmentationPolicy::resize_only((10, 10));
    let batch = make_batch(&src, &plan(2, 3, 2, 1), 12, &policy, 1).unwrap();
    assert_eq!(batch.unpaired_ids, [2, 0]);
    assert_eq!(batch.unpaired_weak, batch.unpaired_strong);
    let first = weak_augment(&src.unpaired(2).unwrap(), &policy).unwrap();
    assert_eq!(batch.unpaired_weak.unwrap().image(0).unwrap(), first);
}

#[test]
fn last_batch_of_an_epoch_may_be_partial() {
    let p = plan(5, 0, 2, 3);
    assert_eq!(p.steps_per_epoch(), 3);
    let sizes: Vec<usize> = (0..3).map(|s| p.paired_indices(s).len()).collect();
    assert_eq!(sizes, [2, 2, 1]);
    assert_eq!(p.epoch_of(3), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn each_epoch_draws_every_pair_once(n in 1usize..40, per in 1usize..9, seed in any::<u64>(), epoch in 0u64..5) {
        let p = plan(n, 0, per, seed);
        let spe = p.steps_per_epoch() as u64;
        let mut seen: Vec<usize> = (epoch * spe..(epoch + 1) * spe).flat_map(|s| p.paired_indices(s)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn unpaired_sampling_cycles(n in 1usize..20, per in 1usize..9, step in 0u64..50) {
        let p = plan(3, n, per, 0);
        let ids = p.unpaired_indices(step);
        for (k, id) in ids.iter().enumerate() {
            prop_assert_eq!(*id, (step as usize * per + k) % n);
        }
    }

    #[test]
    fn darkening_lowers_mean_luminance(seed in any::<u64>(), scale in 0.05f64..0.99, gamma in 1.01f64..4.0) {
        let img = synthetic_scene::<f64>(seed, 10, 12);
        prop_assume!(luminance(&img) > 0.0);
        let draw = LowLightDraw { scale, gamma, noise_sigma: 0.0, noise_seed: 0 };
        prop_assert!(luminance(&synthesize_lowlight(&img, &draw).unwrap()) < luminance(&img));
    }

    #[test]
    fn sampled_draws_stay_in_range(seed in any::<u64>()) {
        let d = LowLightDraw::sample(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((0.4..=0.9).contains(&d.scale));
        prop_assert!((2.0..=3.5).contains(&d.gamma));
        prop_assert!((0.0..=0.02).contains(&d.noise_sigma));
    }
}
