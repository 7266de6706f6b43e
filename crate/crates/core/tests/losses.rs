use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semi_llie_core::encoder::{FeaturePyramid, SemanticEmbedding};
use semi_llie_core::gradcheck::check_gradients;
use semi_llie_core::losses::{self, LossSchedule, ScrForm};
use semi_llie_core::{Graph, ImageTensor, Tensor, Var};

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rand_image(seed: u64, b: usize, h: usize, w: usize) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(b, h, w, |_| rng.random_range(0.0..1.0))
}

fn emb(t: Tensor<f64>) -> SemanticEmbedding<f64> {
    SemanticEmbedding::new(t).unwrap()
}

fn pyramid(seed: u64, b: usize) -> FeaturePyramid<f64> {
    let shapes = [[b, 8, 8, 3], [b, 4, 4, 4], [b, 2, 2, 5], [b, 1, 1, 6]];
    FeaturePyramid::new(
        shapes.map(|s| rand_tensor(seed + s[3] as u64, &s)),
        (32, 32),
    )
    .unwrap()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

// Luminance differences computed straight from the definition.
fn gradient_map_oracle(img: &ImageTensor<f64>) -> Vec<f64> {
    let (b, h, w) = (img.batch(), img.height(), img.width());
    let lum = |bi, y, x| (0..3).map(|c| img.at(bi, c, y, x)).sum::<f64>() / 3.0;
    let mut out = vec![0.0; b * 2 * h * w];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    out[((bi * 2) * h + y) * w + x] = (lum(bi, y, x + 1) - lum(bi, y, x)).abs();
                }
                if y + 1 < h {
                    out[((bi * 2 + 1) * h + y) * w + x] = (lum(bi, y + 1, x) - lum(bi, y, x)).abs();
                }
            }
        }
    }
    out
}

#[test]
fn fidelity_and_consistency_match_elementwise_oracle() {
    let a = rand_image(1, 2, 5, 4);
    let b = rand_image(2, 2, 5, 4);
    let want = l1(a.tensor().data(), b.tensor().data());
    assert!((losses::fidelity_loss(&a, &b).unwrap() - want).abs() < 1e-15);
    assert!((losses::consistency_loss(&a, &b).unwrap() - want).abs() < 1e-15);
    assert_eq!(losses::fidelity_loss(&a, &a).unwrap(), 0.0);
    let shifted = ImageTensor::new(a.tensor().map(|v| v + 0.1)).unwrap();
    assert!((losses::fidelity_loss(&shifted, &a).unwrap() - 0.1).abs() < 1e-12);
    assert!(losses::fidelity_loss(&a, &rand_image(3, 2, 4, 4)).is_err());
}

#[test]
fn scr_forms_match_hand_computed_ratios() {
    let (a, p, n) = (
        rand_tensor(1, &[2, 7]),
        rand_tensor(2, &[2, 7]),
        rand_tensor(3, &[2, 7]),
    );
    let (ea, ep, en) = (emb(a.clone()), emb(p.clone()), emb(n.clone()));
    let ratio = losses::scr_loss(&ea, &ep, &en, 1.0, ScrForm::AnchorRatio).unwrap();
    let want = l1(a.data(), p.data()) / (l1(a.data(), n.data()) + 1e-8);
    assert!((ratio - want).abs() < 1e-14);
    let literal = losses::scr_loss(&ea, &ep, &en, 2.0, ScrForm::Literal).unwrap();
    let want = 2.0 * (l1(a.data(), n.data()) + 1e-8) / (l1(p.data(), n.data()) + 1e-8);
    assert!((literal - want).abs() < 1e-14);

    assert_eq!(
        losses::scr_loss(&ea, &ea, &en, 1.0, ScrForm::AnchorRatio).unwrap(),
        0.0
    );
    assert_eq!(
        losses::scr_loss(&ea, &ea, &ea, 0.7, ScrForm::Literal).unwrap(),
        0.7
    );
    // degenerate denominators stay finite
    assert!(losses::scr_loss(&ea, &ep, &ea, 1.0, ScrForm::AnchorRatio)
        .unwrap()
        .is_finite());
    assert!(losses::scr_loss(
        &ea,
        &emb(rand_tensor(4, &[2, 6])),
        &en,
        1.0,
        ScrForm::AnchorRatio
    )
    .is_err());
}

#[test]
fn perceptual_matches_stagewise_oracle() {
    let (gt, enh) = (pyramid(10, 2), pyramid(20, 2));
    let mut want = 0.0;
    for i in 2..=4 {
        let (x, y) = (gt.stage(i).data(), enh.stage(i).data());
        want += x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    }
    want /= 3.0;
    assert!((losses::perceptual_loss(&gt, &enh).unwrap() - want).abs() < 1e-14);
    assert_eq!(losses::perceptual_loss(&gt, &gt).unwrap(), 0.0);

    let offset =
        FeaturePyramid::new(gt.stages().clone().map(|t| t.map(|v| v + 0.3)), (32, 32)).unwrap();
    assert!((losses::perceptual_loss(&gt, &offset).unwrap() - 0.09).abs() < 1e-12);
}

#[test]
fn perceptual_ignores_the_first_stage() {
    let gt = pyramid(10, 1);
    let mut stages = gt.stages().clone();
    stages[0] = stages[0].map(|v| v + 5.0);
    let moved = FeaturePyramid::new(stages, (32, 32)).unwrap();
    assert_eq!(losses::perceptual_loss(&gt, &moved).unwrap(), 0.0);
}

#[test]
fn gradient_map_matches_difference_oracle() {
    let img = rand_image(5, 2, 6, 7);
    let map = losses::gradient_map(&img);
    assert_eq!(map.shape(), &[2, 2, 6, 7]);
    let want = gradient_map_oracle(&img);
    for (a, b) in map.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }

    let flat = ImageTensor::<f64>::from_fn(1, 4, 4, |_| 0.4);
    assert!(losses::gradient_map(&flat).data().iter().all(|&v| v == 0.0));

    let ramp = ImageTensor::<f64>::from_fn(1, 4, 5, |i| 0.1 * (i % 5) as f64);
    let m = losses::gradient_map(&ramp);
    for y in 0..4 {
        for x in 0..5 {
            let h = m.data()[y * 5 + x];
            let v = m.data()[20 + y * 5 + x];
            assert!((h - if x < 4 { 0.1 } else { 0.0 }).abs() < 1e-12);
            assert_eq!(v, 0.0);
        }
    }
    // flat ground truth against the ramp: mean of the ramp's map
    let gl = losses::gradient_loss(&ramp, &ImageTensor::from_fn(1, 4, 5, |_| 0.3)).unwrap();
    assert!((gl - m.mean()).abs() < 1e-15);
}

#[test]
fn gradient_loss_matches_oracle() {
    let (a, b) = (rand_image(6, 1, 5, 5), rand_image(7, 1, 5, 5));
    let want = l1(&gradient_map_oracle(&a), &gradient_map_oracle(&b));
    assert!((losses::gradient_loss(&a, &b).unwrap() - want).abs() < 1e-15);
    assert_eq!(losses::gradient_loss(&a, &a).unwrap(), 0.0);
}

#[test]
fn composed_objectives_and_warmup() {
    let s = LossSchedule::default();
    assert_eq!(losses::supervised_objective(1.0, 1.0, 1.0, &s), 1.2);
    assert_eq!(losses::supervised_objective(0.0, 0.0, 0.0, &s), 0.0);
    assert_eq!(losses::overall_objective(1.0, 1.0, 1.0, 200, &s), 1.3);
    assert_eq!(losses::overall_objective(0.0, 0.0, 0.0, 17, &s), 0.0);
    assert_eq!(losses::unsupervised_objective(0.3, 0.2), 0.5);

    assert_eq!(s.lambda1(200), 0.2);
    assert!((s.lambda1(0) - 1.3476e-3).abs() < 1e-7);
    assert!((s.lambda1(100) - 5.7301e-2).abs() < 1e-6);
    assert!((s.lambda1(0) - 0.2 * (-5.0f64).exp()).abs() < 1e-9);
    assert!((s.lambda1(100) - 0.2 * (-1.25f64).exp()).abs() < 1e-9);
    for t in 0..200 {
        assert!(s.lambda1(t) < s.lambda1(t + 1));
        assert!(s.lambda1(t) <= 0.2);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let t = rng.random_range(0..=200);
        let sup = losses::supervised_objective(a, b, c, &s);
        assert!((sup - (a + 0.1 * b + 0.1 * c)).abs() < 1e-15);
        let all = losses::overall_objective(a, b, c, t, &s);
        let lam = 0.2 * (-5.0 * (1.0 - t as f64 / 200.0).powi(2)).exp();
        assert!((all - (a + lam * b + 0.1 * c)).abs() < 1e-15);
    }
}

#[test]
fn graph_objectives_agree_with_scalar_forms() {
    let s = LossSchedule::default();
    let mut g = Graph::<f64>::new();
    let one = || Tensor::scalar(1.0);
    let (a, b, c) = (g.leaf(one()), g.leaf(one()), g.leaf(one()));
    let sup = losses::supervised_graph(&mut g, a, b, c, &s).unwrap();
    assert_eq!(g.value(sup).item(), 1.2);
    let all = losses::overall_graph(&mut g, a, Some(b), Some(c), 200, &s).unwrap();
    assert_eq!(g.value(all).item(), 1.3);
    let bare = losses::overall_graph(&mut g, a, None, None, 0, &s).unwrap();
    assert_eq!(g.value(bare).item(), 1.0);
}

#[test]
fn schedule_validation() {
    assert!(LossSchedule::default().validate().is_ok());
    let bad = LossSchedule {
        gamma1: -0.1,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossSchedule {
        total_epochs: 0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossSchedule {
        omega: f64::NAN,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn stop_gradients_are_exact_zeros() {
    let mut g = Graph::<f64>::new();
    let s = g.leaf(rand_tensor(1, &[1, 3, 4, 4]));
    let t = g.leaf(rand_tensor(2, &[1, 3, 4, 4]));
    let n = g.leaf(rand_tensor(3, &[1, 3, 4, 4]));
    let c = losses::consistency(&mut g, s, t).unwrap();
    let f = losses::fidelity(&mut g, s, n).unwrap();
    let gr = losses::gradient(&mut g, s, n).unwrap();
    let sum = g.add(c, f).unwrap();
    let sum = g.add(sum, gr).unwrap();
    let grads = g.backward(sum).unwrap();
    assert!(grads.get_or_zeros(&g, t).data().iter().all(|&v| v == 0.0));
    assert!(grads.get_or_zeros(&g, n).data().iter().all(|&v| v == 0.0));
    assert!(grads.get_or_zeros(&g, s).data().iter().any(|&v| v != 0.0));

    for form in [ScrForm::AnchorRatio, ScrForm::Literal] {
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = (0..3).map(|i| g.leaf(rand_tensor(i, &[2, 5]))).collect();
        let l = losses::scr(&mut g, vars[0], vars[1], vars[2], 1.0, form).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads
            .get_or_zeros(&g, vars[0])
            .data()
            .iter()
            .any(|&v| v != 0.0));
        assert!(grads
            .get_or_zeros(&g, vars[1])
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(grads
            .get_or_zeros(&g, vars[2])
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    let mut g = Graph::<f64>::new();
    let gt = pyramid(1, 1).stages().clone().map(|t| g.leaf(t));
    let enh = pyramid(2, 1).stages().clone().map(|t| g.leaf(t));
    let l = losses::perceptual(&mut g, &gt, &enh).unwrap();
    let grads = g.backward(l).unwrap();
    for v in gt {
        assert!(grads.get_or_zeros(&g, v).data().iter().all(|&x| x == 0.0));
    }
    assert!(grads
        .get_or_zeros(&g, enh[3])
        .data()
        .iter()
        .any(|&x| x != 0.0));
}

fn assert_clean(report: semi_llie_core::gradcheck::GradCheckReport, what: &str) {
    let worst = report.worst_rel_err();
    assert!(worst <= 1e-4, "{what}: rel err {worst:e}");
}

// Reference operands are detached, so only the differentiated side is
// perturbed; the reference enters each closure as a constant.
#[test]
fn every_loss_is_gradcheck_clean() {
    let img = |s| rand_image(s, 1, 5, 6).into_tensor();
    type Loss = fn(&mut Graph<f64>, Var, Var) -> semi_llie_core::Result<Var>;
    let pairs: [(&str, Loss); 3] = [
        ("fidelity", losses::fidelity),
        ("consistency", losses::consistency),
        ("gradient", losses::gradient),
    ];
    for (i, (name, f)) in pairs.into_iter().enumerate() {
        let reference = img(10 + i as u64);
        let r = check_gradients(&[img(i as u64)], 1e-6, |g, v| {
            let t = g.constant(reference.clone());
            f(g, v[0], t)
        })
        .unwrap();
        assert_clean(r, name);
    }
    let r = check_gradients(&[img(7)], 1e-6, |g, v| {
        let m = losses::gradient_map_graph(g, v[0])?;
        let w = g.constant(rand_tensor(8, &[1, 2, 5, 6]));
        let m = g.mul(m, w)?;
        Ok(g.sum_all(m))
    })
    .unwrap();
    assert_clean(r, "gradient map");
    for form in [ScrForm::AnchorRatio, ScrForm::Literal] {
        let e = |s| rand_tensor(s, &[2, 6]);
        let r = check_gradients(&[e(1)], 1e-6, |g, v| {
            let (p, n) = (g.constant(e(2)), g.constant(e(3)));
            losses::scr(g, v[0], p, n, 0.5, form)
        })
        .unwrap();
        assert_clean(r, "scr");
    }
    let (gt, enh) = (pyramid(1, 1), pyramid(2, 1));
    let r = check_gradients(enh.stages(), 1e-6, |g, v| {
        let gt = gt.stages().clone().map(|t| g.constant(t));
        losses::perceptual(g, &gt, &[v[0], v[1], v[2], v[3]])
    })
    .unwrap();
    assert_clean(r, "perceptual");
    let s = LossSchedule::default();
    let sc = |x| Tensor::scalar(x);
    let r = check_gradients(&[sc(0.3), sc(0.7), sc(1.1)], 1e-6, |g, v| {
        let sup = losses::supervised_graph(g, v[0], v[1], v[2], &s)?;
        losses::overall_graph(g, sup, Some(v[1]), Some(v[2]), 120, &s)
    })
    .unwrap();
    assert_clean(r, "composed");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let (a, b) = (rand_image(seed, 1, h, w), rand_image(seed ^ 1, 1, h, w));
        prop_assert!(losses::fidelity_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(losses::consistency_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(losses::gradient_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(losses::gradient_map(&a).data().iter().all(|&v| v >= 0.0));
        let e = |s| emb(rand_tensor(s, &[1, 4]));
        for form in [ScrForm::AnchorRatio, ScrForm::Literal] {
            prop_assert!(losses::scr_loss(&e(seed), &e(seed ^ 2), &e(seed ^ 3), 1.0, form).unwrap() >= 0.0);
        }
        prop_assert!(losses::perceptual_loss(&pyramid(seed % 1000, 1), &pyramid(seed % 1000 + 7, 1)).unwrap() >= 0.0);
    }

    // The ratio is monotone when the negative sits behind the anchor on the
    // anchor-positive line; for an arbitrary negative the denominator can
    // shrink faster than the numerator.
    #[test]
    fn scr_never_grows_as_anchor_approaches_positive(
        seed in any::<u64>(), s1 in 0.0f64..1.0, s2 in 0.0f64..1.0, back in 0.0f64..3.0,
    ) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let (a, p) = (rand_tensor(seed, &[2, 5]), rand_tensor(seed ^ 5, &[2, 5]));
        let n = emb(a.zip_map(&p, |x, y| x - back * (y - x)).unwrap());
        let toward = |t: f64| emb(a.zip_map(&p, |x, y| x + t * (y - x)).unwrap());
        let loss = |t| losses::scr_loss(&toward(t), &emb(p.clone()), &n, 1.0, ScrForm::AnchorRatio).unwrap();
        prop_assert!(loss(hi) <= loss(lo) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn scr_is_minimal_at_the_positive(seed in any::<u64>(), t in 0.0f64..1.0) {
        let (a, p, n) = (rand_tensor(seed, &[2, 5]), rand_tensor(seed ^ 5, &[2, 5]), rand_tensor(seed ^ 9, &[2, 5]));
        let at = |t: f64| emb(a.zip_map(&p, |x, y| x + t * (y - x)).unwrap());
        let loss = |t| losses::scr_loss(&at(t), &emb(p.clone()), &emb(n.clone()), 1.0, ScrForm::AnchorRatio).unwrap();
        prop_assert_eq!(loss(1.0), 0.0);
        prop_assert!(loss(t) >= 0.0);
    }

    #[test]
    fn warmup_is_increasing_and_bounded(t in 0u32..200, total in 1u32..400) {
        let t = t.min(total - 1);
        let a = losses::warmup_lambda1(t, total);
        let b = losses::warmup_lambda1(t + 1, total);
        prop_assert!(a < b && b <= 0.2);
    }
}
