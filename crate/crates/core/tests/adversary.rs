use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semi_llie_core::adversary::{
    discriminate_graph, discriminator_loss, discriminator_objective, generator_adv_loss,
    generator_adv_loss_graph, Discriminator, DiscriminatorConfig, PatchLogits,
};
use semi_llie_core::gradcheck::check_gradients;
use semi_llie_core::{BoundParams, Graph, ImageTensor, ParamRole, Tensor};

fn rand_image(seed: u64, b: usize, h: usize, w: usize) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(b, h, w, |_| rng.random_range(0.0..1.0))
}

fn logits(seed: u64, shape: &[usize], scale: f64) -> PatchLogits<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchLogits::new(Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))).unwrap()
}

fn bce(x: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let all: Vec<f64> = v.collect();
    all.iter().sum::<f64>() / all.len() as f64
}

#[test]
fn logit_grid_follows_stride_arithmetic() {
    let d = Discriminator::<f32>::init(DiscriminatorConfig { base_width: 2 }, 0).unwrap();
    let out = d.discriminate(&rand_image(0, 1, 256, 256).cast()).unwrap();
    assert_eq!(out.tensor().shape(), &[1, 1, 30, 30]);
    let out = d.discriminate(&rand_image(1, 2, 64, 40).cast()).unwrap();
    assert_eq!(out.tensor().shape(), &[2, 1, 6, 3]);
    assert!(d.discriminate(&rand_image(1, 1, 16, 64).cast()).is_err());
}

#[test]
fn default_widths_and_roles() {
    let d = Discriminator::<f32>::init(DiscriminatorConfig::default(), 0).unwrap();
    assert_eq!(d.params().role(), ParamRole::Discriminator);
    let widths: Vec<usize> = (0..4)
        .map(|i| {
            d.params()
                .get(&format!("layers.{i}.weight"))
                .unwrap()
                .shape()[3]
        })
        .collect();
    assert_eq!(widths, [64, 128, 256, 512]);
    assert_eq!(
        d.params().get("head.weight").unwrap().shape(),
        &[4, 4, 512, 1]
    );
}

#[test]
fn discrimination_is_deterministic() {
    let cfg = DiscriminatorConfig { base_width: 4 };
    let a = Discriminator::<f64>::init(cfg.clone(), 9).unwrap();
    let b = Discriminator::<f64>::init(cfg.clone(), 9).unwrap();
    let img = rand_image(2, 1, 40, 40);
    assert_eq!(a.discriminate(&img).unwrap(), b.discriminate(&img).unwrap());
    let c = Discriminator::<f64>::from_params(cfg, a.params().clone()).unwrap();
    assert_eq!(a.discriminate(&img).unwrap(), c.discriminate(&img).unwrap());
}

#[test]
fn bce_losses_match_oracle_and_reference_points() {
    let zero = PatchLogits::new(Tensor::<f64>::zeros(&[2, 1, 3, 3])).unwrap();
    let ln2 = core::f64::consts::LN_2;
    assert!((discriminator_loss(&zero, &zero) - 2.0 * ln2).abs() < 1e-15);
    assert!((generator_adv_loss(&zero) - ln2).abs() < 1e-15);

    let big = PatchLogits::new(Tensor::full(&[1, 1, 2, 2], 60.0)).unwrap();
    let small = PatchLogits::new(Tensor::full(&[1, 1, 2, 2], -60.0)).unwrap();
    assert!(discriminator_loss(&big, &small) < 1e-25);
    assert!(generator_adv_loss(&big) < 1e-25);

    let (r, f) = (logits(1, &[2, 1, 4, 5], 4.0), logits(2, &[2, 1, 4, 5], 4.0));
    let want = mean(r.tensor().data().iter().map(|&x| bce(x, 1.0)))
        + mean(f.tensor().data().iter().map(|&x| bce(x, 0.0)));
    assert!((discriminator_loss(&r, &f) - want).abs() < 1e-13);
    let want = mean(f.tensor().data().iter().map(|&x| bce(x, 1.0)));
    assert!((generator_adv_loss(&f) - want).abs() < 1e-13);
}

#[test]
fn discriminator_objective_never_reaches_the_generator() {
    let d = Discriminator::<f64>::init(DiscriminatorConfig { base_width: 2 }, 1).unwrap();
    let mut g = Graph::new();
    let p = d.params().bind(&mut g, true);
    let real = g.leaf(rand_image(3, 1, 32, 32).into_tensor());
    let fake = g.leaf(rand_image(4, 1, 32, 32).into_tensor());
    let loss = discriminator_objective(&mut g, &p, real, fake).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads
        .get_or_zeros(&g, fake)
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(grads
        .get_or_zeros(&g, real)
        .data()
        .iter()
        .all(|&v| v == 0.0));
    let pg = p.gradients(&g, &grads);
    assert!(pg.values().any(|t| t.data().iter().any(|&v| v != 0.0)));

    // generator side: gradients reach the generated image
    let mut g = Graph::new();
    let p = d.params().bind(&mut g, false);
    let fake = g.leaf(rand_image(4, 1, 32, 32).into_tensor());
    let l = discriminate_graph(&mut g, &p, fake).unwrap();
    let l = generator_adv_loss_graph(&mut g, l);
    let grads = g.backward(l).unwrap();
    assert!(grads
        .get_or_zeros(&g, fake)
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn discriminator_pass_is_gradcheck_clean() {
    let cfg = DiscriminatorConfig { base_width: 2 };
    let d = Discriminator::<f64>::init(cfg.clone(), 5).unwrap();
    let names: Vec<String> = d.params().names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = d.params().iter().map(|(_, t)| t.clone()).collect();
    inputs.push(rand_image(6, 1, 32, 32).into_tensor());
    let real = rand_image(7, 1, 32, 32).into_tensor();
    let bind = |v: &[semi_llie_core::Var]| {
        BoundParams::from_vars(names.iter().cloned().zip(v.iter().copied()))
    };

    // discriminator side, w.r.t. its weights (the generated image is detached)
    let r = check_gradients(&inputs, 1e-6, |g, v| {
        let p = bind(&v[..names.len()]);
        let real = g.constant(real.clone());
        discriminator_objective(g, &p, real, v[names.len()])
    })
    .unwrap();
    let worst = r.rel_err[..names.len()].iter().copied().fold(0.0, f64::max);
    assert!(worst <= 1e-4, "discriminator loss rel err {worst:e}");

    // generator side, w.r.t. weights and image
    let r = check_gradients(&inputs, 1e-6, |g, v| {
        let p = bind(&v[..names.len()]);
        let l = discriminate_graph(g, &p, v[names.len()])?;
        Ok(generator_adv_loss_graph(g, l))
    })
    .unwrap();
    assert!(
        r.worst_rel_err() <= 1e-4,
        "generator loss rel err {:e}",
        r.worst_rel_err()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adversarial_losses_are_non_negative(seed in any::<u64>(), scale in 0.01f64..50.0) {
        let (r, f) = (logits(seed, &[1, 1, 3, 2], scale), logits(seed ^ 3, &[1, 1, 3, 2], scale));
        prop_assert!(discriminator_loss(&r, &f) >= 0.0);
        prop_assert!(generator_adv_loss(&f) >= 0.0);
    }
}
