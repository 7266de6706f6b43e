use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semi_llie_core::backbone::{
    estimate_illumination, forward, illumination_prior, mssb, mssb_forward, mssm, mssm_forward,
    Backbone, BackboneConfig, IlluminationPrior,
};
use semi_llie_core::gradcheck::check_gradients;
use semi_llie_core::{BoundParams, Error, Graph, ImageTensor, ParamRole, ParamStore, Tensor, Var};

fn jitter(store: &ParamStore<f64>, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    // keep the scan step well away from zero so its gradients are measurable
    for (name, t) in out.iter_mut() {
        if name.ends_with("delta_bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    out
}

fn subset(store: &ParamStore<f64>, prefix: &str) -> ParamStore<f64> {
    let mut out = ParamStore::new(ParamRole::Student);
    for (k, v) in store.iter() {
        if k.starts_with(prefix) {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

fn random_image(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> ImageTensor<f64> {
    ImageTensor::from_fn(b, h, w, |_| rng.random_range(0.0..1.0))
}

/// Gradcheck of `mean(weights * f(x, params))` over `x` and every parameter.
fn gradcheck_module(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, &BoundParams, Var) -> semi_llie_core::Result<Var>,
) -> f64 {
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = check_gradients(&inputs, 1e-5, |g, v| {
        let p = BoundParams::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
        let y = f(g, &p, v[0])?;
        let w = g.constant(Tensor::from_fn(g.shape(y), |i| {
            ((i * 7919) % 13) as f64 / 13.0 - 0.4
        }));
        let prod = g.mul(y, w)?;
        Ok(g.mean_all(prod))
    })
    .unwrap();
    for (i, e) in report.rel_err.iter().enumerate() {
        let name = if i == 0 {
            "input"
        } else {
            names[i - 1].as_str()
        };
        assert!(e.is_finite(), "{name}");
        if *e > 1e-4 {
            eprintln!("{name}: rel {e:.3e} norm {:.3e}", report.analytic_norm[i]);
        }
    }
    report.worst_rel_err()
}

#[test]
fn default_parameter_count_is_near_reference() {
    let cfg = BackboneConfig::default();
    let net = Backbone::<f32>::init(cfg.clone(), 0).unwrap();
    let n = net.param_count();
    assert_eq!(n, cfg.param_count());
    println!(
        "default backbone parameters: {n} ({:.4}M, reference 0.46M)",
        n as f64 / 1e6
    );
    assert!((230_000..=690_000).contains(&n));
}

#[test]
fn identity_at_initialization_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w) in [(8, 8), (5, 11), (16, 9)] {
        let img = random_image(&mut rng, 2, h, w);
        let net = Backbone::<f64>::init(BackboneConfig::with_width(8), 3).unwrap();
        let out = net.enhance_unclamped(&img).unwrap();
        assert_eq!(out.tensor().data(), img.tensor().data());
        let img32 = img.cast::<f32>();
        let net32 = Backbone::<f32>::init(BackboneConfig::with_width(8), 3).unwrap();
        assert_eq!(net32.enhance_unclamped(&img32).unwrap(), img32);
    }
}

#[test]
fn enhance_preserves_shape_and_clamps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = BackboneConfig::with_width(8);
    let net = Backbone::<f64>::init(cfg, 4).unwrap();
    let net = Backbone::from_params(net.config().clone(), jitter(net.params(), 5, 0.5)).unwrap();
    for (h, w) in [(1, 1), (3, 7), (64, 64)] {
        let img = random_image(&mut rng, 1, h, w);
        let raw = net.enhance_unclamped(&img).unwrap();
        let out = net.enhance(&img).unwrap();
        assert_eq!(out.tensor().shape(), &[1, 3, h, w]);
        assert!(out
            .tensor()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out, raw.clamp01());
    }
}

#[test]
fn forward_rejects_non_rgb_input() {
    let net = Backbone::<f64>::init(BackboneConfig::with_width(8), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
    let p = net.params().bind(&mut g, false);
    assert!(matches!(
        forward(&mut g, net.config(), &p, x),
        Err(Error::Config(_))
    ));
    assert!(ImageTensor::<f64>::new(Tensor::zeros(&[1, 1, 8, 8])).is_err());
}

#[test]
fn prior_matches_elementwise_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 2, 5, 4);
    let prior = illumination_prior(&img);
    assert_eq!(prior.tensor().shape(), &[2, 1, 5, 4]);
    for b in 0..2 {
        for y in 0..5 {
            for x in 0..4 {
                let want = (img.at(b, 0, y, x) + img.at(b, 1, y, x) + img.at(b, 2, y, x)) / 3.0;
                let got = prior.tensor().data()[(b * 5 + y) * 4 + x];
                assert!((got - want).abs() < 1e-15);
            }
        }
    }
    let gray = ImageTensor::<f64>::from_fn(1, 3, 3, |_| 0.5);
    assert!(illumination_prior(&gray)
        .tensor()
        .data()
        .iter()
        .all(|&v| v == 0.5));
}

#[test]
fn illumination_map_matches_hand_composed_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = BackboneConfig::with_width(4);
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let mut params = jitter(net.params(), 9, 0.3);
    // identity point-wise input projection
    params.insert(
        "iem.pw1.weight",
        Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }),
    );
    let (h, w) = (6, 5);
    let img = random_image(&mut rng, 1, h, w);
    let prior = illumination_prior(&img);
    let map = estimate_illumination(&img, &prior, &cfg, &params).unwrap();
    assert_eq!(map.tensor().shape(), &[1, 3, h, w]);

    let get = |n: &str| params.get(n).unwrap().data().to_vec();
    let (b1, dw, bd, pw2, b2) = (
        get("iem.pw1.bias"),
        get("iem.dw.weight"),
        get("iem.dw.bias"),
        get("iem.pw2.weight"),
        get("iem.pw2.bias"),
    );
    let input = |c: usize, y: usize, x: usize| {
        if c < 3 {
            img.at(0, c, y, x)
        } else {
            prior.tensor().data()[y * w + x]
        }
    };
    let stage1 = |c: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            input(c, y as usize, x as usize) + b1[c]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let mut mid = [0.0; 4];
            for (c, m) in mid.iter_mut().enumerate() {
                let mut s = bd[c];
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += dw[(ky * 3 + kx) * 4 + c]
                            * stage1(
                                c,
                                y as isize + ky as isize - 1,
                                x as isize + kx as isize - 1,
                            );
                    }
                }
                *m = s;
            }
            for o in 0..3 {
                let want: f64 = b2[o] + (0..4).map(|c| mid[c] * pw2[c * 3 + o]).sum::<f64>();
                let got = map.tensor().data()[(o * h + y) * w + x];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn illumination_map_of_zero_input_is_zero() {
    let cfg = BackboneConfig::with_width(8);
    let net = Backbone::<f64>::init(cfg, 0).unwrap();
    let img = ImageTensor::zeros(1, 32, 32);
    let map = net.estimate_illumination(&img).unwrap();
    assert_eq!(map.tensor().shape(), &[1, 3, 32, 32]);
    assert!(map.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn misaligned_prior_is_a_configuration_error() {
    let cfg = BackboneConfig::with_width(8);
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let img = ImageTensor::zeros(1, 8, 8);
    let other = illumination_prior(&ImageTensor::<f64>::zeros(1, 8, 9));
    let r = estimate_illumination(&img, &other, &cfg, net.params());
    assert!(matches!(r, Err(Error::Config(_))));
    let _: &IlluminationPrior<f64> = &other;
}

#[test]
fn mssm_shape_and_zero_input() {
    let mut cfg = BackboneConfig::with_width(16);
    cfg.n_state = 4;
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let prefix = "groups.0.blocks.0.mssm";
    for (h, w) in [(1, 1), (3, 5), (8, 8)] {
        let x = Tensor::zeros(&[1, h, w, 16]);
        let y = mssm_forward(&x, &cfg, net.params(), prefix).unwrap();
        assert_eq!(y.shape(), &[1, h, w, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
    let bad = Tensor::zeros(&[1, 2, 2, 8]);
    assert!(mssm_forward(&bad, &cfg, net.params(), prefix).is_err());
}

#[test]
fn mssb_with_zero_output_weights_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = BackboneConfig::with_width(16);
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let mut params = jitter(net.params(), 1, 0.2);
    let p = "groups.0.blocks.0";
    for n in ["mssm.out_proj", "ffn.project"] {
        for leaf in ["weight", "bias"] {
            let name = format!("{p}.{n}.{leaf}");
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.insert(name, Tensor::zeros(&shape));
        }
    }
    params.insert(format!("{p}.scale1"), Tensor::full(&[16], 1.0));
    params.insert(format!("{p}.scale2"), Tensor::full(&[16], 1.0));
    let x = Tensor::from_fn(&[1, 8, 8, 16], |_| rng.random_range(-1.0..1.0));
    let y = mssb_forward(&x, &cfg, &params, p).unwrap();
    assert_eq!(y, x);
}

#[test]
fn mssm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cfg = BackboneConfig::with_width(8);
    cfg.n_state = 4;
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let prefix = "groups.0.blocks.0.mssm";
    let store = jitter(&subset(net.params(), prefix), 2, 0.2);
    let x = Tensor::from_fn(&[1, 4, 4, 8], |_| rng.random_range(-1.0..1.0));
    let err = gradcheck_module(&store, x, |g, p, x| mssm(g, &cfg, p, prefix, x));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn mssb_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = BackboneConfig::with_width(8);
    cfg.n_state = 4;
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let prefix = "groups.1.blocks.1";
    let store = jitter(&subset(net.params(), prefix), 3, 0.2);
    let x = Tensor::from_fn(&[1, 3, 4, 8], |_| rng.random_range(-1.0..1.0));
    let err = gradcheck_module(&store, x, |g, p, x| mssb(g, &cfg, p, prefix, x));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn full_backbone_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cfg = BackboneConfig::with_width(8);
    cfg.n_state = 4;
    let net = Backbone::<f64>::init(cfg.clone(), 0).unwrap();
    let store = jitter(net.params(), 4, 0.1);
    let img = random_image(&mut rng, 1, 8, 8).into_tensor();
    let err = gradcheck_module(&store, img, |g, p, x| forward(g, &cfg, p, x));
    assert!(err <= 1e-3, "{err}");
}
