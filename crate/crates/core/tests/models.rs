use candle_core::{DType, Device, Tensor, Var};
use gnet_core::models::checkpoint::{load_discriminator, load_generator, save_discriminator, save_generator};
use gnet_core::models::{
    build_smaat_gnet, build_smaat_unet, conv_stack, persistence_predict, receptive_field, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, Nowcaster, Persistence,
};
use gnet_core::nn::{BnMode, Ctx, SiteRecorder};
use gnet_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..shape.iter().product::<usize>())
        .map(|_| rand::Rng::random::<f32>(&mut rng))
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar()
        .unwrap()
}

fn quarter_gnet() -> Generator {
    build_smaat_gnet(GeneratorConfig::gnet().with_width_scale(0.25), 0).unwrap()
}

#[test]
fn full_width_gnet_shapes() {
    let g = build_smaat_gnet(GeneratorConfig::gnet(), 1).unwrap();
    assert_eq!(g.cfg.skip_widths(), [128, 256, 512, 1024, 1024]);
    let concat: Vec<usize> = g.ups.iter().map(|u| u.concat_channels()).collect();
    assert_eq!(concat, vec![2048, 768, 384, 192]);
    let x = rand_t(&[1, 12, 64, 64], 1);
    let m = rand_t(&[1, 25, 64, 64], 2).ge(0.5).unwrap();
    let mut rec = SiteRecorder::default();
    let p = g.forward(&x, Some(&m), &mut Ctx::eval().with_hook(&mut rec)).unwrap();
    assert_eq!(p.y_hat.dims(), &[1, 12, 64, 64]);
    assert!(p.s.is_none());
    let bottleneck: Vec<usize> = rec
        .sites
        .iter()
        .filter(|(n, _)| n.ends_with("d4/cbam"))
        .map(|(_, d)| d[1])
        .collect();
    assert_eq!(bottleneck.iter().sum::<usize>(), 1024);
    let trace: Vec<usize> = rec
        .sites
        .iter()
        .filter(|(n, _)| n.starts_with("enc_map") && n.ends_with("dsc"))
        .map(|(_, d)| d[2])
        .collect();
    assert_eq!(trace, vec![64, 32, 16, 8, 4]);
    assert_eq!(rec.sites.len(), 24);
    assert_eq!(g.sites().len(), 24);
}

#[test]
fn unet_bottleneck_and_shape() {
    let cfg = GeneratorConfig::unet();
    assert_eq!(cfg.skip_widths()[4], 512);
    let g = build_smaat_unet(cfg.with_width_scale(0.25), 0).unwrap();
    let x = rand_t(&[2, 12, 64, 64], 3);
    assert_eq!(g.forward(&x, None, &mut Ctx::eval()).unwrap().y_hat.dims(), &[2, 12, 64, 64]);
    assert!(build_smaat_unet(GeneratorConfig::gnet(), 0).is_err());
    assert!(build_smaat_gnet(GeneratorConfig::unet(), 0).is_err());
    let gnet = quarter_gnet();
    assert!(gnet.store.num_trainable() > g.store.num_trainable());
}

#[test]
fn mask_encoder_differs_only_in_first_block() {
    let g = quarter_gnet();
    let a = g.store.num_trainable_under("enc_map/");
    let b = g.store.num_trainable_under("enc_mask/");
    let w0 = g.cfg.scaled_encoder_widths()[0];
    assert_eq!(b - a, (25 - 12) * 9 + (25 - 12) * w0);
    for (n, v) in g.store.trainable_under("enc_map/") {
        if n.starts_with("enc_map/inc/dsc1/") {
            continue;
        }
        let other = n.replacen("enc_map", "enc_mask", 1);
        let (_, w) = g.store.trainable_under(&other).into_iter().next().unwrap();
        assert_eq!(v.dims(), w.dims(), "{n}");
    }
}

#[test]
fn dual_encoder_needs_mask() {
    let g = quarter_gnet();
    let x = rand_t(&[1, 12, 64, 64], 1);
    assert!(matches!(g.forward(&x, None, &mut Ctx::eval()), Err(Error::Argument(_))));
    let bad = rand_t(&[1, 24, 64, 64], 1);
    assert!(matches!(g.forward(&x, Some(&bad), &mut Ctx::eval()), Err(Error::Shape(_))));
}

#[test]
fn determinism_and_stochastic_mode() {
    let g = quarter_gnet();
    let x = rand_t(&[1, 12, 64, 64], 4);
    let m = rand_t(&[1, 25, 64, 64], 5).ge(0.5).unwrap();
    let a = g.predict(&x, &m, &mut Ctx::eval()).unwrap();
    let b = g.predict(&x, &m, &mut Ctx::eval()).unwrap();
    assert_eq!(max_abs(&(&a - &b).unwrap()), 0.0);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let c = g.predict(&x, &m, &mut Ctx::stochastic(&mut r1)).unwrap();
    let d = g.predict(&x, &m, &mut Ctx::stochastic(&mut r2)).unwrap();
    assert!(max_abs(&(c - d).unwrap()) > 0.0);
}

#[test]
fn aleatoric_head_emits_log_variance() {
    let cfg = GeneratorConfig {
        aleatoric_head: true,
        ..GeneratorConfig::gnet().with_width_scale(0.25)
    };
    let g = build_smaat_gnet(cfg, 0).unwrap();
    let x = rand_t(&[1, 12, 64, 64], 6);
    let m = rand_t(&[1, 25, 64, 64], 7).ge(0.5).unwrap();
    let p = g.forward(&x, Some(&m), &mut Ctx::eval()).unwrap();
    assert_eq!(p.y_hat.dims(), &[1, 12, 64, 64]);
    assert_eq!(p.s.unwrap().dims(), &[1, 12, 64, 64]);
}

#[test]
fn output_is_not_clamped() {
    let g = quarter_gnet();
    g.head.bias.set(&Tensor::full(-3f32, 12, &Device::Cpu).unwrap()).unwrap();
    let x = rand_t(&[1, 12, 64, 64], 8);
    let m = Tensor::zeros((1, 25, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let y = g.predict(&x, &m, &mut Ctx::eval()).unwrap();
    let min = y.min_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(min < 0.0);
}

#[test]
fn zero_masks_send_no_gradient_to_mask_encoder() {
    let g = quarter_gnet();
    let x = rand_t(&[2, 12, 64, 64], 9);
    let m = Tensor::zeros((2, 25, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let probe = rand_t(&[2, 12, 64, 64], 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = &mut Ctx::train(&mut rng);
    let y = g.forward(&x, Some(&m), ctx).unwrap().y_hat;
    let grads = (y * probe).unwrap().sum_all().unwrap().backward().unwrap();
    let mut checked = 0;
    for (n, v) in g.store.trainable_under("enc_mask/") {
        if let Some(gr) = grads.get(v.as_tensor()) {
            assert_eq!(max_abs(gr), 0.0, "{n}");
        }
        checked += 1;
    }
    assert!(checked > 0);
    let map_grad: f64 = g
        .store
        .trainable_under("enc_map/")
        .iter()
        .filter_map(|(_, v)| grads.get(v.as_tensor()).map(max_abs))
        .sum();
    assert!(map_grad > 0.0);
}

#[test]
fn persistence_repeats_last_frame() {
    let x = rand_t(&[2, 12, 64, 64], 11);
    let y = persistence_predict(&x).unwrap();
    assert_eq!(y.dims(), &[2, 12, 64, 64]);
    let last = x.narrow(1, 11, 1).unwrap();
    for t in 0..12 {
        assert_eq!(max_abs(&(y.narrow(1, t, 1).unwrap() - &last).unwrap()), 0.0);
    }
    let stationary = Tensor::ones((1, 12, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let p = Persistence.predict(&stationary, &stationary, &mut Ctx::eval()).unwrap();
    assert_eq!(max_abs(&(p - &stationary).unwrap()), 0.0);
    assert!(!Persistence.is_stochastic());
}

fn quarter_d() -> Discriminator {
    Discriminator::new(DiscriminatorConfig::default().with_width_scale(0.25), 0, DType::F32).unwrap()
}

#[test]
fn discriminator_shapes_and_range() {
    let d = Discriminator::new(DiscriminatorConfig::default(), 0, DType::F32).unwrap();
    assert_eq!(d.cbam_count(), 8);
    let x = rand_t(&[2, 12, 64, 64], 12);
    let y = rand_t(&[2, 12, 64, 64], 13);
    let s = d.forward(&x, &y, &Ctx::eval()).unwrap();
    assert_eq!(s.dims(), &[2, 4, 4]);
    let v = s.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
    let mut h = Tensor::cat(&[&x, &y], 1).unwrap();
    let mut trace = vec![h.dims()[2]];
    for st in &d.stages {
        h = st.forward(&h, &Ctx::eval()).unwrap();
        trace.push(h.dims()[2]);
    }
    assert_eq!(trace, vec![64, 32, 16, 8, 4]);
}

#[test]
fn discriminator_rejects_bad_config_and_shapes() {
    let cfg = DiscriminatorConfig {
        input_size: 128,
        ..DiscriminatorConfig::default()
    };
    assert!(matches!(Discriminator::new(cfg, 0, DType::F32), Err(Error::Config(_))));
    let d = quarter_d();
    let x = rand_t(&[1, 12, 64, 64], 1);
    let y = rand_t(&[1, 11, 64, 64], 1);
    assert!(matches!(d.forward(&x, &y, &Ctx::eval()), Err(Error::Shape(_))));
}

#[test]
fn zero_head_scores_one_half() {
    let d = quarter_d();
    d.head.weight.set(&d.head.weight.as_tensor().zeros_like().unwrap()).unwrap();
    let s = d
        .forward(&rand_t(&[1, 12, 64, 64], 1), &rand_t(&[1, 12, 64, 64], 2), &Ctx::eval())
        .unwrap();
    assert!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn scores_depend_on_candidate_target() {
    let d = Discriminator::new(DiscriminatorConfig::default().with_width_scale(0.25), 3, DType::F64).unwrap();
    let x = rand_t(&[1, 12, 64, 64], 1).to_dtype(DType::F64).unwrap();
    let y = Var::from_tensor(&rand_t(&[1, 12, 64, 64], 2).to_dtype(DType::F64).unwrap()).unwrap();
    let s = d.forward(&x, y.as_tensor(), &Ctx::eval()).unwrap().mean_all().unwrap();
    let g = s.backward().unwrap();
    assert!(max_abs(g.get(y.as_tensor()).unwrap()) > 0.0);
}

#[test]
fn receptive_field_covers_whole_input() {
    assert_eq!(receptive_field(&[(3, 1)]), 3);
    assert_eq!(receptive_field(&[(4, 2), (3, 1)]), 8);
    assert_eq!(receptive_field(&conv_stack()), 138);
    // every patch score sees the full 64×64 pair, so a single-pixel change reaches all 16 scores
    let d = Discriminator::new(DiscriminatorConfig::default().with_width_scale(0.25), 5, DType::F64).unwrap();
    let x = Tensor::zeros((1, 12, 64, 64), DType::F64, &Device::Cpu).unwrap();
    let y0 = Tensor::zeros((1, 12, 64, 64), DType::F64, &Device::Cpu).unwrap();
    let mut bump = vec![0f64; 12 * 64 * 64];
    bump[5 * 64 + 7] = 1.0;
    let y1 = Tensor::from_vec(bump, (1, 12, 64, 64), &Device::Cpu).unwrap();
    let a = d.forward(&x, &y0, &Ctx::eval()).unwrap();
    let b = d.forward(&x, &y1, &Ctx::eval()).unwrap();
    let diff = (a - b).unwrap().abs().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(diff.iter().all(|&v| v > 0.0));
}

#[test]
fn stage_locality_on_zero_background() {
    let d = Discriminator::new(DiscriminatorConfig::default().with_width_scale(0.25), 7, DType::F64).unwrap();
    let stage = &d.stages[1];
    let c = stage.down.in_channels();
    let (pr, pc) = (9usize, 20usize);
    let mut v = vec![0f64; c * 32 * 32];
    v[pr * 32 + pc] = 1.0;
    let x = Tensor::from_vec(v, (1, c, 32, 32), &Device::Cpu).unwrap();
    let out = stage.forward(&x, &Ctx::eval().with_bn(BnMode::Eval)).unwrap();
    let o = out.sum(1).unwrap().abs().unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
    // output cell i covers input rows 2i-3 ..= 2i+4 after the 4×4/2 and 3×3/1 convolutions
    let covers = |i: usize, p: usize| (2 * i as i64 - 3..=2 * i as i64 + 4).contains(&(p as i64));
    let mut nonzero = 0;
    for (i, row) in o.iter().enumerate() {
        for (j, &val) in row.iter().enumerate() {
            if !(covers(i, pr) && covers(j, pc)) {
                assert_eq!(val, 0.0, "cell ({i}, {j}) outside the receptive field changed");
            } else if val > 0.0 {
                nonzero += 1;
            }
        }
    }
    assert!(nonzero > 0);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let g = quarter_gnet();
    let path = dir.path().join("g.safetensors");
    let meta = save_generator(&path, &g, 3, 0.25, 12.5, 0).unwrap();
    let (g2, meta2) = load_generator(&path).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(g2.cfg, g.cfg);
    let x = rand_t(&[1, 12, 64, 64], 1);
    let m = rand_t(&[1, 25, 64, 64], 2).ge(0.5).unwrap();
    let a = g.predict(&x, &m, &mut Ctx::eval()).unwrap();
    let b = g2.predict(&x, &m, &mut Ctx::eval()).unwrap();
    assert_eq!(max_abs(&(a - b).unwrap()), 0.0);

    let d = quarter_d();
    let dp = dir.path().join("d.safetensors");
    save_discriminator(&dp, &d, 3, 1.0, 12.5, 0).unwrap();
    let (d2, _) = load_discriminator(&dp).unwrap();
    assert_eq!(d2.store.num_trainable(), d.store.num_trainable());
    assert!(load_generator(&dp).is_err());
}
