use advstyle_core::graph::{grad, Var};
use advstyle_core::recognition::ToyFrModel;
use advstyle_core::*;
use proptest::prelude::*;
use rand::Rng as _;

fn face(seed: u64) -> FaceImage {
    let g = ToyGenerator::new(0);
    g.synthesize(&StyleLatent::random(4, seed), &NoiseStack::zeros(&g)).unwrap()
}

#[test]
fn inversion_round_trip_is_tight() {
    let g = ToyGenerator::new(0);
    for seed in 0..10 {
        let x = face(100 + seed);
        let (latent, noise) = g.invert(&x).unwrap();
        let y = g.synthesize(&latent, &noise).unwrap();
        let max_err = x.pixels().iter().zip(y.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= g.reconstruction_bound(), "seed {seed}: {max_err:e}");
        assert!(psnr(&x, &y).unwrap().db >= 40.0);
    }
}

#[test]
fn synthesis_gradient_matches_finite_differences() {
    let g = ToyGenerator::new(3);
    let latent = StyleLatent::random(4, 4);
    let noise = NoiseStack::random(&g, 0.1, 5);
    let weights = Var::constant(graph::Tensor::new(vec![32, 32, 3], (0..3072).map(|i| ((i % 11) as f64 - 5.0) / 5.0).collect()));
    let f = |w: &Var| g.synthesize_graph(w, &noise).unwrap().mul(&weights).sum();
    let w = Var::param(latent.to_tensor());
    let analytic = grad(&f(&w), std::slice::from_ref(&w))[0].value().clone();
    let mut rng = seeded_rng(6);
    let (mut diff, mut norm) = (0.0, 0.0);
    for _ in 0..40 {
        let j = rng.random_range(0..latent.codes().len());
        let at = |d: f64| {
            let mut t = latent.to_tensor();
            t.data_mut()[j] += d;
            f(&Var::constant(t)).item()
        };
        let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
        diff += (fd - analytic.data()[j]).powi(2);
        norm += analytic.data()[j].powi(2);
    }
    assert!((diff / norm).sqrt() <= 1e-4);
}

#[test]
fn generator_is_deterministic() {
    let a = ToyGenerator::new(9);
    let b = ToyGenerator::new(9);
    let l = StyleLatent::random(4, 1);
    assert_eq!(a.synthesize(&l, &NoiseStack::zeros(&a)).unwrap(), b.synthesize(&l, &NoiseStack::zeros(&b)).unwrap());
}

#[test]
fn cosine_matches_elementwise_sum() {
    let mut rng = seeded_rng(7);
    let a: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
    let b: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
    let (ea, eb) = (EmbeddingVector::normalized(a).unwrap(), EmbeddingVector::normalized(b).unwrap());
    let mut dot = 0.0;
    for i in 0..64 {
        dot += ea.values()[i] * eb.values()[i];
    }
    assert!((cosine_similarity(&ea, &eb).unwrap() - dot).abs() < 1e-15);
    assert_eq!(cosine_similarity(&ea, &eb).unwrap(), cosine_similarity(&eb, &ea).unwrap());
}

fn exhaustive_threshold(scores: &[f64], far: f64) -> f64 {
    let n = scores.len() as f64;
    scores.iter().copied().filter(|&t| scores.iter().filter(|&&s| s > t).count() as f64 / n <= far).fold(f64::INFINITY, f64::min)
}

#[test]
fn calibration_matches_exhaustive_scan() {
    let mut rng = seeded_rng(8);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
    let tau = calibrate_threshold(&scores, 0.01).unwrap();
    assert_eq!(tau, exhaustive_threshold(&scores, 0.01));
    let exceed = scores.iter().filter(|&&s| s > tau).count();
    assert!(exceed as f64 / 1e4 <= 0.01);
    let mut last = f64::INFINITY;
    for far in [0.001, 0.01, 0.05, 0.2, 0.5] {
        let t = calibrate_threshold(&scores, far).unwrap();
        assert!(t <= last);
        last = t;
    }
}

#[test]
fn verify_is_embed_then_compare() {
    let model = ToyFrModel::new("m", 11, (32, 32));
    let (a, b) = (face(1), face(2));
    let s = cosine_similarity(&model.embed(&a).unwrap(), &model.embed(&b).unwrap()).unwrap();
    for tau in [s - 1e-9, s, s + 1e-9] {
        assert_eq!(verify(&model, &a, &b, tau).unwrap(), s > tau);
        assert_eq!(verify(&model, &a, &b, tau).unwrap(), verify(&model, &b, &a, tau).unwrap());
    }
}

#[test]
fn family_share_zero_gives_independent_models() {
    let a = ToyFrModel::with_family("a", 1, (32, 32), 0.0);
    let b = ToyFrModel::with_family("b", 1, (32, 32), 0.0);
    let c = ToyFrModel::with_family("c", 2, (32, 32), 0.0);
    let x = face(3);
    assert_eq!(a.embed(&x).unwrap(), b.embed(&x).unwrap());
    assert_ne!(a.embed(&x).unwrap(), c.embed(&x).unwrap());
}

#[test]
fn v_sequences_follow_the_seed() {
    let x = face(4);
    let model = ToyFrModel::new("m", 12, (32, 32));
    let cfg = AugmentationConfig::default();
    let draw = |seed| {
        let mut rng = seeded_rng(seed);
        (0..20).map(|_| target_representation(&x, &model, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn parameter_count_by_enumeration() {
    for (l, dt, c, h) in [(4, 64, 16, 256), (1, 1, 1, 1), (3, 7, 5, 9)] {
        let arch = FusionArch::new(l, dt, c, h).unwrap();
        let p = init_fusion(arch, &mut seeded_rng(0)).unwrap();
        let enumerated: usize = p.tensors().iter().map(|t| t.data().len()).sum();
        assert_eq!(enumerated, arch.parameter_count());
    }
}

#[test]
fn fuse_gradient_matches_finite_differences() {
    let arch = FusionArch::new(2, 5, 3, 6).unwrap();
    let mut rng = seeded_rng(13);
    let mut params = init_fusion(arch, &mut rng).unwrap();
    for t in params.tensors_mut() {
        for w in t.data_mut() {
            *w += 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
    let latent = Var::constant(StyleLatent::random(2, 14).to_tensor());
    let text = Var::constant(graph::Tensor::vector(vec![0.1, -0.3, 0.2, 0.5, -0.1]));
    let v = Var::constant(graph::Tensor::vector(vec![0.2, 0.3, 0.5]));
    let f = |p: &[Var]| fusion::fuse_graph(&arch, p, &latent, &text, &v).sum();
    let vars = params.to_vars();
    let analytic: Vec<_> = grad(&f(&vars), &vars).iter().map(|g| g.value().clone()).collect();
    for (t, expected) in analytic.iter().enumerate() {
        let (mut diff, mut norm) = (0.0, 0.0);
        for _ in 0..6 {
            let j = rng.random_range(0..params.tensors()[t].len());
            let at = |d: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t].data_mut()[j] += d;
                f(&p.to_vars()).item()
            };
            let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
            diff += (fd - expected.data()[j]).powi(2);
            norm += expected.data()[j].powi(2);
        }
        assert!(norm > 0.0 && (diff / norm).sqrt() <= 1e-4, "tensor {t}");
    }
}

#[test]
fn losses_match_independent_compositions() {
    let toy = ToyStack::new(&["toy-mobileface"]).unwrap();
    let (x, t) = (face(41), face(42));
    let model = &toy.models[0];
    let direct = 1.0 - cosine_similarity(&model.embed(&x).unwrap(), &model.embed(&t).unwrap()).unwrap();
    let adv = adversarial_loss(&x, &t, model, SignConvention::Impersonation).unwrap();
    assert!((adv - direct).abs() < 1e-12);

    let text = encode_text(&toy.text_encoder, "a face with blue eyes.").unwrap();
    let img = toy.scorer.image_embedding_graph(&Var::constant(x.to_tensor())).value().data().to_vec();
    let guide_direct = 1.0
        - cosine_similarity(&EmbeddingVector::normalized(img).unwrap(), &EmbeddingVector::normalized(text.values().to_vec()).unwrap())
            .unwrap();
    let guide = guide_loss(&x, &text, &toy.scorer, SignConvention::Impersonation).unwrap();
    assert!((guide - guide_direct).abs() < 1e-12);
}

#[test]
fn cosine_losses_ignore_embedding_scale() {
    let x = Var::param(graph::Tensor::vector(vec![0.3, -1.0, 2.0]));
    let t = Var::constant(graph::Tensor::vector(vec![1.0, 0.5, 0.25]));
    let base = graph::cosine(&x, &t).item();
    for c in [1e-3, 0.5, 7.0, 1e4] {
        assert!((graph::cosine(&x.scale(c), &t).item() - base).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fresh_fusion_is_exact_identity(seed in 0u64..1000, dt in 1usize..20, c in 1usize..20) {
        let arch = FusionArch::new(4, dt, c, 16).unwrap();
        let params = init_fusion(arch, &mut seeded_rng(seed)).unwrap();
        let latent = StyleLatent::random(4, seed + 1);
        let text = TextEmbedding::new(vec![0.5; dt], "p").unwrap();
        let v = SoftmaxVector::new(vec![1.0 / c as f64; c]).unwrap();
        let out = fuse(&params, &latent, &text, &v).unwrap();
        prop_assert_eq!(out.layer_count(), 4);
        prop_assert!(out.codes().iter().zip(latent.codes()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn transforms_stay_in_range(seed in 0u64..500, low in 0.2f64..1.0) {
        let x = face(seed % 7);
        let cfg = AugmentationConfig { scale_low: low, apply_probability: 1.0, ..Default::default() };
        let t = transform(&x, &cfg, &mut seeded_rng(seed)).unwrap();
        prop_assert!(t.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn total_loss_is_monotone(g in 0.0f64..5.0, p in 0.0f64..5.0, a in 0.0f64..2.0, d in 0.0f64..1.0, wg in 0.0f64..2.0, wp in 0.0f64..2.0) {
        let w = LossWeights { guide: wg, perceptual: wp };
        let base = total_loss(g, p, a, &w).unwrap();
        prop_assert_eq!(base, wg * g + wp * p + a);
        prop_assert!(total_loss(g + d, p, a, &w).unwrap() >= base);
        prop_assert!(total_loss(g, p + d, a, &w).unwrap() >= base);
        prop_assert!(total_loss(g, p, a + d, &w).unwrap() >= base);
    }

    #[test]
    fn embeddings_are_unit_norm(seed in 0u64..200) {
        let x = face(seed);
        for model in ToyFrModel::zoo((32, 32)) {
            let e = model.embed(&x).unwrap();
            let n: f64 = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
        }
    }
}
