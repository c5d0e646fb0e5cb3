use lkca_core::lkca::{kernel_extent, KernelInit, LkcaKernel, LkcaLayer, ValueProjection, View};
use lkca_core::model::{ModelConfig, VisionModel};
use lkca_core::tensor::rand_normal;
use lkca_core::{SeededRng, Tensor};
use proptest::prelude::*;

fn config(pattern: &str, pos: bool) -> ModelConfig {
    ModelConfig {
        image_h: 4,
        image_w: 4,
        dim: 8,
        num_heads: 2,
        depth: pattern.len(),
        block_pattern: pattern.into(),
        use_pos_embed: pos,
        kernel_init: KernelInit::TruncNormal,
        ..ModelConfig::default()
    }
}

/// Permutes the pixels of every `[b, H, W, 1]` image with `perm`.
fn permute_pixels(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let n = perm.len();
    let mut out = x.clone();
    for (img, src) in out.data_mut().chunks_exact_mut(n).zip(x.data().chunks_exact(n)) {
        for (k, &p) in perm.iter().enumerate() {
            img[k] = src[p];
        }
    }
    out
}

fn random_perm(rng: &mut SeededRng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    perm
}

#[test]
fn zero_model_gives_constant_logits() {
    let mut model = VisionModel::<f64>::init(&config("LA", true), 1).unwrap();
    for (_, t) in model.registry_mut() {
        t.data_mut().fill(0.0);
    }
    let mut rng = SeededRng::new(2);
    let a = model.forward(&rand_normal(&mut rng, [3, 4, 4, 1], 0.0, 1.0).unwrap()).unwrap();
    let b = model.forward(&rand_normal(&mut rng, [3, 4, 4, 1], 0.0, 1.0).unwrap()).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mhsa_without_positions_ignores_token_order() {
    let model = VisionModel::<f64>::init(&config("AA", false), 3).unwrap();
    let mut rng = SeededRng::new(4);
    let x = rand_normal(&mut rng, [2, 4, 4, 1], 0.0, 1.0).unwrap();
    let perm = random_perm(&mut rng, 16);
    let a = model.forward(&x).unwrap();
    let b = model.forward(&permute_pixels(&x, &perm)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn lkca_sees_token_order() {
    let model = VisionModel::<f64>::init(&config("LL", false), 3).unwrap();
    let mut rng = SeededRng::new(4);
    let x = rand_normal(&mut rng, [2, 4, 4, 1], 0.0, 1.0).unwrap();
    let perm = random_perm(&mut rng, 16);
    let a = model.forward(&x).unwrap();
    let b = model.forward(&permute_pixels(&x, &perm)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-9);
}

#[test]
fn model_views_agree() {
    let mut model = VisionModel::<f64>::init(&config("LAL", true), 5).unwrap();
    let mut rng = SeededRng::new(6);
    let x = rand_normal(&mut rng, [2, 4, 4, 1], 0.0, 1.0).unwrap();
    model.set_view(View::Attention).unwrap();
    let a = model.forward(&x).unwrap();
    model.set_view(View::Convolution).unwrap();
    let c = model.forward(&x).unwrap();
    assert!(a.max_abs_diff(&c).unwrap() <= 1e-12);
    assert!(model.set_view(View::Spectral).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_and_convolution_views_match(
        gh in 1usize..9, gw in 1usize..9, d in 1usize..12, b in 1usize..3, seed in any::<u64>()
    ) {
        let mut rng = SeededRng::new(seed);
        let (kh, kw) = kernel_extent(gh, gw);
        let layer = LkcaLayer::new(
            LkcaKernel::new(gh, gw, rand_normal::<f64>(&mut rng, [kh, kw], 0.0, 1.0).unwrap()).unwrap(),
            ValueProjection::init(d, &mut rng),
            View::Attention,
        );
        let x = rand_normal::<f64>(&mut rng, [b, gh * gw, d], 0.0, 1.0).unwrap();
        let a = layer.forward(&x).unwrap();
        let c = layer.clone().with_view(View::Convolution).forward(&x).unwrap();
        prop_assert!(a.max_abs_diff(&c).unwrap() <= 1e-10);
    }

    #[test]
    fn lkca_is_linear_in_values(gh in 1usize..6, gw in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (kh, kw) = kernel_extent(gh, gw);
        let layer = LkcaLayer::new(
            LkcaKernel::new(gh, gw, rand_normal::<f64>(&mut rng, [kh, kw], 0.0, 1.0).unwrap()).unwrap(),
            ValueProjection::identity(d),
            View::Convolution,
        );
        let x = rand_normal::<f64>(&mut rng, [1, gh * gw, d], 0.0, 1.0).unwrap();
        let y = rand_normal::<f64>(&mut rng, [1, gh * gw, d], 0.0, 1.0).unwrap();
        let sum = lkca_core::tensor::add(&x, &y).unwrap();
        let lhs = layer.forward(&sum).unwrap();
        let rhs = lkca_core::tensor::add(&layer.forward(&x).unwrap(), &layer.forward(&y).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);
    }
}
