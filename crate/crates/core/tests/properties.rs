mod common;

use fitdit::analysis::{attention_param_ratio, ArchDescription, Stage};
use fitdit::dit::{patchify, unpatchify, GarmentKVCache};
use fitdit::pipeline::ssim;
use fitdit::rflow::{estimate_clean, forward_interpolate};
use fitdit::spectral::{parseval_rel_err, RealGrid};
use fitdit::tensor::Tensor;
use image::RgbImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rand_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

fn arch(stages: Vec<(usize, usize, usize, bool)>) -> ArchDescription {
    ArchDescription {
        name: "random".into(),
        approximate: false,
        note: None,
        input_h: 256,
        input_w: 256,
        stages: stages
            .into_iter()
            .map(|(divisor, blocks, width, attention)| Stage {
                divisor,
                blocks,
                width,
                attention,
                mlp_ratio: 4,
                attn_bias: false,
            })
            .collect(),
    }
}

fn stages() -> impl Strategy<Value = Vec<(usize, usize, usize, bool)>> {
    prop::collection::vec((prop::sample::select(vec![1usize, 2, 4, 8, 16]), 0usize..4, 1usize..512, any::<bool>()), 1..6)
        .prop_filter("needs an attention block", |s| s.iter().any(|&(_, b, _, a)| a && b > 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips(c in 1usize..5, gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed: u64) {
        let z = rand_tensor(&[c, gh * p, gw * p], seed);
        let tokens = patchify(&z, p).unwrap();
        prop_assert_eq!(tokens.dims(), &[gh * gw, c * p * p][..]);
        let back = unpatchify(&tokens, c, gh * p, gw * p, p).unwrap();
        prop_assert_eq!(back.data(), z.data());
    }

    #[test]
    fn duplicated_cache_leaves_attention_unchanged(
        heads in prop::sample::select(vec![1usize, 2, 4]),
        head_dim in 1usize..6,
        tokens in 1usize..10,
        seed: u64,
    ) {
        let gap = common::duplication_gap(seed, tokens, heads * head_dim, heads).unwrap();
        prop_assert!(gap <= 1e-6, "gap {gap}");
    }

    #[test]
    fn ratio_shares_form_a_distribution(s in stages(), k in 1usize..5) {
        let a = arch(s);
        let table = attention_param_ratio(&a).unwrap();
        let total: f64 = table.rows.iter().map(|r| r.share).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(table.rows.iter().all(|r| (0.0..=1.0).contains(&r.share)));
        let scaled = attention_param_ratio(&a.scaled(k)).unwrap();
        for (x, y) in table.rows.iter().zip(&scaled.rows) {
            prop_assert!((x.share - y.share).abs() <= 1e-9);
        }
        prop_assert_eq!(table.argmax().divisor, scaled.argmax().divisor);
    }

    #[test]
    fn ssim_is_symmetric(w in 11u32..24, h in 11u32..24, seed: u64) {
        let a = rand_image(w, h, seed);
        let b = rand_image(w, h, seed.wrapping_add(1));
        let ab = ssim(&a, &b, None).unwrap();
        let ba = ssim(&b, &a, None).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn parseval_holds(w in 1usize..33, h in 1usize..33, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = RealGrid::new(w, h, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        prop_assert!(parseval_rel_err(&g) <= 1e-9);
    }

    #[test]
    fn clean_estimate_inverts_interpolation(t in 0.0f32..0.99, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng);
        let eps = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng);
        let zt = forward_interpolate(&z0, &eps, t).unwrap();
        let back = estimate_clean(&zt, &eps, t).unwrap();
        prop_assert!(back.max_abs_diff(&z0) <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn agnostic_masks_hold_their_invariants(seed: u64) {
        let r = common::mask_suite(2, seed, 64).unwrap();
        prop_assert_eq!(r.violations(), 0, "{:?}", r);
    }

    #[test]
    fn garment_cache_round_trips_through_disk(depth in 1usize..4, tokens in 1usize..6, width in 1usize..6, seed: u64) {
        let blocks = (0..depth)
            .map(|i| (rand_tensor(&[tokens, width], seed ^ (2 * i as u64)), rand_tensor(&[tokens, width], seed ^ (2 * i as u64 + 1))))
            .collect();
        let cache = GarmentKVCache::new(blocks).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kv.fdtk");
        cache.write(&path).unwrap();
        let back = GarmentKVCache::read(&path).unwrap();
        prop_assert_eq!(back.to_named(), cache.to_named());
    }
}
