use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;

use pbasr_core::checkpoint::{cosine_similarity, distance, interpolate, ParamSet};
use pbasr_core::dataset::{
    binarize, encode_mask_png, decode_mask_png, parse_manifest, size_category, BlurSample, BlurType, Intensity,
    Manifest, ReviewState, SizeCategory, Source,
};
use pbasr_core::degrade::{self, blur, box_downsample, degrade_with, gaussian_kernel, DegradationConfig, DrawnDegradation};
use pbasr_core::eval::{gmsd, psnr, ssim, RegionValues};
use pbasr_core::fusion::{adaptive_lambda, cross_interpolate, final_fuse};
use pbasr_core::models::{build_discriminator, build_generator, discriminator_forward, generator_forward, DiscriminatorConfig, GeneratorConfig};
use pbasr_core::rng::Rng;
use pbasr_core::tensor::ops::{resize_nearest, Resize};
use pbasr_core::train::d_loss_from_logits;
use pbasr_core::Tensor;

fn tensor(shape: [usize; 4], seed: u64, lo: f32, hi: f32) -> Tensor {
    use rand::Rng as _;
    let mut r = Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Two aligned sets with tensors of the given sizes.
fn aligned_pair(sizes: &[usize], seed: u64) -> (ParamSet, ParamSet) {
    let (mut a, mut b) = (ParamSet::new(), ParamSet::new());
    for (i, &n) in sizes.iter().enumerate() {
        a.insert(format!("t{i}"), tensor([n, 1, 1, 1], seed.wrapping_mul(31).wrapping_add(i as u64), -1.0, 1.0));
        b.insert(format!("t{i}"), tensor([n, 1, 1, 1], seed.wrapping_mul(31).wrapping_add(i as u64 + 7919), -1.0, 1.0));
    }
    (a, b)
}

fn bits(p: &ParamSet) -> Vec<u32> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resize_up_then_down_is_identity(seed in any::<u64>(), f in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let x = tensor([2, 3, h, w], seed, -2.0, 2.0);
        let up = resize_nearest(&x, f, Resize::Up).unwrap();
        prop_assert_eq!(resize_nearest(&up, f, Resize::Down).unwrap(), x);
    }

    #[test]
    fn interpolation_sums_and_contracts(sizes in vec(1usize..40, 1..5), seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let (a, b) = aligned_pair(&sizes, seed);
        let ab = interpolate(&a, &b, lambda).unwrap();
        let ba = interpolate(&b, &a, lambda).unwrap();
        for ((s, x), y) in ab.flatten().iter().zip(ba.flatten()).zip(a.flatten().iter().zip(b.flatten())) {
            prop_assert!(((s + x) as f64 - (y.0 + y.1) as f64).abs() <= 1e-6);
        }
        let lhs = distance(&ab, &ba).unwrap();
        let rhs = (2.0 * lambda - 1.0).abs() * distance(&a, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * rhs.max(1e-12) + 1e-6, "{lhs} vs {rhs}");
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(sizes in vec(1usize..40, 1..4), seed in any::<u64>(), c in 0.01f32..100.0) {
        let (a, b) = aligned_pair(&sizes, seed);
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() <= 1e-12);
        let scaled = a.map(|v| v * c);
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() <= 1e-6);
    }

    #[test]
    fn checkpoint_bytes_round_trip(sizes in vec(0usize..20, 0..6), seed in any::<u64>(), meta in proptest::option::of("[a-z]{1,8}")) {
        let (mut a, _) = aligned_pair(&sizes, seed);
        if let Some(m) = meta {
            a.set_meta("note", m);
        }
        let bytes = a.encode();
        let back = ParamSet::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, a);
    }

    #[test]
    fn cross_interpolation_preserves_the_fused_model(sizes in vec(1usize..30, 1..4), seed in any::<u64>(), rounds in 1usize..6) {
        let (mut g, mut b) = aligned_pair(&sizes, seed);
        let before = final_fuse(&g, &b).unwrap();
        for _ in 0..rounds {
            let lambda = adaptive_lambda(&g, &b, 0.99).unwrap();
            prop_assert!((0.985..=0.995).contains(&lambda));
            let (g2, b2, log) = cross_interpolate(&g, &b, lambda).unwrap();
            prop_assert!(log.diff_norm_after < log.diff_norm_before);
            g = g2;
            b = b2;
        }
        prop_assert_eq!(bits(&final_fuse(&g, &b).unwrap()), bits(&before));
    }

    #[test]
    fn size_category_thresholds(f in 0.0f64..=1.0) {
        let expected = if f < 0.45 { SizeCategory::Small } else if f > 0.55 { SizeCategory::Large } else { SizeCategory::Medium };
        prop_assert_eq!(size_category(f), expected);
    }

    #[test]
    fn binarize_is_idempotent(seed in any::<u64>(), t in 0.01f32..=1.0) {
        let m = binarize(&tensor([1, 1, 6, 7], seed, 0.0, 1.0), 0.5);
        prop_assert_eq!(binarize(&m, t), m);
    }

    #[test]
    fn mask_png_round_trip(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let m = binarize(&tensor([1, 1, h, w], seed, 0.0, 1.0), 0.5);
        prop_assert_eq!(decode_mask_png(&encode_mask_png(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn manifest_text_is_a_fixed_point(n in 0usize..6, fracs in vec(proptest::option::of(0.0f64..=1.0), 6), rev in 0u64..100) {
        let samples: Vec<BlurSample> = (0..n).map(|i| BlurSample {
            id: format!("s{i}"),
            hr_path: format!("img/{i}.png"),
            mask_path: format!("mask/{i}.png"),
            blur_type: BlurType::ALL[i % BlurType::ALL.len()],
            intensity: Intensity::ALL[i % Intensity::ALL.len()],
            source: Source::ALL[i % Source::ALL.len()],
            review_state: ReviewState::ALL[i % ReviewState::ALL.len()],
            blur_fraction: fracs[i],
            revision: rev + i as u64,
        }).collect();
        let m = Manifest::new("/data", samples.clone());
        let text = m.to_jsonl();
        let parsed = parse_manifest(&text).unwrap();
        prop_assert_eq!(&parsed, &samples);
        prop_assert_eq!(Manifest::new("/data", parsed).to_jsonl(), text);
    }

    #[test]
    fn clamped_d_loss_is_non_negative(real in vec(-5.0f32..5.0, 1..20), seed in any::<u64>()) {
        let n = real.len();
        let r = Tensor::new([1, 1, 1, n], real).unwrap();
        let f = tensor([1, 1, 1, n], seed, -5.0, 5.0);
        prop_assert!(d_loss_from_logits(&r, &f, true).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn degradation_is_bounded_deterministic_and_mean_preserving(seed in any::<u64>(), deg_seed in 0u64..1000) {
        let hr = tensor([1, 3, 32, 32], seed, 0.2, 0.8);
        let cfg = DegradationConfig { seed: deg_seed, ..DegradationConfig::default() };
        let lr = degrade::degrade_sample(&hr, &cfg, "p").unwrap();
        prop_assert_eq!(&lr, &degrade::degrade_sample(&hr, &cfg, "p").unwrap());
        prop_assert!(lr.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut r = degrade::sample_stream(&cfg, "p");
        let d = DrawnDegradation::draw(&cfg, &mut r);
        prop_assert_eq!(&degrade_with(&hr, &cfg, &d, &mut r).unwrap(), &lr);
        let k = gaussian_kernel(cfg.kernel_size, d.sigma_x, d.sigma_y, d.theta).unwrap();
        let blurred_mean = box_downsample(&blur(&hr, &k).unwrap(), 4).unwrap().mean();
        let tol = 3.0 * d.noise / (lr.len() as f64).sqrt() + 1e-5;
        prop_assert!((lr.mean() - blurred_mean).abs() <= tol, "{} vs {blurred_mean} tol {tol}", lr.mean());
    }

    #[test]
    fn generator_shape_contract(h in 4usize..=64, w in 4usize..=64, seed in 0u64..4) {
        let cfg = GeneratorConfig { base_channels: 4, n_residual_blocks: 1, ..GeneratorConfig::default() };
        let g = build_generator(&cfg, seed).unwrap();
        let lr = tensor([1, 3, h, w], seed, 0.0, 1.0);
        let sr = generator_forward(&g, &lr).unwrap();
        prop_assert_eq!(sr.shape(), [1, 3, 4 * h, 4 * w]);
        prop_assert_eq!(generator_forward(&g, &lr).unwrap(), sr);
    }

    #[test]
    fn metric_identities(seed in any::<u64>(), h in 12usize..20, w in 12usize..20) {
        let a = tensor([1, 3, h, w], seed, 0.0, 1.0);
        let b = tensor([1, 3, h, w], seed ^ 0xabc, 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        prop_assert!((ssim(&a, &a, None).unwrap().unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(gmsd(&a, &a, None).unwrap(), Some(0.0));
    }

    #[test]
    fn noise_lowers_psnr_and_raises_gmsd(seed in any::<u64>()) {
        use rand_distr::{Distribution, Normal};
        let clean = pbasr_core::dataset::synth::texture(32, &mut Rng::seed_from_u64(seed));
        let mut r = Rng::seed_from_u64(seed ^ 1);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut noisy = |img: &Tensor, scale: f32| {
            let mut out = img.clone();
            out.data_mut().iter_mut().for_each(|v| *v += scale * normal.sample(&mut r) as f32);
            out
        };
        let light = noisy(&clean, 0.02);
        let heavy = noisy(&light, 1.0);
        prop_assert!(psnr(&clean, &heavy, None).unwrap() < psnr(&clean, &light, None).unwrap());
        prop_assert!(gmsd(&clean, &heavy, None).unwrap() > gmsd(&clean, &light, None).unwrap());
    }

    #[test]
    fn region_counts_partition_the_image(seed in any::<u64>(), t in 0.05f32..0.95) {
        let mask = binarize(&tensor([1, 1, 8, 8], seed, 0.0, 1.0), t);
        let count = |sel: Option<&Tensor>| -> pbasr_core::Result<Option<f64>> {
            Ok(Some(sel.map_or(64.0, |s| s.data().iter().filter(|&&v| v != 0.0).count() as f64)))
        };
        let v = RegionValues::compute(count, &mask).unwrap();
        prop_assert_eq!(v.blur.unwrap() + v.focus.unwrap(), v.all.unwrap());
    }
}

#[test]
fn discriminator_consumes_the_mask() {
    let d = build_discriminator(&DiscriminatorConfig::conditional(), 4).unwrap();
    let img = tensor([1, 3, 16, 16], 1, 0.0, 1.0);
    let mask = Tensor::from_fn([1, 1, 16, 16], |[_, _, y, _]| if y < 8 { 0.0 } else { 1.0 });
    let base = discriminator_forward(&d, &img, Some(&mask)).unwrap();
    let mut bumped = mask.clone();
    let off = bumped.offset([0, 0, 5, 5]);
    bumped.data_mut()[off] += 1e-2;
    let moved = discriminator_forward(&d, &img, Some(&bumped)).unwrap();
    let jac: f64 = base.data().iter().zip(moved.data()).map(|(a, b)| ((b - a) as f64 / 1e-2).abs()).sum();
    assert!(jac > 0.0, "finite-difference response to the mask channel is zero");
}
