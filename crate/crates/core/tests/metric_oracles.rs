use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpsynth::deform::Mask;
use warpsynth::metrics::{mde, nmi, psnr, ssim};
use warpsynth::Tensor;

mod support;
use support::{oracle_mde, oracle_nmi, oracle_psnr, oracle_ssim, random_image, random_mask};

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let n = 32;
        let a = random_image(&mut rng, 3, n);
        let noise = rng.gen_range(1.0..60.0);
        let b = Tensor::from_fn(&[3, n, n], |i| (a.data()[i] + rng.gen_range(-noise..noise)).clamp(0.0, 255.0));
        let m = random_mask(&mut rng, n);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1.0);
        assert!(close(psnr(&a, &b, &m, 255.0).unwrap(), oracle_psnr(&a, &b, &m, 255.0)));
        assert!(close(ssim(&a, &b, &m, 255.0).unwrap(), oracle_ssim(&a, &b, &m, 255.0)));
        assert!(close(nmi(&a, &b, &m, 64).unwrap(), oracle_nmi(&a, &b, &m, 64)));
        let d1 = Tensor::from_fn(&[2, n, n], |_| rng.gen_range(-3.0..35.0));
        let d2 = Tensor::from_fn(&[2, n, n], |_| rng.gen_range(-3.0..35.0));
        assert!(close(mde(&d1, &d2, &m).unwrap(), oracle_mde(&d1, &d2, &m)));
        assert_eq!(nmi(&a, &a, &m, 64).unwrap(), 2.0);
        assert_eq!(ssim(&a, &a, &m, 255.0).unwrap(), 1.0);
        assert_eq!(mde(&d1, &d1, &m).unwrap(), 0.0);
    }
}

#[test]
fn nmi_of_independent_noise_is_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_image(&mut rng, 1, 100);
    let b = random_image(&mut rng, 1, 100);
    let v = nmi(&a, &b, &Mask::full(100, 100), 16).unwrap();
    assert!((v - 1.0).abs() < 0.02, "{v}");
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_image(&mut rng, 3, 32);
    let unit = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(-1.0..1.0));
    let full = Mask::full(32, 32);
    let values: Vec<f64> = [1.0, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&s| psnr(&a, &Tensor::from_fn(&[3, 32, 32], |i| a.data()[i] + s * unit.data()[i]), &full, 255.0).unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metric_ranges_and_mde_is_a_metric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16;
        let a = random_image(&mut rng, 2, n);
        let b = random_image(&mut rng, 2, n);
        let m = random_mask(&mut rng, n);
        let v = nmi(&a, &b, &m, 32).unwrap();
        prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&v));
        let s = ssim(&a, &b, &Mask::full(n, n), 255.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        // Intensity rescaling keeps every sample in its bin.
        let a2 = a.map(|x| x.round() * 2.0 + 7.0);
        let a1 = a.map(|x| x.round());
        prop_assert!((nmi(&a1, &b, &m, 32).unwrap() - nmi(&a2, &b, &m, 32).unwrap()).abs() < 1e-12);

        let d: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[2, n, n], |_| rng.gen_range(0.0..16.0))).collect();
        let e = |i: usize, j: usize| mde(&d[i], &d[j], &m).unwrap();
        prop_assert_eq!(e(0, 1), e(1, 0));
        prop_assert!(e(0, 2) <= e(0, 1) + e(1, 2) + 1e-12);
    }
}
