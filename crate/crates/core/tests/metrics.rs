mod common;

use pgcr::metrics::{image_mse, psnr, ssim, ImageU8, MetricReport};
use proptest::prelude::*;

use common::lcg_image;

// Values from skimage.metrics.structural_similarity(gaussian_weights=True,
// sigma=1.5, use_sample_covariance=False, data_range=255, channel_axis=2).
const SKIMAGE: [(u64, u64, f64); 2] = [(21, 22, -0.01188497081042629), (31, 32, 0.01758335935071112)];
const SKIMAGE_BLEND: f64 = 0.7536344435736718;

#[test]
fn ssim_matches_reference_on_random_images() {
    for (a, b, want) in SKIMAGE {
        let got = ssim(&lcg_image(16, 16, a), &lcg_image(16, 16, b)).unwrap();
        assert!((got - want).abs() < 1e-6, "{a}/{b}: {got} vs {want}");
    }
    let x = lcg_image(16, 16, 41);
    let n = lcg_image(16, 16, 42);
    let y = ImageU8::from_fn(16, 16, |i, j, c| x.get(i, j, c) / 2 + n.get(i, j, c) / 4);
    let got = ssim(&x, &y).unwrap();
    assert!((got - SKIMAGE_BLEND).abs() < 1e-6, "{got}");
}

#[test]
fn psnr_of_constant_offset() {
    let x = ImageU8::from_fn(32, 32, |i, j, c| ((i * 5 + j * 3 + c * 50) % 200) as u8);
    let y = ImageU8::from_fn(32, 32, |i, j, c| x.get(i, j, c) + 16);
    assert_eq!(image_mse(&x, &y).unwrap(), 256.0);
    assert!((psnr(&x, &y).unwrap() - 24.0484).abs() < 1e-3);
    assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
}

#[test]
fn report_counts_identical_rows_as_infinite() {
    let x = lcg_image(16, 16, 3);
    let y = lcg_image(16, 16, 4);
    let r = MetricReport::evaluate([("a".to_string(), &x, &x), ("b".to_string(), &x, &y)]).unwrap();
    assert_eq!(r.inf_psnr_count, 1);
    assert_eq!(r.mean_psnr, psnr(&x, &y).unwrap());
    assert!(r.to_csv().contains("inf"));
}

#[test]
fn size_mismatch_is_an_error() {
    assert!(psnr(&lcg_image(16, 16, 1), &lcg_image(16, 17, 1)).is_err());
    assert!(ssim(&lcg_image(16, 16, 1), &lcg_image(17, 16, 1)).is_err());
}

fn image_strategy() -> impl Strategy<Value = (ImageU8, ImageU8)> {
    (11usize..20, 11usize..20).prop_flat_map(|(w, h)| {
        let n = w * h * 3;
        (prop::collection::vec(any::<u8>(), n), prop::collection::vec(any::<u8>(), n))
            .prop_map(move |(a, b)| (ImageU8::new(w, h, a).unwrap(), ImageU8::new(w, h, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_symmetric_and_bounded((x, y) in image_strategy()) {
        let s = ssim(&x, &y).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_positive((x, y) in image_strategy()) {
        let p = psnr(&x, &y).unwrap();
        prop_assert_eq!(p, psnr(&y, &x).unwrap());
        prop_assert!(p > 0.0);
    }
}
