mod common;

use common::{max_abs_diff, random_image, smooth_image};
use fnf_core::geometry::{mean_displacement, warp_image, Homography};
use fnf_core::image::{load_image, save_image, BitDepth, ImageMeta};
use fnf_core::metrics::{mse, psnr, ssim};
use fnf_core::render::{render_srgb, Gamma, RenderParams, IDENTITY3};
use fnf_core::LinearImage;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[test]
fn render_examples() {
    let img = LinearImage::filled(4, 4, [0.5, 1.0, 0.0]);
    let out = render_srgb(&img, &RenderParams::default());
    assert!((out.get(0, 1, 1) as f64 - 0.7354).abs() < 1e-4);
    assert_eq!(out.get(1, 2, 2), 1.0);
    assert_eq!(out.get(2, 0, 3), 0.0);
    let zero = render_srgb(&LinearImage::zeros(3, 5), &RenderParams::with_gain(7.0));
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_identity_rendering_is_a_clip() {
    let img = random_image(3, 8, 8, -0.5, 1.5);
    let rp = RenderParams {
        gain: 1.0,
        color_matrix: IDENTITY3,
        gamma: Gamma::Linear,
    };
    let out = render_srgb(&img, &rp);
    for (o, i) in out.data().iter().zip(img.data()) {
        assert_eq!(*o, i.clamp(0.0, 1.0));
    }
}

#[test]
fn psnr_matches_independent_mse() {
    let a = random_image(10, 16, 24, 0.0, 1.0);
    let b = random_image(11, 16, 24, 0.0, 1.0);
    let mut acc = 0.0f64;
    for (p, q) in a.data().iter().zip(b.data()) {
        acc += ((*p as f64) - (*q as f64)).powi(2);
    }
    let m = acc / (16 * 24 * 3) as f64;
    assert!((mse(&a, &b).unwrap() - m).abs() < 1e-12);
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_of_tenth_offset_is_twenty_db() {
    let a = random_image(4, 16, 16, 0.0, 0.8);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
}

#[test]
fn ssim_examples() {
    let a = random_image(5, 32, 32, 0.0, 1.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let z = LinearImage::zeros(32, 32);
    let o = LinearImage::filled(32, 32, [1.0; 3]);
    let floor = ssim(&z, &o).unwrap();
    let c1 = 0.01f64.powi(2);
    assert!((floor - c1 / (1.0 + c1)).abs() < 1e-9, "{floor}");
    assert!(floor < 0.01);
    let mut r = common::rng(6);
    let noisy = a.map(|v| v + 1e-4 * r.sample::<f64, _>(StandardNormal) as f32);
    assert!(ssim(&a, &noisy).unwrap() > 0.99);
    assert!(ssim(&LinearImage::zeros(10, 40), &LinearImage::zeros(10, 40)).is_err());
}

#[test]
fn png_roundtrips_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    for (i, img) in [
        LinearImage::zeros(32, 32),
        LinearImage::filled(32, 32, [1.0; 3]),
        random_image(7, 32, 64, 0.0, 1.0),
    ]
    .into_iter()
    .enumerate()
    {
        let p = dir.path().join(format!("img{i}.png"));
        save_image(&p, &img, BitDepth::Sixteen, Some(&ImageMeta::default())).unwrap();
        let (back, meta) = load_image(&p).unwrap();
        assert_eq!(meta, ImageMeta::default());
        assert!(max_abs_diff(&img, &back) <= 1.0 / 65535.0);
    }
}

#[test]
fn missing_sidecar_gives_default_meta() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bare.png");
    save_image(&p, &LinearImage::zeros(32, 32), BitDepth::Sixteen, None).unwrap();
    let (_, meta) = load_image(&p).unwrap();
    let rp = meta.render_params();
    assert_eq!((rp.gain, rp.color_matrix, rp.gamma), (1.0, IDENTITY3, Gamma::Srgb));
}

#[test]
fn ramp_shift_by_one_column() {
    let ramp = LinearImage::from_fn(8, 8, |c, y, x| (c * 64 + y * 8 + x) as f32 / 200.0);
    let out = warp_image(&ramp, &Homography::translation(1.0, 0.0)).unwrap();
    for c in 0..3 {
        for y in 0..8 {
            for x in 1..8 {
                assert_eq!(out.get(c, y, x), ramp.get(c, y, x - 1));
            }
        }
    }
}

#[test]
fn singular_homography_is_rejected() {
    assert!(Homography::from_row_major([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).is_err());
}

fn small_homography() -> impl Strategy<Value = Homography> {
    (
        prop::array::uniform3(-0.5f64..0.5),
        0.98f64..1.02,
        prop::array::uniform2(-2.0f64..2.0),
    )
        .prop_map(|(r, s, t)| Homography::from_params(r, s, t, 64, 64).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_warp_is_bit_exact(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let img = random_image(seed, h, w, -0.2, 1.2);
        prop_assert_eq!(warp_image(&img, &Homography::identity()).unwrap(), img);
    }

    #[test]
    fn constants_survive_warps(v in 0.0f32..1.0, h in small_homography()) {
        let img = LinearImage::filled(64, 64, [v, v * 0.5, 1.0 - v]);
        prop_assert!(max_abs_diff(&warp_image(&img, &h).unwrap(), &img) < 1e-6);
    }

    #[test]
    fn warps_compose(seed in any::<u64>(), h in small_homography(), g in small_homography()) {
        let img = smooth_image(seed, 64, 64);
        let seq = warp_image(&warp_image(&img, &h).unwrap(), &g).unwrap();
        let once = warp_image(&img, &g.compose(&h).unwrap()).unwrap();
        let mut err = 0.0f32;
        for c in 0..3 {
            for y in 8..56 {
                for x in 8..56 {
                    err = err.max((seq.get(c, y, x) - once.get(c, y, x)).abs());
                }
            }
        }
        prop_assert!(err <= 0.01, "{}", err);
    }

    #[test]
    fn translations_displace_uniformly(tx in -5.0f64..5.0, ty in -5.0f64..5.0, h in 1usize..100, w in 1usize..100) {
        let d = mean_displacement(&Homography::translation(tx, ty), h, w);
        prop_assert!((d - (tx.abs() + ty.abs())).abs() < 1e-9);
    }

    #[test]
    fn render_is_monotone_in_gain(v in 0.0f32..2.0, g1 in 0.01f64..50.0, dg in 0.0f64..50.0) {
        let img = LinearImage::filled(1, 1, [v; 3]);
        let a = render_srgb(&img, &RenderParams::with_gain(g1));
        let b = render_srgb(&img, &RenderParams::with_gain(g1 + dg));
        prop_assert!(a.get(0, 0, 0) <= b.get(0, 0, 0));
    }

    #[test]
    fn render_stays_in_unit_range(seed in any::<u64>(), gain in 0.01f64..100.0) {
        let out = render_srgb(&random_image(seed, 4, 4, -1.0, 2.0), &RenderParams::with_gain(gain));
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn srgb_curve_matches_reference(v in 0.0f64..1.0) {
        let out = render_srgb(&LinearImage::filled(1, 1, [v as f32; 3]), &RenderParams::default());
        let expect = srgb(v as f32 as f64);
        prop_assert!((out.get(0, 0, 0) as f64 - expect).abs() <= 1e-6);
    }

    #[test]
    fn metrics_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_image(s1, 16, 16, 0.0, 1.0);
        let b = random_image(s2, 16, 16, 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }
}
