use mmstyle::consistency::{backward_warp, occlusion_mask};
use mmstyle::scene::{generate_synthetic_scene, ground_truth_flow, SceneBundle};
use mmstyle::style::catalog;
use mmstyle::stylizer::{
    adain, adain_transfer, channel_stats, stylize_views, Codec, FeatureExtractor, FeatureMap, SIGMA_FLOOR,
};
use mmstyle::ImageBuffer;
use proptest::prelude::*;

fn one_row(channels: usize, values: &[f64]) -> FeatureMap {
    FeatureMap {
        channels,
        height: 1,
        width: values.len() / channels,
        data: values.to_vec(),
    }
}

#[test]
fn stats_hand_values() {
    let (mu, sigma) = channel_stats(&one_row(1, &[0.3; 5]));
    assert!((mu[0] - 0.3).abs() < 1e-15);
    assert_eq!(sigma[0], SIGMA_FLOOR);

    let (mu, sigma) = channel_stats(&one_row(2, &[0.0, 2.0, 5.0, 5.0]));
    assert_eq!((mu[0], sigma[0]), (1.0, 1.0));
    // the second channel is constant and must not see the first
    assert_eq!((mu[1], sigma[1]), (5.0, SIGMA_FLOOR));
}

#[test]
fn adain_shift_matches_hand_values() {
    // content channel {0, 2}: mean 1, std 1; style {10, 12}: mean 11, std 1
    let out = adain(&one_row(1, &[0.0, 2.0]), &one_row(1, &[10.0, 12.0]));
    assert_eq!(out.data, vec![10.0, 12.0]);

    let content = ImageBuffer::from_fn(4, 1, |x, _| [0.1 + 0.1 * x as f64; 3]);
    let style = ImageBuffer::from_fn(4, 1, |x, _| [0.5 + 0.1 * x as f64; 3]);
    let fx = FeatureExtractor::identity();
    let moved = adain_transfer(&content, &style, &fx);
    for (a, b) in content.data().iter().zip(moved.data()) {
        assert!((b - (a + 0.4)).abs() < 1e-12);
    }
}

#[test]
fn output_is_clipped_to_unit_range() {
    let scene = generate_synthetic_scene(0, 2, 32).unwrap();
    let harsh = ImageBuffer::from_fn(32, 32, |x, y| {
        if (x / 2 + y / 2) % 2 == 0 {
            [1.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        }
    });
    let out = adain_transfer(&scene.views[0].image, &harsh, &FeatureExtractor::seeded(0));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(out.data().iter().any(|v| *v == 0.0 || *v == 1.0));
}

#[test]
fn style_equal_to_content_is_a_fixed_point() {
    let scene = generate_synthetic_scene(0, 2, 32).unwrap();
    let img = &scene.views[0].image;
    for fx in [FeatureExtractor::identity(), FeatureExtractor::seeded(3)] {
        let out = adain_transfer(img, img, &fx);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn transfer_is_deterministic_in_the_seed() {
    let scene = generate_synthetic_scene(1, 2, 32).unwrap();
    let style = catalog()[0].render(32);
    let a = adain_transfer(&scene.views[0].image, &style, &FeatureExtractor::seeded(9));
    let b = adain_transfer(&scene.views[0].image, &style, &FeatureExtractor::seeded(9));
    assert_eq!(a.checksum(), b.checksum());
    let c = adain_transfer(&scene.views[0].image, &style, &FeatureExtractor::seeded(10));
    assert_ne!(a.checksum(), c.checksum());
    assert_ne!(
        FeatureExtractor::seeded(9).cache_key(),
        FeatureExtractor::seeded(10).cache_key()
    );
}

#[test]
fn one_stylized_view_per_scene_view() {
    let scene = generate_synthetic_scene(0, 2, 24).unwrap();
    let out = stylize_views(&scene, "s", &catalog()[1].render(32), &FeatureExtractor::seeded(0));
    assert_eq!(out.len(), 2);
    for (i, v) in out.iter().enumerate() {
        assert_eq!(v.view, i);
        assert_eq!(v.image.dims(), scene.dims());
    }
}

#[test]
fn duplicate_views_stylize_identically() {
    let base = generate_synthetic_scene(0, 2, 24).unwrap();
    let scene = SceneBundle::new("dup".into(), vec![base.views[0].clone(), base.views[0].clone()], None).unwrap();
    let out = stylize_views(&scene, "s", &catalog()[2].render(32), &FeatureExtractor::seeded(0));
    assert_eq!(out[0].image, out[1].image);
}

#[test]
fn independent_stylization_disagrees_across_views() {
    let scene = generate_synthetic_scene(0, 4, 64).unwrap();
    let fx = FeatureExtractor::seeded(0);
    let out = stylize_views(&scene, "s", &catalog()[0].render(64), &fx);
    let (j, r) = (0, 3);
    let fwd = ground_truth_flow(&scene, j, r).unwrap();
    let bwd = ground_truth_flow(&scene, r, j).unwrap();
    let mask = occlusion_mask(&fwd, &bwd, 1.0).unwrap();
    let mean_err = |a: &ImageBuffer, b: &ImageBuffer| {
        let warped = backward_warp(b, &fwd).unwrap();
        let (w, h) = a.dims();
        let (mut sum, mut n) = (0.0, 0);
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    let (p, q) = (a.get(x, y), warped.get(x, y));
                    sum += (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>() / 3.0;
                    n += 1;
                }
            }
        }
        sum / n as f64
    };
    let photo = mean_err(&scene.views[j].image, &scene.views[r].image);
    let stylized = mean_err(&out[j].image, &out[r].image);
    assert!(
        stylized > 2.0 * photo && stylized > 2.0 / 255.0,
        "stylized {stylized}, photo {photo}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn identity_codec_output_carries_style_statistics(
        content in proptest::collection::vec(0.0f64..1.0, 48),
        style in proptest::collection::vec(0.0f64..1.0, 48),
    ) {
        let c = ImageBuffer::from_vec(4, 4, content).unwrap();
        let s = ImageBuffer::from_vec(4, 4, style).unwrap();
        let fx = FeatureExtractor::identity();
        let out = adain(&fx.encode(&c), &fx.encode(&s));
        let (mo, so) = channel_stats(&out);
        let (ms, ss) = channel_stats(&fx.encode(&s));
        let (_, sc) = channel_stats(&fx.encode(&c));
        for k in 0..3 {
            prop_assert!((mo[k] - ms[k]).abs() < 1e-4);
            // a floored content channel cannot regain variance
            if sc[k] > SIGMA_FLOOR {
                prop_assert!((so[k] - ss[k]).abs() < 1e-3);
            }
        }
    }
}
