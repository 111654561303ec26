mod common;

use common::{max_abs_diff, random_points, screen_camera};
use dynsplat_core::diffkernel::{check_gradients_multi, Array, Axis, GradCheckOptions, Tape};
use dynsplat_core::rasterizer::{
    composite, rasterize_graph, render_reference, render_tiled, Contribution, RenderSettings, RenderablePointSet,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tiled_matches_reference_on_random_scenes() {
    let cam = screen_camera(32, 32);
    let settings = RenderSettings {
        background: [0.2, 0.4, 0.6],
        ..RenderSettings::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=200);
        let pts = random_points(&mut rng, n, 32, 32);
        let a = render_tiled(&pts, &cam, &settings);
        let b = render_reference(&pts, &cam, &settings);
        worst = worst.max(max_abs_diff(&a.rgb, &b.rgb));
        assert!(max_abs_diff(&a.alpha, &b.alpha) <= 1e-5, "seed {seed}");
    }
    assert!(worst <= 1e-5, "max rgb difference {worst}");
}

#[test]
fn tiles_smaller_than_the_image_agree_too() {
    let cam = screen_camera(37, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts = random_points(&mut rng, 80, 37, 23);
    let reference = render_reference(&pts, &cam, &RenderSettings::default());
    for tile_size in [1, 4, 7, 16, 64] {
        let s = RenderSettings {
            tile_size,
            ..RenderSettings::default()
        };
        let out = render_tiled(&pts, &cam, &s);
        assert!(max_abs_diff(&out.rgb, &reference.rgb) <= 1e-12, "tile size {tile_size}");
    }
}

#[test]
fn expected_depth_normalizes_by_accumulated_weight() {
    let c = composite(
        &[
            Contribution { alpha: 0.5, color: [1.0, 0.0, 0.0], depth: 2.0 },
            Contribution { alpha: 0.5, color: [0.0, 1.0, 0.0], depth: 4.0 },
        ],
        [0.0; 3],
    );
    // weights 0.5 and 0.25
    assert!((c.depth - (0.5 * 2.0 + 0.25 * 4.0) / 0.75).abs() < 1e-12);
    assert!((c.alpha - 0.75).abs() < 1e-12);
}

fn permuted(pts: &RenderablePointSet, order: &[usize]) -> RenderablePointSet {
    RenderablePointSet {
        mu2d: order.iter().map(|&i| pts.mu2d[i]).collect(),
        conic: order.iter().map(|&i| pts.conic[i]).collect(),
        opacity: order.iter().map(|&i| pts.opacity[i]).collect(),
        color: order.iter().map(|&i| pts.color[i]).collect(),
        depth: order.iter().map(|&i| pts.depth[i]).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn input_order_does_not_matter(seed in 0u64..1000, n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n, 24, 24);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let cam = screen_camera(24, 24);
        let s = RenderSettings::default();
        let a = render_tiled(&pts, &cam, &s);
        let b = render_tiled(&permuted(&pts, &order), &cam, &s);
        prop_assert!(max_abs_diff(&a.rgb, &b.rgb) <= 1e-12);
        prop_assert!(max_abs_diff(&a.depth, &b.depth) <= 1e-12);
    }

    #[test]
    fn outputs_stay_in_range(seed in 0u64..1000, n in 0usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n, 20, 20);
        let out = render_tiled(&pts, &screen_camera(20, 20), &RenderSettings { background: [1.0, 0.5, 0.0], ..RenderSettings::default() });
        prop_assert!(out.rgb.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        prop_assert!(out.alpha.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Broad, semi-transparent splats keep every pixel away from the alpha
/// floor, the alpha cap and early termination, where the image is smooth.
fn smooth_scene(rng: &mut ChaCha8Rng, n: usize, size: usize) -> [Array; 4] {
    let s = size as f64;
    let mu: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.2 * s..0.8 * s)).collect();
    let conic: Vec<f64> = (0..n)
        .flat_map(|_| {
            let a: f64 = rng.random_range(0.02..0.06);
            let c: f64 = rng.random_range(0.02..0.06);
            let b = rng.random_range(-0.5..0.5) * (a * c).sqrt();
            [a, b, c]
        })
        .collect();
    let opacity: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..0.7)).collect();
    let color: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.05..0.95)).collect();
    [
        Array::new(vec![n, 2], mu).unwrap(),
        Array::new(vec![n, 3], conic).unwrap(),
        Array::new(vec![n, 1], opacity).unwrap(),
        Array::new(vec![n, 3], color).unwrap(),
    ]
}

#[test]
fn backward_matches_central_differences() {
    let size = 8;
    let cam = screen_camera(size, size);
    let settings = RenderSettings {
        background: [0.3, 0.1, 0.5],
        tile_size: 4,
    };
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let inputs = smooth_scene(&mut rng, n, size);
        let depth: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.7).collect();
        let weights = Array::new(vec![size, size, 3], (0..size * size * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = check_gradients_multi(
            |t: &mut Tape, v| {
                let r = rasterize_graph(t, v[0], v[1], v[2], v[3], &depth, &cam, &settings)?;
                let w = t.constant(weights.clone());
                let p = t.mul(r.image, w)?;
                t.sum(p, Axis::All)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "seed {seed}: {report:?}");
    }
}
