use rayon::prelude::*;

use super::{alpha_terms, pixel_center, PixelAcc, RenderCache, RenderOutput, RenderSettings, RenderablePointSet, ALPHA_MIN};
use crate::gaussians::Camera;

/// Tile-binned renderer; matches [`super::render_reference`] pixel for pixel.
pub fn render_tiled(points: &RenderablePointSet, cam: &Camera, settings: &RenderSettings) -> RenderOutput {
    render_tiled_cached(points, cam, settings).0
}

/// Radius (px) beyond which a point's alpha is below `ALPHA_MIN`, or `None`
/// when it never reaches `ALPHA_MIN`.
fn cutoff_radius(conic: [f64; 3], opacity: f64) -> Option<f64> {
    if !(opacity >= ALPHA_MIN) {
        return None;
    }
    let q_max = 2.0 * (opacity / ALPHA_MIN).ln();
    let det = conic[0] * conic[2] - conic[1] * conic[1];
    if !(det > 0.0) {
        return None;
    }
    // Largest eigenvalue of the covariance = 1 / smallest eigenvalue of the conic.
    let mid = 0.5 * (conic[0] + conic[2]);
    let lambda_min = mid - (mid * mid - det).max(0.0).sqrt();
    if !(lambda_min > 0.0) {
        return None;
    }
    let r = (q_max / lambda_min).sqrt();
    // Slack keeps the bound conservative under rounding; extra candidates are
    // rejected by the alpha floor exactly as in the reference path.
    r.is_finite().then_some(r * (1.0 + 1e-6) + 1e-6)
}

/// Forward pass that also returns the state needed by [`super::render_backward`].
pub fn render_tiled_cached(
    points: &RenderablePointSet,
    cam: &Camera,
    settings: &RenderSettings,
) -> (RenderOutput, RenderCache) {
    let (w, h) = (cam.width, cam.height);
    let ts = settings.tile_size.max(1);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut out = RenderOutput::blank(w, h, points.len(), settings.background);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];

    for i in 0..points.len() {
        let Some(r) = cutoff_radius(points.conic[i], points.opacity[i]) else { continue };
        let [mx, my] = points.mu2d[i];
        if !(mx.is_finite() && my.is_finite()) {
            continue;
        }
        // Pixel centers sit at integer + 0.5.
        let x0 = (mx - r - 0.5).ceil().max(0.0);
        let x1 = (mx + r - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (my - r - 0.5).ceil().max(0.0);
        let y1 = (my + r - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        out.visible[i] = true;
        let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
        let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    for list in &mut lists {
        points.depth_order(list);
    }

    struct TileResult {
        pixels: Vec<(usize, PixelAcc, u32)>,
    }
    let results: Vec<TileResult> = lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut pixels = Vec::with_capacity(ts * ts);
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let p = pixel_center(x, y);
                    let mut acc = PixelAcc::new();
                    let mut visited = 0;
                    for &id in list {
                        if acc.done() {
                            break;
                        }
                        visited += 1;
                        let i = id as usize;
                        let (alpha, _, _) = alpha_terms(p, points.mu2d[i], points.conic[i], points.opacity[i]);
                        if alpha <= 0.0 {
                            continue;
                        }
                        acc.add(alpha, points.color[i], points.depth[i]);
                    }
                    pixels.push((y * w + x, acc, visited));
                }
            }
            TileResult { pixels }
        })
        .collect();

    let mut cache = RenderCache {
        tile_w: ts,
        tile_h: ts,
        tiles_x,
        lists,
        processed: vec![0; w * h],
        t_final: vec![1.0; w * h],
    };
    for tile in results {
        for (pix, acc, visited) in tile.pixels {
            out.write_pixel(pix, &acc, settings.background);
            cache.processed[pix] = visited;
            cache.t_final[pix] = acc.t;
        }
    }
    (out, cache)
}
