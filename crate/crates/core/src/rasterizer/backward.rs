use rayon::prelude::*;

use super::{alpha_terms, pixel_center, RenderCache, RenderablePointSet};

/// Adjoints of a scalar image loss with respect to every screen-space input.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrads {
    pub mu2d: Vec<[f64; 2]>,
    pub conic: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl PointGrads {
    fn zeros(n: usize) -> Self {
        Self {
            mu2d: vec![[0.0; 2]; n],
            conic: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

/// Per-tile partial adjoints, indexed like the tile's candidate list.
type Partial = Vec<[f64; 9]>;

/// Back-to-front sweep over each pixel's processed contributors.
///
/// Transmittance is recovered by dividing out `1 - alpha` (alpha <= 0.99, so
/// the division is safe) instead of storing per-contributor state. Tiles
/// produce partial sums that are reduced in tile order, so the result does
/// not depend on thread scheduling.
pub fn render_backward(
    points: &RenderablePointSet,
    cache: &RenderCache,
    background: [f64; 3],
    width: usize,
    height: usize,
    d_rgb: &[f64],
) -> PointGrads {
    let partials: Vec<Partial> = cache
        .lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut part: Partial = vec![[0.0; 9]; list.len()];
            let (tx, ty) = (tile % cache.tiles_x, tile / cache.tiles_x);
            for y in ty * cache.tile_h..((ty + 1) * cache.tile_h).min(height) {
                for x in tx * cache.tile_w..((tx + 1) * cache.tile_w).min(width) {
                    let pix = y * width + x;
                    let g = [d_rgb[3 * pix], d_rgb[3 * pix + 1], d_rgb[3 * pix + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    let p = pixel_center(x, y);
                    let mut t = cache.t_final[pix];
                    let mut rest = [t * background[0], t * background[1], t * background[2]];
                    for k in (0..cache.processed[pix] as usize).rev() {
                        let i = list[k] as usize;
                        let (alpha, gauss, clamped) =
                            alpha_terms(p, points.mu2d[i], points.conic[i], points.opacity[i]);
                        if alpha <= 0.0 {
                            continue;
                        }
                        let t_i = t / (1.0 - alpha);
                        let c = points.color[i];
                        let w = t_i * alpha;
                        let acc = &mut part[k];
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            acc[6 + ch] += w * g[ch];
                            d_alpha += g[ch] * (t_i * c[ch] - rest[ch] / (1.0 - alpha));
                        }
                        for ch in 0..3 {
                            rest[ch] += w * c[ch];
                        }
                        t = t_i;
                        if clamped {
                            continue;
                        }
                        // alpha = o * exp(-q/2)
                        acc[5] += d_alpha * gauss;
                        let d_q = -0.5 * alpha * d_alpha;
                        let dx = p[0] - points.mu2d[i][0];
                        let dy = p[1] - points.mu2d[i][1];
                        let [a, b, cc] = points.conic[i];
                        acc[0] += d_q * -2.0 * (a * dx + b * dy);
                        acc[1] += d_q * -2.0 * (b * dx + cc * dy);
                        acc[2] += d_q * dx * dx;
                        acc[3] += d_q * 2.0 * dx * dy;
                        acc[4] += d_q * dy * dy;
                    }
                }
            }
            part
        })
        .collect();

    let mut grads = PointGrads::zeros(points.len());
    for (list, part) in cache.lists.iter().zip(&partials) {
        for (&id, d) in list.iter().zip(part) {
            let i = id as usize;
            grads.mu2d[i][0] += d[0];
            grads.mu2d[i][1] += d[1];
            grads.conic[i][0] += d[2];
            grads.conic[i][1] += d[3];
            grads.conic[i][2] += d[4];
            grads.opacity[i] += d[5];
            grads.color[i][0] += d[6];
            grads.color[i][1] += d[7];
            grads.color[i][2] += d[8];
        }
    }
    grads
}
