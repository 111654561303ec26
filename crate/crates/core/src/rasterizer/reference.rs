use super::{alpha_terms, pixel_center, PixelAcc, RenderCache, RenderOutput, RenderSettings, RenderablePointSet};
use crate::gaussians::Camera;

/// Brute-force oracle: every pixel walks all points in global depth order.
pub fn render_reference(points: &RenderablePointSet, cam: &Camera, settings: &RenderSettings) -> RenderOutput {
    render_reference_cached(points, cam, settings).0
}

/// Forward pass that also returns the state needed by [`super::render_backward`].
pub fn render_reference_cached(
    points: &RenderablePointSet,
    cam: &Camera,
    settings: &RenderSettings,
) -> (RenderOutput, RenderCache) {
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput::blank(w, h, points.len(), settings.background);
    let mut order: Vec<u32> = (0..points.len() as u32).collect();
    points.depth_order(&mut order);
    let mut cache = RenderCache {
        tile_w: w,
        tile_h: h,
        tiles_x: 1,
        lists: vec![order],
        processed: vec![0; w * h],
        t_final: vec![1.0; w * h],
    };
    let order = &cache.lists[0];
    for y in 0..h {
        for x in 0..w {
            let p = pixel_center(x, y);
            let mut acc = PixelAcc::new();
            let mut visited = 0;
            for &id in order {
                if acc.done() {
                    break;
                }
                visited += 1;
                let i = id as usize;
                let (alpha, _, _) = alpha_terms(p, points.mu2d[i], points.conic[i], points.opacity[i]);
                if alpha <= 0.0 {
                    continue;
                }
                out.visible[i] = true;
                acc.add(alpha, points.color[i], points.depth[i]);
            }
            let pix = y * w + x;
            out.write_pixel(pix, &acc, settings.background);
            cache.processed[pix] = visited;
            cache.t_final[pix] = acc.t;
        }
    }
    (out, cache)
}
