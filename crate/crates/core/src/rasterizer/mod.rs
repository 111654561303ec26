//! Front-to-back alpha compositing of screen-space Gaussians.
//!
//! Two forward paths produce the same image: [`render_reference`] walks every
//! point for every pixel, [`render_tiled`] bins points into 16x16 tiles first.
//! The tile binning radius is derived from each point's opacity so that every
//! point it skips would have had `alpha < 1/255` anyway, which makes the two
//! paths agree exactly.

mod backward;
mod graph;
mod reference;
mod tiled;

pub use backward::{render_backward, PointGrads};
pub use graph::{rasterize_graph, RasterizeVars};
pub use reference::{render_reference, render_reference_cached};
pub use tiled::{render_tiled, render_tiled_cached};

/// Per-contributor alpha is clamped to this value.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions with smaller alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Accumulation stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;

/// Screen-space Gaussians: centers in px, inverse covariances, opacities,
/// colors in `[0, 1]` and camera depths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderablePointSet {
    pub mu2d: Vec<[f64; 2]>,
    /// `(a, b, c)` of the symmetric inverse covariance `[[a, b], [b, c]]`.
    pub conic: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl RenderablePointSet {
    pub fn len(&self) -> usize {
        self.mu2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu2d.is_empty()
    }

    /// Adds a point given its screen covariance. Returns `false` (and drops
    /// the point) when the covariance is not invertible.
    pub fn push(&mut self, mu2d: [f64; 2], sigma2d: [[f64; 2]; 2], opacity: f64, color: [f64; 3], depth: f64) -> bool {
        let det = sigma2d[0][0] * sigma2d[1][1] - sigma2d[0][1] * sigma2d[1][0];
        if det <= 1e-12 || !det.is_finite() {
            return false;
        }
        self.mu2d.push(mu2d);
        self.conic.push([sigma2d[1][1] / det, -sigma2d[0][1] / det, sigma2d[0][0] / det]);
        self.opacity.push(opacity);
        self.color.push(color.map(|c| c.clamp(0.0, 1.0)));
        self.depth.push(depth);
        true
    }

    /// Points ordered by `(depth, index)`.
    pub(crate) fn depth_order(&self, ids: &mut [u32]) {
        ids.sort_by(|&a, &b| {
            self.depth[a as usize]
                .total_cmp(&self.depth[b as usize])
                .then(a.cmp(&b))
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile_size: TILE_SIZE,
        }
    }
}

/// Rendered maps, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H * W * 3`.
    pub rgb: Vec<f64>,
    /// Expected depth per pixel.
    pub depth: Vec<f64>,
    /// Accumulated opacity `1 - T`.
    pub alpha: Vec<f64>,
    /// Contributors composited per pixel.
    pub contributors: Vec<u32>,
    /// Points that reached at least one pixel's candidate list.
    pub visible: Vec<bool>,
}

/// Per-pixel state a forward pass leaves behind for the backward sweep.
#[derive(Clone, Debug, Default)]
pub struct RenderCache {
    pub(crate) tile_w: usize,
    pub(crate) tile_h: usize,
    pub(crate) tiles_x: usize,
    /// Depth-sorted candidate ids per tile.
    pub(crate) lists: Vec<Vec<u32>>,
    /// Candidate-list entries visited per pixel before termination.
    pub(crate) processed: Vec<u32>,
    /// Final transmittance per pixel.
    pub(crate) t_final: Vec<f64>,
}

impl RenderOutput {
    pub(crate) fn write_pixel(&mut self, pix: usize, acc: &PixelAcc, bg: [f64; 3]) {
        let c = acc.finish(bg);
        self.rgb[3 * pix..3 * pix + 3].copy_from_slice(&c.rgb);
        self.alpha[pix] = c.alpha;
        self.depth[pix] = c.depth;
        self.contributors[pix] = c.count;
    }

    pub(crate) fn blank(width: usize, height: usize, n: usize, bg: [f64; 3]) -> Self {
        let rgb = (0..width * height).flat_map(|_| bg).collect();
        Self {
            width,
            height,
            rgb,
            depth: vec![0.0; width * height],
            alpha: vec![0.0; width * height],
            contributors: vec![0; width * height],
            visible: vec![false; n],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let k = 3 * (y * self.width + x);
        [self.rgb[k], self.rgb[k + 1], self.rgb[k + 2]]
    }
}

/// `opacity * exp(-q/2)` with `q` the Mahalanobis distance of `p`; clamped
/// to `ALPHA_MAX` and zeroed below `ALPHA_MIN`.
pub fn pixel_alpha(p: [f64; 2], mu2d: [f64; 2], conic: [f64; 3], opacity: f64) -> f64 {
    let (alpha, _, _) = alpha_terms(p, mu2d, conic, opacity);
    alpha
}

/// `(alpha, gaussian, clamped)` where `gaussian = exp(-q/2)`.
#[inline]
pub(crate) fn alpha_terms(p: [f64; 2], mu2d: [f64; 2], conic: [f64; 3], opacity: f64) -> (f64, f64, bool) {
    let dx = p[0] - mu2d[0];
    let dy = p[1] - mu2d[1];
    let q = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy;
    let g = (-0.5 * q).exp();
    let raw = opacity * g;
    if raw > ALPHA_MAX {
        (ALPHA_MAX, g, true)
    } else if raw < ALPHA_MIN || !raw.is_finite() {
        (0.0, g, false)
    } else {
        (raw, g, false)
    }
}

/// One depth-sorted contribution to a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub alpha: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    pub count: u32,
}

/// Accumulates running sums for one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelAcc {
    pub rgb: [f64; 3],
    pub t: f64,
    pub depth: f64,
    pub weight: f64,
    pub count: u32,
}

impl PixelAcc {
    pub fn new() -> Self {
        Self {
            rgb: [0.0; 3],
            t: 1.0,
            depth: 0.0,
            weight: 0.0,
            count: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.t < T_MIN
    }

    #[inline]
    pub fn add(&mut self, alpha: f64, color: [f64; 3], depth: f64) {
        let w = self.t * alpha;
        for (acc, c) in self.rgb.iter_mut().zip(color) {
            *acc += w * c;
        }
        self.depth += w * depth;
        self.weight += w;
        self.t *= 1.0 - alpha;
        self.count += 1;
    }

    pub fn finish(&self, bg: [f64; 3]) -> Composite {
        Composite {
            rgb: [
                self.rgb[0] + self.t * bg[0],
                self.rgb[1] + self.t * bg[1],
                self.rgb[2] + self.t * bg[2],
            ],
            alpha: 1.0 - self.t,
            depth: self.depth / self.weight.max(1e-10),
            count: self.count,
        }
    }
}

/// Composites contributions sorted front to back over `background`.
pub fn composite(contributions: &[Contribution], background: [f64; 3]) -> Composite {
    debug_assert!(
        contributions.windows(2).all(|w| w[0].depth <= w[1].depth),
        "contract violation: contributions must be sorted by depth"
    );
    let mut acc = PixelAcc::new();
    for c in contributions {
        if acc.done() {
            break;
        }
        if c.alpha <= 0.0 {
            continue;
        }
        acc.add(c.alpha, c.color, c.depth);
    }
    acc.finish(background)
}

#[inline]
pub(crate) fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}
