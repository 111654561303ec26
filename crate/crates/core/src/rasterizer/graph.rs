use super::{render_backward, render_tiled_cached, RenderCache, RenderOutput, RenderSettings, RenderablePointSet};
use crate::diffkernel::{Array, CustomOp, KernelError, Tape, Var};
use crate::gaussians::Camera;

/// Image node plus the non-differentiable maps of the same forward pass.
pub struct RasterizeVars {
    /// `[H, W, 3]`.
    pub image: Var,
    pub output: RenderOutput,
}

struct RasterizeOp {
    points: RenderablePointSet,
    cache: RenderCache,
    background: [f64; 3],
    width: usize,
    height: usize,
}

impl CustomOp for RasterizeOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn vjp(&self, _inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let g = render_backward(&self.points, &self.cache, self.background, self.width, self.height, grad.data());
        vec![
            Some(Array::from_rows(&g.mu2d)),
            Some(Array::from_rows(&g.conic)),
            Some(Array::new(vec![g.opacity.len(), 1], g.opacity).expect("opacity adjoint shape")),
            Some(Array::from_rows(&g.color)),
        ]
    }
}

fn rows<const K: usize>(a: &Array) -> Vec<[f64; K]> {
    a.data().chunks_exact(K).map(|c| c.try_into().expect("row width")).collect()
}

/// Records a tiled rasterization of `n` points.
///
/// `mu2d` `[n, 2]`, `conic` `[n, 3]`, `opacity` `[n, 1]`, `color` `[n, 3]`;
/// `depth` only orders the points and gets no gradient.
pub fn rasterize_graph(
    tape: &mut Tape,
    mu2d: Var,
    conic: Var,
    opacity: Var,
    color: Var,
    depth: &[f64],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RasterizeVars, KernelError> {
    let n = depth.len();
    let expect = [(mu2d, 2), (conic, 3), (opacity, 1), (color, 3)];
    for (v, k) in expect {
        let a = tape.value(v);
        if a.len() != n * k {
            return Err(KernelError::Shape {
                op: "rasterize",
                shapes: vec![a.shape().to_vec(), vec![n, k]],
            });
        }
    }
    let points = RenderablePointSet {
        mu2d: rows::<2>(tape.value(mu2d)),
        conic: rows::<3>(tape.value(conic)),
        opacity: tape.value(opacity).data().to_vec(),
        color: rows::<3>(tape.value(color)),
        depth: depth.to_vec(),
    };
    let (output, cache) = render_tiled_cached(&points, cam, settings);
    let image = Array::new(vec![cam.height, cam.width, 3], output.rgb.clone())?;
    let op = RasterizeOp {
        points,
        cache,
        background: settings.background,
        width: cam.width,
        height: cam.height,
    };
    let image = tape.custom(&[mu2d, conic, opacity, color], image, Box::new(op));
    Ok(RasterizeVars { image, output })
}
