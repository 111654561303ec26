#![allow(dead_code)]

use dynsplat_core::gaussians::Camera;
use dynsplat_core::rasterizer::RenderablePointSet;
use rand::{Rng, SeedableRng};

/// Camera whose only role in screen-space tests is the image size.
pub fn screen_camera(width: usize, height: usize) -> Camera {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 0.8, width, height)
}

/// Random screen-space Gaussians around a `width` x `height` image,
/// including points whose footprint straddles the border.
pub fn random_points<R: Rng>(rng: &mut R, n: usize, width: usize, height: usize) -> RenderablePointSet {
    let mut pts = RenderablePointSet::default();
    while pts.len() < n {
        let mu = [
            rng.random_range(-6.0..width as f64 + 6.0),
            rng.random_range(-6.0..height as f64 + 6.0),
        ];
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (l1, l2): (f64, f64) = (rng.random_range(0.3..30.0), rng.random_range(0.3..30.0));
        let (c, s) = (theta.cos(), theta.sin());
        let sigma = [
            [c * c * l1 + s * s * l2, c * s * (l1 - l2)],
            [c * s * (l1 - l2), s * s * l1 + c * c * l2],
        ];
        let color = [rng.random(), rng.random(), rng.random()];
        pts.push(mu, sigma, rng.random_range(0.02..1.0), color, rng.random_range(0.5..10.0));
    }
    pts
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use dynsplat_core::deform::DeformNet;
use dynsplat_core::diffkernel::{check_gradients_multi, Array, Axis, GradCheckOptions, GradCheckReport, KernelError, Tape, Var};
use rand_chacha::ChaCha8Rng;
use dynsplat_core::hashenc::{Aabb, HashColorField, HashGridConfig};
use dynsplat_core::losses::{
    consistency_loss, denoise_loss, mask_loss, photometric_loss, static_loss, total_loss, LossVars, LossWeights,
    SlidingWindowStats, STATIC_THRESHOLD,
};
use dynsplat_core::mask::MASK_EPSILON;
use dynsplat_core::model::{forward, ForwardOptions, Model};
use dynsplat_core::rasterizer::RenderSettings;
use dynsplat_core::gaussians::GaussianCloud;
use dynsplat_core::Image;

/// Five broad, semi-transparent Gaussians seen by a `size` x `size`
/// camera, with a random target and a filled denoising window. Every pixel
/// sits well inside the smooth regime of the compositor.
pub struct AuditScene {
    pub model: Model,
    pub camera: Camera,
    pub target: Image,
    pub window: SlidingWindowStats,
}

pub fn audit_scene(size: usize, depth: usize, width: usize, seed: u64) -> AuditScene {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::empty();
    for _ in 0..5 {
        let mu = [0, 1, 2].map(|_| rng.random_range(-0.25..0.25));
        let q = [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let ls = [0, 1, 2].map(|_| rng.random_range(0.6f64..0.9).ln());
        cloud.push(mu, q, ls, rng.random_range(-0.8..0.4), rng.random_range(-1.0..3.0));
    }
    let mut deform = DeformNet::with_shape(depth, width, depth / 2, &mut rng);
    for head in deform.heads.iter_mut() {
        for v in head.weight.data_mut().iter_mut().chain(head.bias.data_mut()) {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let config = HashGridConfig {
        levels: 4,
        log2_table_size: 10,
        feat_dim: 2,
        min_resolution: 4,
        max_resolution: 32,
        decoder_width: 16,
    };
    let mut field = HashColorField::new(config, Aabb { min: [-1.0; 3], max: [1.0; 3] }, &mut rng);
    for v in field.table.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let camera = Camera::look_at([0.3, -0.4, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 0.4, size, size).with_time(0.3);
    let target = Image::new(size, size, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let mut window = SlidingWindowStats::new(4, 1);
    for it in 0..4 {
        let s = Array::new(vec![5, 3], (0..15).map(|_| rng.random_range(0.1..0.5)).collect()).unwrap();
        let o = Array::new(vec![5, 1], (0..5).map(|_| rng.random_range(0.05..0.2)).collect()).unwrap();
        window.observe(it, &s, &o);
    }
    AuditScene {
        model: Model { cloud, deform, field },
        camera,
        target,
        window,
    }
}

/// Photometric, mask, denoising, static and consistency terms on top of the
/// full forward pass, all active.
pub fn pipeline_loss(tape: &mut Tape, leaves: &[Var], scene: &AuditScene, lambda: f64) -> Result<Var, dynsplat_core::diffkernel::KernelError> {
    let model = &scene.model;
    let vars = model.vars_from(leaves, true);
    let opts = ForwardOptions {
        deform: true,
        mask_epsilon: MASK_EPSILON,
        settings: RenderSettings {
            background: [0.1, 0.2, 0.3],
            tile_size: 4,
        },
        baked_colors: None,
    };
    let fp = forward(tape, model, &vars, &scene.camera, &opts).expect("forward");
    let photo = if lambda > 0.0 {
        photometric_loss(tape, fp.image, &scene.target, lambda).expect("photometric").loss
    } else {
        let t = tape.constant(Array::new(vec![scene.target.height, scene.target.width, 3], scene.target.data.clone())?);
        let d = tape.sub(fp.image, t)?;
        let d = tape.abs(d);
        tape.mean(d, dynsplat_core::diffkernel::Axis::All)?
    };
    let off = fp.offsets.expect("deformation is on");
    let terms = LossVars {
        photometric: Some(photo),
        mask: Some(mask_loss(tape, vars.mask_logit)?),
        static_: static_loss(tape, off.d_mu, STATIC_THRESHOLD)?,
        consistency: consistency_loss(tape, off.d_mu)?,
        denoise: denoise_loss(tape, fp.masked_scale, fp.masked_opacity, &scene.window).expect("window"),
    };
    // Unit weights so every term moves the audit.
    let weights = LossWeights {
        w_dn: 1.0,
        w_s: 1.0,
        w_con: 1.0,
        w_m: 1.0,
        lambda_dssim: lambda,
        constraints_from: 0,
        denoise_from: 0,
    };
    total_loss(tape, &terms, &weights, 0)
}

/// Central-difference audit of [`pipeline_loss`] over every parameter
/// array, with at most `coords` probes per array.
pub fn pipeline_audit(scene: &AuditScene, lambda: f64, coords: Option<usize>) -> GradCheckReport {
    let inputs: Vec<Array> = scene.model.tensors(true).into_iter().cloned().collect();
    check_gradients_multi(
        |t: &mut Tape, v| pipeline_loss(t, v, scene, lambda),
        &inputs,
        &GradCheckOptions {
            h: 1e-5,
            max_coords: coords,
            seed: 1,
        },
    )
    .expect("audit")
}


pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub type Prim = fn(&mut Tape, Var) -> Result<Var, KernelError>;

/// Every primitive wrapped into a scalar function of one 3x4 input, with a
/// domain where it is smooth.
pub fn primitives() -> Vec<(&'static str, Prim, f64, f64)> {
    fn weigh(t: &mut Tape, y: Var) -> Result<Var, KernelError> {
        // Weighted sum so that every output coordinate gets a distinct adjoint.
        let n = t.value(y).len();
        let shape = t.value(y).shape().to_vec();
        let w = t.constant(Array::new(shape, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap());
        let p = t.mul(y, w)?;
        t.sum(p, Axis::All)
    }
    vec![
        ("add", |t, x| { let c = t.constant(Array::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()); let y = t.add(x, c)?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("sub", |t, x| { let c = t.constant(Array::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap()); let y = t.sub(c, x)?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("mul", |t, x| { let y = t.mul(x, x)?; weigh(t, y) }, -2.0, 2.0),
        ("div", |t, x| { let c = t.scalar(1.5); let y = t.div(c, x)?; weigh(t, y) }, 0.5, 2.0),
        ("matmul", |t, x| { let xt = t.constant(Array::new(vec![4, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8]).unwrap()); let y = t.matmul(x, xt)?; let y = t.mul(y, y)?; weigh(t, y) }, -1.0, 1.0),
        ("matmul_rhs", |t, x| { let a = t.constant(Array::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap()); let y = t.matmul(a, x)?; let y = t.mul(y, y)?; weigh(t, y) }, -1.0, 1.0),
        ("sin", |t, x| { let y = t.sin(x); weigh(t, y) }, -3.0, 3.0),
        ("cos", |t, x| { let y = t.cos(x); weigh(t, y) }, -3.0, 3.0),
        ("exp", |t, x| { let y = t.exp(x); weigh(t, y) }, -2.0, 2.0),
        ("log", |t, x| { let y = t.log(x); weigh(t, y) }, 0.2, 3.0),
        ("sqrt", |t, x| { let y = t.sqrt(x); weigh(t, y) }, 0.2, 3.0),
        ("sigmoid", |t, x| { let y = t.sigmoid(x); weigh(t, y) }, -4.0, 4.0),
        ("relu", |t, x| { let y = t.relu(x); let y = t.mul(y, y)?; weigh(t, y) }, 0.05, 2.0),
        ("abs", |t, x| { let y = t.abs(x); weigh(t, y) }, 0.05, 2.0),
        ("clamp", |t, x| { let y = t.clamp(x, -10.0, 10.0); let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("sum_rows", |t, x| { let y = t.sum(x, Axis::Rows)?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("mean_cols", |t, x| { let y = t.mean(x, Axis::Cols)?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("norm_l1", |t, x| { let y = t.norm_l1(x, Axis::Cols)?; let y = t.mul(y, y)?; weigh(t, y) }, 0.05, 2.0),
        ("norm_l2", |t, x| { let y = t.norm_l2(x, Axis::Cols)?; weigh(t, y) }, -2.0, 2.0),
        ("concat", |t, x| { let y = t.concat(&[x, x])?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("gather", |t, x| { let y = t.gather(x, vec![0, 5, 5, 11, 3], &[5])?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
        ("stop_gradient", |t, x| { let s = t.stop_gradient(x)?; let y = t.mul(x, s)?; weigh(t, y) }, -2.0, 2.0),
        ("reshape", |t, x| { let y = t.reshape(x, &[2, 6])?; let y = t.mul(y, y)?; weigh(t, y) }, -2.0, 2.0),
    ]
}

