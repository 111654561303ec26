//! Optimization loop: Adam with per-group schedules, loss gating and
//! adaptive densification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::Frame;
use crate::deform::DeformNet;
use crate::diffkernel::{sigmoid, Array, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussians::{quat_to_rotation, Camera, GaussianCloud};
use crate::hashenc::{Aabb, HashColorField, HashGridConfig};
use crate::image::Image;
use crate::losses::{
    consistency_loss, denoise_loss, mask_loss, photometric_loss, static_loss, total_loss, LossRecord, LossVars,
    LossWeights, SlidingWindowStats, STATIC_THRESHOLD,
};
use crate::mask::{prune_masked, IndexRemap, MASK_INIT_LOGIT};
use crate::model::{forward, ForwardOptions, Model};
use crate::rasterizer::RenderSettings;

/// Exponential decay from `start` to `end` over a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub const fn constant(lr: f64) -> Self {
        Self { start: lr, end: lr }
    }

    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        lr_at(iteration, self.start, self.end, total)
    }
}

/// `start * (end / start)^(iteration / total)`; iterations past `total` hold `end`.
pub fn lr_at(iteration: usize, start: f64, end: f64, total: usize) -> f64 {
    if total == 0 || start == end {
        return end;
    }
    let frac = iteration.min(total) as f64 / total as f64;
    start * (end / start).powf(frac)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub deform: LrSchedule,
    /// Hash table and decoder.
    pub hash: LrSchedule,
    /// Multiplied by the scene extent.
    pub position: LrSchedule,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub mask: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            deform: LrSchedule { start: 8e-4, end: 1.6e-6 },
            hash: LrSchedule { start: 8e-4, end: 3.2e-4 },
            position: LrSchedule { start: 1.6e-4, end: 1.6e-6 },
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            mask: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_iters: usize,
    pub warmup_iters: usize,
    /// Train the deformation network after warm-up. `false` gives a static model.
    pub deform: bool,
    pub deform_depth: usize,
    pub deform_width: usize,
    pub deform_skip: usize,
    pub hash: HashGridConfig,
    pub lr: LearningRates,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossWeights,
    pub static_constraint: bool,
    pub consistency_constraint: bool,
    pub window_capacity: usize,
    pub window_stride: usize,
    pub mask_epsilon: f64,
    pub mask_prune_from: usize,
    pub mask_prune_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    /// Points with max scale above this fraction of the extent are split, others cloned.
    pub percent_dense: f64,
    pub opacity_reset_interval: usize,
    pub prune_opacity: f64,
    pub max_points: usize,
    /// Random initial points when no seed points are given.
    pub init_points: usize,
    /// Initial scale of an isolated seed point, as a fraction of the extent.
    pub init_scale_fallback: f64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-length schedule.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            total_iters: 40_000,
            warmup_iters: 1500,
            deform: true,
            deform_depth: DeformNet::DEPTH,
            deform_width: DeformNet::WIDTH,
            deform_skip: DeformNet::SKIP,
            hash: HashGridConfig::PAPER,
            lr: LearningRates::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            loss: LossWeights::default(),
            static_constraint: true,
            consistency_constraint: true,
            window_capacity: 50,
            window_stride: 10,
            mask_epsilon: crate::mask::MASK_EPSILON,
            mask_prune_from: 5000,
            mask_prune_interval: 1000,
            densify_from: 500,
            densify_until: 15_000,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            percent_dense: 0.01,
            opacity_reset_interval: 3000,
            prune_opacity: 0.005,
            max_points: 200_000,
            init_points: 10_000,
            init_scale_fallback: 0.01,
            background: [0.0; 3],
        }
    }

    /// 5000 iterations with every milestone divided by 8, a 2^15 hash
    /// table and a point budget sized for 64x64 toy scenes.
    pub fn desk() -> Self {
        let p = Self::paper();
        let div = |v: usize| (v + 4) / 8;
        Self {
            total_iters: 5000,
            warmup_iters: div(p.warmup_iters),
            hash: HashGridConfig::DESK,
            loss: LossWeights {
                constraints_from: div(p.loss.constraints_from),
                denoise_from: div(p.loss.denoise_from),
                ..p.loss
            },
            mask_prune_from: div(p.mask_prune_from),
            mask_prune_interval: div(p.mask_prune_interval),
            densify_from: div(p.densify_from),
            densify_until: div(p.densify_until),
            densify_interval: 50,
            opacity_reset_interval: div(p.opacity_reset_interval),
            max_points: 600,
            init_points: 200,
            ..p
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" | "toy" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.loss.constraints_from;
        let d = self.loss.denoise_from;
        if !(self.warmup_iters < c && c < d) {
            return Err(Error::Config(format!(
                "need warmup_iters < constraints_from < denoise_from, got {} / {c} / {d}",
                self.warmup_iters
            )));
        }
        if self.deform_skip >= self.deform_depth || self.deform_width == 0 {
            return Err(Error::Config("deform network needs width > 0 and skip < depth".into()));
        }
        if self.hash.levels == 0 || self.hash.min_resolution == 0 || self.hash.max_resolution < self.hash.min_resolution {
            return Err(Error::Config("hash grid needs levels > 0 and 0 < min_resolution <= max_resolution".into()));
        }
        if self.hash.log2_table_size == 0 || self.hash.log2_table_size > 24 {
            return Err(Error::Config("hash log2_table_size must be in 1..=24".into()));
        }
        let rates = [self.lr.opacity, self.lr.scale, self.lr.rotation, self.lr.mask];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.densify_interval == 0 || self.mask_prune_interval == 0 || self.opacity_reset_interval == 0 || self.window_stride == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Row-wise remap for per-point tensors of width `w`; fresh rows start at zero.
    fn remap(&mut self, remap: &IndexRemap, w: usize) {
        let pick = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(remap.len() * w);
            for (&s, &fresh) in remap.source.iter().zip(&remap.fresh) {
                if fresh {
                    out.extend(std::iter::repeat_n(0.0, w));
                } else {
                    out.extend_from_slice(&src[s * w..(s + 1) * w]);
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// One Adam parameter group with a shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub step: u64,
    pub tensors: Vec<Moments>,
}

/// Group order: position, rotation, scale, opacity, mask, deform, hash.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub groups: Vec<ParamGroup>,
}

pub const GROUP_NAMES: [&str; 7] = ["position", "rotation", "scale", "opacity", "mask", "deform", "hash"];
const POINT_WIDTHS: [usize; 5] = [3, 4, 3, 1, 1];

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let n = model.cloud.len();
        let mut groups: Vec<ParamGroup> = POINT_WIDTHS
            .iter()
            .zip(GROUP_NAMES)
            .map(|(&w, name)| ParamGroup {
                name: name.into(),
                step: 0,
                tensors: vec![Moments::zeros(n * w)],
            })
            .collect();
        groups.push(ParamGroup {
            name: GROUP_NAMES[5].into(),
            step: 0,
            tensors: model.deform.layers().flat_map(|l| [l.weight.len(), l.bias.len()]).map(Moments::zeros).collect(),
        });
        let mut hash = vec![Moments::zeros(model.field.table.len())];
        hash.extend(model.field.decoder.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).map(Moments::zeros));
        groups.push(ParamGroup {
            name: GROUP_NAMES[6].into(),
            step: 0,
            tensors: hash,
        });
        Self { groups }
    }

    pub fn remap_points(&mut self, remap: &IndexRemap) {
        for (g, &w) in self.groups.iter_mut().zip(&POINT_WIDTHS) {
            g.tensors[0].remap(remap, w);
        }
    }
}

/// In-place Adam update with bias correction at step `t` (1-based).
pub fn adam_update(param: &mut [f64], grad: &[f64], mom: &mut Moments, t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Accumulated screen-space gradient statistics for densification.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyStats {
    pub grad_norm_sum: Vec<f64>,
    pub count: Vec<u32>,
    /// Accumulated world-space position gradient, used as the clone direction.
    pub mu_grad_sum: Vec<[f64; 3]>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; n],
            count: vec![0; n],
            mu_grad_sum: vec![[0.0; 3]; n],
        }
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_norm_sum[i] / self.count[i] as f64
        }
    }
}

/// Scene radius used to scale position learning rates and the split threshold.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let n = cameras.len() as f64;
    let mut mean = [0.0; 3];
    for c in cameras {
        let p = c.center();
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let r = cameras
        .iter()
        .map(|c| {
            let p = c.center();
            ((p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2) + (p[2] - mean[2]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Independent deterministic random stream.
pub(crate) fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_DENSIFY: u64 = 3;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Canonical cloud from seed points or `random` uniform samples in `aabb`.
///
/// Scales start isotropic at the mean distance to the three nearest
/// neighbours, opacities at 0.1 and masks on.
pub fn init_scene<R: Rng + ?Sized>(
    seed_points: Option<&Array>,
    random: usize,
    aabb: &Aabb,
    fallback_scale: f64,
    rng: &mut R,
) -> Result<GaussianCloud> {
    let points: Vec<[f64; 3]> = match seed_points {
        Some(p) if p.rows() > 0 => (0..p.rows()).map(|i| [p.row(i)[0], p.row(i)[1], p.row(i)[2]]).collect(),
        _ if random > 0 => (0..random)
            .map(|_| [0, 1, 2].map(|k| rng.random_range(aabb.min[k]..=aabb.max[k])))
            .collect(),
        _ => return Err(Error::NoSeedPoints),
    };
    let mut cloud = GaussianCloud::empty();
    let o = logit(0.1);
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .collect();
        let s = if d.is_empty() {
            fallback_scale
        } else {
            let k = d.len().min(3);
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mut near = d[..k].to_vec();
            near.sort_by(f64::total_cmp);
            (near.iter().sum::<f64>() / k as f64).max(1e-7)
        };
        cloud.push(*p, [1.0, 0.0, 0.0, 0.0], [s.ln(); 3], o, MASK_INIT_LOGIT);
    }
    Ok(cloud)
}

/// Full optimization state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Completed iterations.
    pub iteration: usize,
    pub extent: f64,
    pub window: SlidingWindowStats,
    pub densify: DensifyStats,
    /// Human-readable notes about capped or skipped structural updates.
    pub events: Vec<String>,
    /// Stable identity of every point; clones and split children get new ids.
    pub point_ids: Vec<u64>,
    pub next_point_id: u64,
}

impl Trainer {
    /// Fresh networks around `cloud`; the hash grid covers `aabb`.
    pub fn new(config: TrainConfig, cloud: GaussianCloud, aabb: Aabb, extent: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT, 0);
        let deform = DeformNet::with_shape(config.deform_depth, config.deform_width, config.deform_skip, &mut rng);
        let field = HashColorField::new(config.hash, aabb, &mut rng);
        let model = Model { cloud, deform, field };
        Ok(Self::resume(config, model, None, 0, extent))
    }

    /// Initializes the cloud from the frames and optional seed points.
    pub fn from_frames(config: TrainConfig, frames: &[Frame], seed_points: Option<&Array>, aabb: Option<Aabb>) -> Result<Self> {
        let cams: Vec<Camera> = frames.iter().map(|f| f.camera.clone()).collect();
        let extent = scene_extent(&cams);
        let box_ = match (aabb, seed_points) {
            (Some(b), _) => b,
            (None, Some(p)) if p.rows() > 0 => Aabb::around(p, 0.1),
            _ => {
                let r = extent / 1.1 * 0.5;
                Aabb { min: [-r; 3], max: [r; 3] }
            }
        };
        let mut rng = stream_rng(config.seed, STREAM_INIT, 1);
        let cloud = init_scene(seed_points, config.init_points, &box_, config.init_scale_fallback * extent, &mut rng)?;
        let field_box = Aabb::around(&cloud.mu, 0.1);
        Self::new(config, cloud, field_box, extent)
    }

    /// Rebuilds a trainer from saved parts.
    pub fn resume(config: TrainConfig, model: Model, optimizer: Option<OptimizerState>, iteration: usize, extent: f64) -> Self {
        let n = model.cloud.len();
        let optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(&model));
        Self {
            window: SlidingWindowStats::new(config.window_capacity, config.window_stride),
            densify: DensifyStats::new(n),
            config,
            model,
            optimizer,
            iteration,
            extent,
            events: Vec::new(),
            point_ids: (0..n as u64).collect(),
            next_point_id: n as u64,
        }
    }

    pub fn deform_active(&self) -> bool {
        self.config.deform && self.iteration >= self.config.warmup_iters
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            deform: self.deform_active(),
            mask_epsilon: self.config.mask_epsilon,
            settings: RenderSettings {
                background: self.config.background,
                ..RenderSettings::default()
            },
            baked_colors: None,
        }
    }

    /// Frame index used at `iteration`: frames are visited once per epoch in
    /// an order shuffled by the run seed.
    pub fn frame_index(&self, iteration: usize, frame_count: usize) -> usize {
        let epoch = (iteration / frame_count) as u64;
        let mut order: Vec<usize> = (0..frame_count).collect();
        let mut rng = stream_rng(self.config.seed, STREAM_ORDER, epoch);
        for i in (1..frame_count).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order[iteration % frame_count]
    }

    /// One iteration on the scheduled frame.
    pub fn step(&mut self, frames: &[Frame]) -> Result<LossRecord> {
        if frames.is_empty() {
            return Err(Error::Config("no training frames".into()));
        }
        let k = self.frame_index(self.iteration, frames.len());
        self.step_on(&frames[k].camera, &frames[k].image)
    }

    /// One iteration on a given view: forward, losses, backward, Adam, then
    /// the scheduled structural updates.
    pub fn step_on(&mut self, camera: &Camera, target: &Image) -> Result<LossRecord> {
        let it = self.iteration;
        let opts = self.forward_options();
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true, opts.deform);
        let fp = forward(&mut tape, &self.model, &vars, camera, &opts)?;

        let cfg = &self.config;
        let photo = photometric_loss(&mut tape, fp.image, target, cfg.loss.lambda_dssim)?;
        let mut terms = LossVars {
            photometric: Some(photo.loss),
            mask: Some(mask_loss(&mut tape, vars.mask_logit)?),
            ..LossVars::default()
        };
        if cfg.loss.constraints_active(it) {
            if let Some(off) = fp.offsets {
                if cfg.static_constraint {
                    terms.static_ = static_loss(&mut tape, off.d_mu, STATIC_THRESHOLD)?;
                }
                if cfg.consistency_constraint {
                    terms.consistency = consistency_loss(&mut tape, off.d_mu)?;
                }
            }
        }
        if cfg.loss.denoise_active(it) {
            terms.denoise = denoise_loss(&mut tape, fp.masked_scale, fp.masked_opacity, &self.window)?;
        }
        let total = total_loss(&mut tape, &terms, &cfg.loss, it)?;
        let value = |v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
        let record = LossRecord {
            iteration: it,
            l1: tape.value(photo.l1).item(),
            ssim: tape.value(photo.ssim).item(),
            photometric: value(terms.photometric),
            denoise: value(terms.denoise),
            mask: value(terms.mask),
            static_: value(terms.static_),
            consistency: value(terms.consistency),
            total: tape.value(total).item(),
            points: self.model.cloud.len(),
        };
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                terms: format!("{record:?}"),
            });
        }

        let mut grads = tape.backward(total)?;
        self.accumulate_densify_stats(&mut grads, &fp, &vars, camera);
        let masked_scale = tape.value(fp.masked_scale).clone();
        let masked_opacity = tape.value(fp.masked_opacity).clone();
        self.apply_gradients(&mut grads, &vars);
        self.window.observe(it, &masked_scale, &masked_opacity);

        self.iteration += 1;
        self.scheduled_updates()?;
        Ok(record)
    }

    fn accumulate_densify_stats(&mut self, grads: &mut Gradients, fp: &crate::model::ForwardPass, vars: &crate::model::ModelVars, cam: &Camera) {
        let Some(mu2d) = fp.mu2d else { return };
        let Some(g2) = grads.get(mu2d) else { return };
        let g3 = grads.get(vars.mu);
        let (hw, hh) = (0.5 * cam.width as f64, 0.5 * cam.height as f64);
        for (k, &i) in fp.in_range.iter().enumerate() {
            if !fp.output.visible[k] {
                continue;
            }
            let g = g2.row(k);
            // Gradient with respect to normalized device coordinates.
            let norm = ((g[0] * hw).powi(2) + (g[1] * hh).powi(2)).sqrt();
            self.densify.grad_norm_sum[i] += norm;
            self.densify.count[i] += 1;
            if let Some(g3) = g3 {
                let r = g3.row(i);
                for a in 0..3 {
                    self.densify.mu_grad_sum[i][a] += r[a];
                }
            }
        }
    }

    fn apply_gradients(&mut self, grads: &mut Gradients, vars: &crate::model::ModelVars) {
        let cfg = &self.config;
        let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let it = self.iteration;
        let total = cfg.total_iters;
        let point_lrs = [
            cfg.lr.position.at(it, total) * self.extent,
            cfg.lr.rotation,
            cfg.lr.scale,
            cfg.lr.opacity,
            cfg.lr.mask,
        ];
        let point_vars = [vars.mu, vars.rot, vars.log_scale, vars.opacity_logit, vars.mask_logit];
        let fields = self.model.cloud.fields_mut();
        for (((field, var), lr), group) in fields.into_iter().zip(point_vars).zip(point_lrs).zip(&mut self.optimizer.groups) {
            group.step += 1;
            if let Some(g) = grads.take(var) {
                adam_update(field.data_mut(), g.data(), &mut group.tensors[0], group.step, lr, b1, b2, eps);
            }
        }

        if let Some(dv) = &vars.deform {
            let group = &mut self.optimizer.groups[5];
            group.step += 1;
            let lr = cfg.lr.deform.at(it, total);
            let tensors = self.model.deform.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias]);
            for ((param, var), mom) in tensors.zip(dv.all()).zip(&mut group.tensors) {
                if let Some(g) = grads.take(var) {
                    adam_update(param.data_mut(), g.data(), mom, group.step, lr, b1, b2, eps);
                }
            }
        }

        let group = &mut self.optimizer.groups[6];
        group.step += 1;
        let lr = cfg.lr.hash.at(it, total);
        let field = &mut self.model.field;
        let tensors = std::iter::once(&mut field.table).chain(field.decoder.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]));
        for ((param, var), mom) in tensors.zip(vars.hash.all()).zip(&mut group.tensors) {
            if let Some(g) = grads.take(var) {
                adam_update(param.data_mut(), g.data(), mom, group.step, lr, b1, b2, eps);
            }
        }
    }

    /// Densification, opacity reset and mask pruning due after the iteration
    /// that just completed.
    fn scheduled_updates(&mut self) -> Result<()> {
        let it = self.iteration;
        let cfg = self.config.clone();
        if it < cfg.densify_until {
            if it > cfg.densify_from && it % cfg.densify_interval == 0 {
                self.densify_and_prune()?;
            }
            if it % cfg.opacity_reset_interval == 0 {
                self.reset_opacity();
            }
        }
        if it >= cfg.mask_prune_from && (it - cfg.mask_prune_from) % cfg.mask_prune_interval == 0 {
            self.prune_masked()?;
        }
        Ok(())
    }

    /// Applies a structural change to every per-point array.
    pub fn apply_remap(&mut self, cloud: GaussianCloud, remap: &IndexRemap) {
        self.point_ids = remap
            .source
            .iter()
            .zip(&remap.fresh)
            .map(|(&s, &fresh)| {
                if fresh {
                    self.next_point_id += 1;
                    self.next_point_id - 1
                } else {
                    self.point_ids[s]
                }
            })
            .collect();
        self.model.cloud = cloud;
        self.optimizer.remap_points(remap);
        self.window.remap(remap);
        self.densify = DensifyStats::new(self.model.cloud.len());
    }

    /// Appends `extra` with fresh optimizer moments and returns the new ids.
    /// The window history is cleared since the new points have none.
    pub fn insert_points(&mut self, extra: &GaussianCloud) -> Result<Vec<u64>> {
        let n = self.model.cloud.len();
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut next = self.model.cloud.clone();
        for (dst, src) in next.fields_mut().into_iter().zip(extra.fields()) {
            dst.append_rows(src)?;
        }
        let mut remap = IndexRemap::identity(n);
        remap.source.extend(std::iter::repeat_n(0, extra.len()));
        remap.fresh.extend(std::iter::repeat_n(true, extra.len()));
        let first = self.next_point_id;
        self.apply_remap(next, &remap);
        self.window.clear();
        Ok((first..self.next_point_id).collect())
    }

    /// Physically removes points whose binary mask is 0.
    pub fn prune_masked(&mut self) -> Result<usize> {
        let before = self.model.cloud.len();
        let (cloud, remap) = prune_masked(&self.model.cloud, self.config.mask_epsilon)?;
        if cloud.len() != before {
            self.apply_remap(cloud, &remap);
        }
        Ok(before - self.model.cloud.len())
    }

    /// Caps every opacity at 0.01 and clears the opacity moments.
    pub fn reset_opacity(&mut self) {
        let cap = logit(0.01);
        for v in self.model.cloud.opacity_logit.data_mut() {
            *v = v.min(cap);
        }
        let mom = &mut self.optimizer.groups[3].tensors[0];
        mom.m.iter_mut().for_each(|v| *v = 0.0);
        mom.v.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Clones small and splits large high-gradient points, then drops
    /// near-transparent ones.
    pub fn densify_and_prune(&mut self) -> Result<()> {
        let cfg = &self.config;
        let cloud = &self.model.cloud;
        let n = cloud.len();
        let limit = cfg.percent_dense * self.extent;
        let mut clones = Vec::new();
        let mut splits = Vec::new();
        for i in 0..n {
            if self.densify.average(i) < cfg.densify_grad_threshold {
                continue;
            }
            let s = cloud.scale(i);
            if s.iter().cloned().fold(f64::MIN, f64::max) > limit {
                splits.push(i);
            } else {
                clones.push(i);
            }
        }
        let grown = n + clones.len() + splits.len();
        let (clones, splits) = if grown > cfg.max_points {
            self.events.push(format!(
                "iteration {}: densification skipped, {} points would exceed the cap of {}",
                self.iteration, grown, cfg.max_points
            ));
            (Vec::new(), Vec::new())
        } else {
            (clones, splits)
        };

        let mut rng = stream_rng(cfg.seed, STREAM_DENSIFY, self.iteration as u64);
        let mut source: Vec<usize> = (0..n).filter(|i| splits.binary_search(i).is_err()).collect();
        let mut fresh = vec![false; source.len()];
        let mut extra = GaussianCloud::empty();
        for &i in &clones {
            let s = cloud.scale(i);
            let s_max = s.iter().cloned().fold(f64::MIN, f64::max);
            let g = self.densify.mu_grad_sum[i];
            let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let p = cloud.position(i);
            let mu = if gn > 0.0 {
                [0, 1, 2].map(|k| p[k] - 0.5 * s_max * g[k] / gn)
            } else {
                p
            };
            push_copy(&mut extra, cloud, i, mu, cloud.log_scale.row(i));
            source.push(i);
            fresh.push(true);
        }
        for &i in &splits {
            let s = cloud.scale(i);
            let r = quat_to_rotation(cloud.quaternion(i))?;
            let p = cloud.position(i);
            let child_scale = s.map(|v| (v / 1.6).ln());
            for _ in 0..2 {
                let z: [f64; 3] = [0, 1, 2].map(|k| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e * s[k]
                });
                let mu = [0, 1, 2].map(|a| p[a] + r[a][0] * z[0] + r[a][1] * z[1] + r[a][2] * z[2]);
                push_copy(&mut extra, cloud, i, mu, &child_scale);
                source.push(i);
                fresh.push(true);
            }
        }
        let kept = source.len() - extra.len();
        let mut next = cloud.select(&source[..kept]);
        for (dst, src) in next.fields_mut().into_iter().zip(extra.fields()) {
            dst.append_rows(src)?;
        }

        let alive: Vec<usize> = (0..next.len()).filter(|&k| next.opacity(k) >= cfg.prune_opacity).collect();
        if alive.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let next = next.select(&alive);
        let remap = IndexRemap {
            source: alive.iter().map(|&k| source[k]).collect(),
            fresh: alive.iter().map(|&k| fresh[k]).collect(),
        };
        self.apply_remap(next, &remap);
        Ok(())
    }

    /// Runs until `iterations` more steps are done, calling `log` after each.
    pub fn train(&mut self, frames: &[Frame], iterations: usize, mut log: impl FnMut(&Trainer, &LossRecord)) -> Result<()> {
        for _ in 0..iterations {
            let rec = self.step(frames)?;
            log(self, &rec);
        }
        Ok(())
    }

    /// Mask fraction that is currently on.
    pub fn active_mask_fraction(&self) -> f64 {
        let n = self.model.cloud.len().max(1);
        let on = self
            .model
            .cloud
            .mask_logit
            .data()
            .iter()
            .filter(|&&m| sigmoid(m) > self.config.mask_epsilon)
            .count();
        on as f64 / n as f64
    }
}

fn push_copy(dst: &mut GaussianCloud, src: &GaussianCloud, i: usize, mu: [f64; 3], log_scale: &[f64]) {
    dst.push(
        mu,
        src.quaternion(i),
        [log_scale[0], log_scale[1], log_scale[2]],
        src.opacity_logit.data()[i],
        src.mask_logit.data()[i],
    );
}
