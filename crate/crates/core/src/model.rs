//! The full differentiable forward pass: deform, mask, compose, color,
//! project and rasterize.

use crate::deform::{DeformNet, DeformVars, OffsetVars};
use crate::diffkernel::{Array, Axis, KernelError, Tape, Var};
use crate::error::Result;
use crate::gaussians::{project_graph, Camera, GaussianCloud};
use crate::hashenc::{bake_colors, HashColorField, HashVars};
use crate::mask::binary_mask_graph;
use crate::rasterizer::{rasterize_graph, RenderOutput, RenderSettings};

/// Everything that is rendered: canonical points plus the shared networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub deform: DeformNet,
    pub field: HashColorField,
}

/// Per-call switches of the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Evaluate the deformation network (false during warm-up or when ablated).
    pub deform: bool,
    pub mask_epsilon: f64,
    pub settings: RenderSettings,
    /// Precomputed base colors `[N, 3]` used instead of the hash field.
    pub baked_colors: Option<Array>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            deform: true,
            mask_epsilon: crate::mask::MASK_EPSILON,
            settings: RenderSettings::default(),
            baked_colors: None,
        }
    }
}

/// Tape handles of every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub mu: Var,
    pub rot: Var,
    pub log_scale: Var,
    pub opacity_logit: Var,
    pub mask_logit: Var,
    pub deform: Option<DeformVars>,
    pub hash: HashVars,
}

impl Model {
    /// Records every parameter on `tape`. The deformation network is only
    /// bound when `with_deform` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, with_deform: bool) -> ModelVars {
        let leaves: Vec<Var> = self
            .tensors(with_deform)
            .into_iter()
            .map(|a| if trainable { tape.param(a.clone()) } else { tape.constant(a.clone()) })
            .collect();
        self.vars_from(&leaves, with_deform)
    }

    /// Every parameter array: the five cloud fields, the deformation network
    /// when `with_deform` is set, then the hash field.
    pub fn tensors(&self, with_deform: bool) -> Vec<&Array> {
        let mut out: Vec<&Array> = self.cloud.fields().into();
        if with_deform {
            out.extend(self.deform.tensors());
        }
        out.extend(self.field.tensors());
        out
    }

    /// Handles over leaves recorded in [`Self::tensors`] order.
    pub fn vars_from(&self, leaves: &[Var], with_deform: bool) -> ModelVars {
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("cloud leaf");
        let (mu, rot, log_scale, opacity_logit, mask_logit) = (next(), next(), next(), next(), next());
        let deform = with_deform.then(|| self.deform.vars_from(&mut it));
        let hash = self.field.vars_from(&mut it);
        assert!(it.next().is_none(), "unused leaves");
        ModelVars {
            mu,
            rot,
            log_scale,
            opacity_logit,
            mask_logit,
            deform,
            hash,
        }
    }

    /// Renders without recording gradients.
    pub fn render(&self, cam: &Camera, opts: &ForwardOptions) -> Result<RenderOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, opts.deform);
        Ok(forward(&mut tape, self, &vars, cam, opts)?.output)
    }

    /// Deformed positions at `cam.time`, as the forward pass computes them.
    pub fn deformed_positions(&self, time: f64, deform: bool) -> Result<Array> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false, deform);
        let offsets = offsets(&mut tape, self, &vars, time)?;
        let pos = match offsets {
            Some(o) => tape.add(vars.mu, o.d_mu)?,
            None => vars.mu,
        };
        Ok(tape.value(pos).clone())
    }

    /// Base colors for every point at `time`, ready for
    /// [`ForwardOptions::baked_colors`].
    pub fn bake(&self, time: f64, deform: bool) -> Result<Array> {
        Ok(bake_colors(&self.deformed_positions(time, deform)?, &self.field))
    }
}

/// Nodes produced by [`forward`].
#[derive(Debug)]
pub struct ForwardPass {
    /// `[H, W, 3]` rendered image.
    pub image: Var,
    pub output: RenderOutput,
    /// Offsets of all `N` points, `None` when the network was not evaluated.
    pub offsets: Option<OffsetVars>,
    /// Binary mask `[N, 1]`.
    pub mask: Var,
    /// `M s + sg(M) d_s`, `[N, 3]`.
    pub masked_scale: Var,
    /// `M o`, `[N, 1]`.
    pub masked_opacity: Var,
    /// Screen positions `[V, 2]` of the points inside the depth range.
    pub mu2d: Option<Var>,
    /// Cloud index of each row of `mu2d`.
    pub in_range: Vec<usize>,
}

fn offsets(tape: &mut Tape, model: &Model, vars: &ModelVars, time: f64) -> Result<Option<OffsetVars>, KernelError> {
    let Some(dv) = &vars.deform else { return Ok(None) };
    let mu_sg = tape.stop_gradient(vars.mu)?;
    let enc = model.deform.encode_inputs(tape.value(mu_sg), time);
    let enc = tape.constant(enc);
    Ok(Some(dv.forward(tape, enc)?))
}

pub fn forward(tape: &mut Tape, model: &Model, vars: &ModelVars, cam: &Camera, opts: &ForwardOptions) -> Result<ForwardPass> {
    let n = model.cloud.len();
    let off = if opts.deform { offsets(tape, model, vars, cam.time)? } else { None };

    let mask = binary_mask_graph(tape, vars.mask_logit, opts.mask_epsilon)?;
    let scale = tape.exp(vars.log_scale);
    let opacity = tape.sigmoid(vars.opacity_logit);
    let (masked_scale, masked_opacity) =
        crate::mask::apply_mask_graph(tape, scale, opacity, off.map(|o| o.d_scale), mask)?;

    let (pos, rot) = match off {
        Some(o) => (tape.add(vars.mu, o.d_mu)?, tape.add(vars.rot, o.d_rot)?),
        None => (vars.mu, vars.rot),
    };
    let norm = tape.norm_l2(rot, Axis::Cols)?;
    let rot = tape.div(rot, norm)?;

    let base = match &opts.baked_colors {
        Some(c) => {
            if c.shape() != [n, 3] {
                return Err(crate::Error::SizeMismatch {
                    what: "baked colors",
                    expected: n,
                    got: c.rows(),
                });
            }
            tape.constant(c.clone())
        }
        None => {
            let pos_sg = tape.stop_gradient(pos)?;
            let lookup_at = tape.value(pos_sg).clone();
            vars.hash.base_color(tape, &model.field, &lookup_at)?
        }
    };
    let color = match off {
        Some(o) => tape.add(base, o.d_color)?,
        None => base,
    };
    let color = tape.clamp(color, 0.0, 1.0);

    let pos_values = tape.value(pos);
    let in_range: Vec<usize> = (0..n)
        .filter(|&i| {
            let r = pos_values.row(i);
            let z = cam.to_camera([r[0], r[1], r[2]])[2];
            z > cam.near && z < cam.far
        })
        .collect();

    let (image, output, mu2d) = if in_range.is_empty() {
        let output = RenderOutput::blank(cam.width, cam.height, 0, opts.settings.background);
        let image = tape.constant(Array::new(vec![cam.height, cam.width, 3], output.rgb.clone())?);
        (image, output, None)
    } else {
        let p = tape.gather_rows(pos, &in_range)?;
        let r = tape.gather_rows(rot, &in_range)?;
        let s = tape.gather_rows(masked_scale, &in_range)?;
        let o = tape.gather_rows(masked_opacity, &in_range)?;
        let c = tape.gather_rows(color, &in_range)?;
        let proj = project_graph(tape, p, r, s, cam)?;
        let ras = rasterize_graph(tape, proj.mu2d, proj.conic, o, c, &proj.depth, cam, &opts.settings)?;
        (ras.image, ras.output, Some(proj.mu2d))
    };
    Ok(ForwardPass {
        image,
        output,
        offsets: off,
        mask,
        masked_scale,
        masked_opacity,
        mu2d,
        in_range,
    })
}
