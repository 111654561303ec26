//! Training objectives and their schedule.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::diffkernel::{Array, Axis, CustomOp, KernelError, Tape, Var};
use crate::error::Result;
use crate::image::Image;
use crate::mask::IndexRemap;
use crate::metrics::{ssim_and_grad, ssim_check_size};

pub const STATIC_THRESHOLD: f64 = 0.1;
pub const STATIC_DELTA: f64 = 1e-8;

/// Term weights and activation iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_dn: f64,
    pub w_s: f64,
    pub w_con: f64,
    pub w_m: f64,
    pub lambda_dssim: f64,
    /// First iteration at which the static and consistency terms count.
    pub constraints_from: usize,
    /// First iteration at which the denoising term counts.
    pub denoise_from: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_dn: 1e-2,
            w_s: 1e-3,
            w_con: 1e-3,
            w_m: 5e-4,
            lambda_dssim: 0.2,
            constraints_from: 3000,
            denoise_from: 5000,
        }
    }
}

impl LossWeights {
    pub fn constraints_active(&self, iteration: usize) -> bool {
        iteration >= self.constraints_from
    }

    pub fn denoise_active(&self, iteration: usize) -> bool {
        iteration >= self.denoise_from
    }
}

struct SsimOp {
    target: Vec<f64>,
    width: usize,
    height: usize,
}

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn vjp(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (_, mut g) = ssim_and_grad(inputs[0].data(), &self.target, self.width, self.height, true);
        let s = grad.item();
        for v in &mut g {
            *v *= s;
        }
        vec![Some(Array::new(inputs[0].shape().to_vec(), g).expect("ssim adjoint shape"))]
    }
}

/// Scalar SSIM node of a rendered `[H, W, 3]` image against a fixed target.
pub fn ssim_graph(tape: &mut Tape, rendered: Var, target: &Image) -> Result<Var> {
    let shape = tape.value(rendered).shape().to_vec();
    if shape != [target.height, target.width, 3] {
        return Err(crate::Error::ImageShape(
            (shape.get(1).copied().unwrap_or(0), shape.first().copied().unwrap_or(0)),
            target.dims(),
        ));
    }
    ssim_check_size(target.width, target.height)?;
    let (s, _) = ssim_and_grad(tape.value(rendered).data(), &target.data, target.width, target.height, false);
    let op = SsimOp {
        target: target.data.clone(),
        width: target.width,
        height: target.height,
    };
    Ok(tape.custom(&[rendered], Array::scalar(s), Box::new(op)))
}

/// Photometric terms kept for logging.
#[derive(Clone, Copy, Debug)]
pub struct PhotometricVars {
    pub l1: Var,
    pub ssim: Var,
    pub loss: Var,
}

/// `(1 - lambda) L1 + lambda (1 - SSIM) / 2`.
pub fn photometric_loss(tape: &mut Tape, rendered: Var, target: &Image, lambda: f64) -> Result<PhotometricVars> {
    let ssim = ssim_graph(tape, rendered, target)?;
    let t = tape.constant(Array::new(vec![target.height, target.width, 3], target.data.clone())?);
    let flat_r = tape.reshape(rendered, &[target.height * target.width, 3])?;
    let flat_t = tape.reshape(t, &[target.height * target.width, 3])?;
    let d = tape.sub(flat_r, flat_t)?;
    let d = tape.abs(d);
    let l1 = tape.mean(d, Axis::All)?;
    let a = tape.scale(l1, 1.0 - lambda);
    let dssim = tape.neg(ssim);
    let dssim = tape.add_scalar(dssim, 1.0);
    let dssim = tape.scale(dssim, 0.5 * lambda);
    let loss = tape.add(a, dssim)?;
    Ok(PhotometricVars { l1, ssim, loss })
}

/// History of post-mask scales and opacities.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindowStats {
    pub capacity: usize,
    pub stride: usize,
    /// `(scale [N, 3], opacity [N, 1])`, oldest first.
    pub snapshots: VecDeque<(Array, Array)>,
}

impl SlidingWindowStats {
    pub fn new(capacity: usize, stride: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            stride: stride.max(1),
            snapshots: VecDeque::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    /// Records a snapshot on stride iterations, evicting the oldest when full.
    pub fn observe(&mut self, iteration: usize, scale: &Array, opacity: &Array) {
        if iteration % self.stride != 0 {
            return;
        }
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back((scale.clone(), opacity.clone()));
    }

    /// Arithmetic means `(E(s), E(o))` over the stored snapshots.
    pub fn expectation(&self) -> Option<(Array, Array)> {
        let (first_s, first_o) = self.snapshots.front()?;
        let mut s = Array::zeros(first_s.shape());
        let mut o = Array::zeros(first_o.shape());
        for (ss, oo) in &self.snapshots {
            s.add_assign(ss);
            o.add_assign(oo);
        }
        let k = 1.0 / self.snapshots.len() as f64;
        Some((s.map(|v| v * k), o.map(|v| v * k)))
    }

    /// Follows a structural change of the cloud; new points inherit the
    /// history of the point they were derived from.
    pub fn remap(&mut self, remap: &IndexRemap) {
        for (s, o) in &mut self.snapshots {
            *s = s.select_rows(&remap.source);
            *o = o.select_rows(&remap.source);
        }
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
    }
}

/// `mean_i |E(s_i) - s_i|_1 + mean_i |E(o_i) - o_i|`; `None` for an empty window.
pub fn denoise_loss(tape: &mut Tape, masked_scale: Var, masked_opacity: Var, stats: &SlidingWindowStats) -> Result<Option<Var>> {
    let Some((es, eo)) = stats.expectation() else {
        return Ok(None);
    };
    let n = tape.value(masked_scale).rows();
    if es.rows() != n || eo.rows() != n {
        return Err(crate::Error::SizeMismatch {
            what: "sliding window",
            expected: n,
            got: es.rows(),
        });
    }
    let es = tape.constant(es);
    let es = tape.stop_gradient(es)?;
    let eo = tape.constant(eo);
    let eo = tape.stop_gradient(eo)?;
    let ds = tape.sub(es, masked_scale)?;
    let ds = tape.norm_l1(ds, Axis::Cols)?;
    let ds = tape.mean(ds, Axis::All)?;
    let dop = tape.sub(eo, masked_opacity)?;
    let dop = tape.abs(dop);
    let dop = tape.mean(dop, Axis::All)?;
    Ok(Some(tape.add(ds, dop)?))
}

/// Mean sigmoid of the mask logits.
pub fn mask_loss(tape: &mut Tape, logits: Var) -> Result<Var, KernelError> {
    let s = tape.sigmoid(logits);
    tape.mean(s, Axis::All)
}

/// `sum_i w_i |d_mu_i|_1` over points with `|d_mu_i|_1 < threshold`, with
/// detached weights `w_i` proportional to `1 / (|d_mu_i|_1 + delta)`.
/// `None` when no point is static.
pub fn static_loss(tape: &mut Tape, d_mu: Var, threshold: f64) -> Result<Option<Var>, KernelError> {
    let norms = tape.norm_l1(d_mu, Axis::Cols)?;
    let frozen = tape.stop_gradient(norms)?;
    let values = tape.value(frozen).data().to_vec();
    let members: Vec<usize> = (0..values.len()).filter(|&i| values[i] < threshold).collect();
    if members.is_empty() {
        return Ok(None);
    }
    let beta: Vec<f64> = members.iter().map(|&i| 1.0 / (values[i] + STATIC_DELTA)).collect();
    let total: f64 = beta.iter().sum();
    let omega: Vec<f64> = beta.iter().map(|b| b / total).collect();
    let omega = tape.constant(Array::new(vec![members.len(), 1], omega)?);
    let selected = tape.gather_rows(norms, &members)?;
    let weighted = tape.mul(omega, selected)?;
    Ok(Some(tape.sum(weighted, Axis::All)?))
}

/// Sum over the six (axis, sign) groups of the mean absolute deviation from
/// the detached group mean. Empty groups contribute nothing.
pub fn consistency_loss(tape: &mut Tape, d_mu: Var) -> Result<Option<Var>, KernelError> {
    let mut total: Option<Var> = None;
    for axis in 0..3 {
        let col = tape.column(d_mu, axis)?;
        let frozen = tape.stop_gradient(col)?;
        let values = tape.value(frozen).data().to_vec();
        for positive in [true, false] {
            let members: Vec<usize> = (0..values.len())
                .filter(|&i| if positive { values[i] > 0.0 } else { values[i] < 0.0 })
                .collect();
            if members.is_empty() {
                continue;
            }
            // Offset from the first member so identical values give a mean
            // equal to that value exactly.
            let first = values[members[0]];
            let mean = first + members.iter().map(|&i| values[i] - first).sum::<f64>() / members.len() as f64;
            let group = tape.gather_rows(col, &members)?;
            let dev = tape.add_scalar(group, -mean);
            let dev = tape.abs(dev);
            let term = tape.mean(dev, Axis::All)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total)
}

/// Loss nodes of one iteration; absent terms were not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub photometric: Option<Var>,
    pub denoise: Option<Var>,
    pub mask: Option<Var>,
    pub static_: Option<Var>,
    pub consistency: Option<Var>,
}

/// Photometric loss plus the weighted terms that are active at `iteration`.
/// Inactive terms are left out of the graph entirely.
pub fn total_loss(tape: &mut Tape, terms: &LossVars, weights: &LossWeights, iteration: usize) -> Result<Var, KernelError> {
    let mut parts: Vec<Var> = Vec::new();
    if let Some(p) = terms.photometric {
        parts.push(p);
    }
    let mut weighted = |tape: &mut Tape, v: Option<Var>, w: f64, on: bool| {
        if let (Some(v), true) = (v, on) {
            parts.push(tape.scale(v, w));
        }
    };
    weighted(tape, terms.mask, weights.w_m, true);
    weighted(tape, terms.static_, weights.w_s, weights.constraints_active(iteration));
    weighted(tape, terms.consistency, weights.w_con, weights.constraints_active(iteration));
    weighted(tape, terms.denoise, weights.w_dn, weights.denoise_active(iteration));
    let mut acc = match parts.first() {
        Some(&p) => p,
        None => return Ok(tape.scalar(0.0)),
    };
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// One CSV row of the loss log. Inactive terms are recorded as exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l1: f64,
    pub ssim: f64,
    pub photometric: f64,
    pub denoise: f64,
    pub mask: f64,
    pub static_: f64,
    pub consistency: f64,
    pub total: f64,
    pub points: usize,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,l1,ssim,photometric,denoise,mask,static,consistency,total,points";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.iteration,
            self.l1,
            self.ssim,
            self.photometric,
            self.denoise,
            self.mask,
            self.static_,
            self.consistency,
            self.total,
            self.points
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.photometric, self.denoise, self.mask, self.static_, self.consistency, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl Fn(&mut Tape, Var) -> Option<Var>, rows: &[[f64; 3]]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.param(Array::from_rows(rows));
        match f(&mut tape, v) {
            Some(out) => tape.value(out).item(),
            None => 0.0,
        }
    }

    #[test]
    fn consistency_examples() {
        let cons = |t: &mut Tape, v| consistency_loss(t, v).unwrap();
        assert_eq!(eval(cons, &[[0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]), 0.0);
        assert_eq!(eval(cons, &[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), 1.0);
    }

    #[test]
    fn static_examples() {
        let st = |t: &mut Tape, v| static_loss(t, v, STATIC_THRESHOLD).unwrap();
        let v = eval(st, &[[0.02, 0.0, 0.0], [0.0, -0.08, 0.0]]);
        // delta shifts the weights by ~1e-7 relative.
        assert!((v - 0.032).abs() < 1e-8, "{v}");
        assert_eq!(eval(st, &[[0.2, 0.0, 0.0], [0.0, 0.3, 0.0]]), 0.0);
        let v = eval(st, &[[0.01, 0.02, 0.0], [0.0, 0.0, -0.03]]);
        assert!((v - 0.03).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_half_at_zero() {
        let mut tape = Tape::new();
        let m = tape.param(Array::from_vec(vec![0.0; 5]));
        let l = mask_loss(&mut tape, m).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
    }

    #[test]
    fn window_means_and_eviction() {
        let mut w = SlidingWindowStats::new(2, 10);
        let s = |v: f64| Array::filled(&[2, 3], v);
        let o = |v: f64| Array::filled(&[2, 1], v);
        assert!(w.expectation().is_none());
        w.observe(0, &s(1.0), &o(0.2));
        w.observe(5, &s(9.0), &o(0.9));
        w.observe(10, &s(3.0), &o(0.4));
        let (es, eo) = w.expectation().unwrap();
        assert_eq!(es.data()[0], 2.0);
        assert!((eo.data()[0] - 0.3).abs() < 1e-15);
        w.observe(20, &s(5.0), &o(0.6));
        assert_eq!(w.len(), 2);
        assert_eq!(w.expectation().unwrap().0.data()[0], 4.0);
    }

    #[test]
    fn gating_leaves_terms_out() {
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let p = tape.scalar(1.0);
        let one = tape.scalar(1.0);
        let terms = LossVars {
            photometric: Some(p),
            denoise: Some(one),
            mask: Some(one),
            static_: Some(one),
            consistency: Some(one),
        };
        let at = |tape: &mut Tape, it| {
            let v = total_loss(tape, &terms, &weights, it).unwrap();
            tape.value(v).item()
        };
        assert_eq!(at(&mut tape, 2000), 1.0 + 5e-4);
        assert_eq!(at(&mut tape, 4000), 1.0 + 5e-4 + 1e-3 + 1e-3);
        assert_eq!(at(&mut tape, 6000), 1.0 + 5e-4 + 1e-3 + 1e-3 + 1e-2);
    }
}
