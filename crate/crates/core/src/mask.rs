//! Learnable denoising mask with a straight-through binary forward value.

use crate::diffkernel::{sigmoid, KernelError, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;

pub const MASK_EPSILON: f64 = 0.01;
/// Logit with `sigmoid = 0.9`.
pub const MASK_INIT_LOGIT: f64 = 2.1972245773362196;

/// Mask state for every point.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskValues {
    pub logits: Vec<f64>,
    /// `sigmoid(logits)`.
    pub soft: Vec<f64>,
    /// Exactly 0.0 or 1.0.
    pub binary: Vec<f64>,
    pub epsilon: f64,
}

impl MaskValues {
    pub fn len(&self) -> usize {
        self.binary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_empty()
    }

    pub fn ones(n: usize) -> Self {
        Self {
            logits: vec![f64::INFINITY; n],
            soft: vec![1.0; n],
            binary: vec![1.0; n],
            epsilon: MASK_EPSILON,
        }
    }

    pub fn active_count(&self) -> usize {
        self.binary.iter().filter(|&&m| m == 1.0).count()
    }
}

#[inline]
pub fn is_active(logit: f64, epsilon: f64) -> bool {
    sigmoid(logit) > epsilon
}

pub fn binary_mask(logits: &[f64], epsilon: f64) -> MaskValues {
    let soft: Vec<f64> = logits.iter().map(|&m| sigmoid(m)).collect();
    let binary = soft.iter().map(|&s| if s > epsilon { 1.0 } else { 0.0 }).collect();
    MaskValues {
        logits: logits.to_vec(),
        soft,
        binary,
        epsilon,
    }
}

/// `M = s + sg(1[s > eps] - s)` with `s = sigmoid(m)`.
pub fn binary_mask_graph(tape: &mut Tape, logits: Var, epsilon: f64) -> Result<Var, KernelError> {
    let s = tape.sigmoid(logits);
    let jump = tape.value(s).map(|v| if v > epsilon { 1.0 } else { 0.0 });
    let jump = tape.constant(jump);
    let diff = tape.sub(jump, s)?;
    let diff = tape.stop_gradient(diff)?;
    tape.add(s, diff)
}

/// `(M s + sg(M) d_s, M o)` for `[N, 3]` scales and `[N, 1]` opacities.
pub fn apply_mask_graph(tape: &mut Tape, scale: Var, opacity: Var, d_scale: Option<Var>, mask: Var) -> Result<(Var, Var), KernelError> {
    let mut s = tape.mul(mask, scale)?;
    if let Some(ds) = d_scale {
        let m_sg = tape.stop_gradient(mask)?;
        let shifted = tape.mul(m_sg, ds)?;
        s = tape.add(s, shifted)?;
    }
    let o = tape.mul(mask, opacity)?;
    Ok((s, o))
}

/// Value-level counterpart of [`apply_mask_graph`] for one point.
pub fn apply_mask(scale: [f64; 3], opacity: f64, d_scale: [f64; 3], mask: f64) -> ([f64; 3], f64) {
    (
        [0, 1, 2].map(|k| mask * scale[k] + mask * d_scale[k]),
        mask * opacity,
    )
}

/// Old-to-new correspondence after a structural change of the cloud.
///
/// New point `k` takes its state from old point `source[k]`; `fresh[k]` marks
/// points that did not exist before (their optimizer moments start at zero).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRemap {
    pub source: Vec<usize>,
    pub fresh: Vec<bool>,
}

impl IndexRemap {
    pub fn identity(n: usize) -> Self {
        Self {
            source: (0..n).collect(),
            fresh: vec![false; n],
        }
    }

    pub fn keep(source: Vec<usize>) -> Self {
        let fresh = vec![false; source.len()];
        Self { source, fresh }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// New index of every old point, `None` if it was dropped.
    pub fn old_to_new(&self, old_len: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; old_len];
        for (k, (&s, &f)) in self.source.iter().zip(&self.fresh).enumerate() {
            if !f && map[s].is_none() {
                map[s] = Some(k);
            }
        }
        map
    }

    /// Applies `self` after `first`.
    pub fn compose(&self, first: &IndexRemap) -> IndexRemap {
        IndexRemap {
            source: self.source.iter().map(|&s| first.source[s]).collect(),
            fresh: self.source.iter().zip(&self.fresh).map(|(&s, &f)| f || first.fresh[s]).collect(),
        }
    }
}

/// Drops every point whose mask is off.
pub fn prune_masked(cloud: &GaussianCloud, epsilon: f64) -> Result<(GaussianCloud, IndexRemap)> {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| is_active(cloud.mask_logit.data()[i], epsilon))
        .collect();
    if keep.is_empty() && !cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok((cloud.select(&keep), IndexRemap::keep(keep)))
}
