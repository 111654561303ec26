//! Canonical Gaussian scene model, cameras and EWA projection.

use crate::diffkernel::{sigmoid, Array, KernelError, Tape, Var};
use crate::error::{Error, Result};

/// Screen-space covariance dilation added to both diagonal entries, in px².
pub const SCREEN_DILATION: f64 = 0.3;

pub type Mat3 = [[f64; 3]; 3];

/// Per-point canonical parameters, one row per Gaussian.
///
/// `mu` is `[N, 3]`, `rot` `[N, 4]` (w, x, y, z, unnormalized), `log_scale`
/// `[N, 3]`, `opacity_logit` and `mask_logit` `[N, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub mu: Array,
    pub rot: Array,
    pub log_scale: Array,
    pub opacity_logit: Array,
    pub mask_logit: Array,
}

impl GaussianCloud {
    pub fn empty() -> Self {
        Self {
            mu: Array::zeros(&[0, 3]),
            rot: Array::zeros(&[0, 4]),
            log_scale: Array::zeros(&[0, 3]),
            opacity_logit: Array::zeros(&[0, 1]),
            mask_logit: Array::zeros(&[0, 1]),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, mu: [f64; 3], rot: [f64; 4], log_scale: [f64; 3], opacity_logit: f64, mask_logit: f64) {
        // Shapes are fixed by construction.
        self.mu.append_rows(&Array::from_rows(&[mu])).unwrap();
        self.rot.append_rows(&Array::from_rows(&[rot])).unwrap();
        self.log_scale.append_rows(&Array::from_rows(&[log_scale])).unwrap();
        self.opacity_logit.append_rows(&Array::from_rows(&[[opacity_logit]])).unwrap();
        self.mask_logit.append_rows(&Array::from_rows(&[[mask_logit]])).unwrap();
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let r = self.mu.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn quaternion(&self, i: usize) -> [f64; 4] {
        let r = self.rot.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        let r = self.log_scale.row(i);
        [r[0].exp(), r[1].exp(), r[2].exp()]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit.data()[i])
    }

    /// Keeps rows `sources[k]` as the new row `k`.
    pub fn select(&self, sources: &[usize]) -> Self {
        Self {
            mu: self.mu.select_rows(sources),
            rot: self.rot.select_rows(sources),
            log_scale: self.log_scale.select_rows(sources),
            opacity_logit: self.opacity_logit.select_rows(sources),
            mask_logit: self.mask_logit.select_rows(sources),
        }
    }

    pub fn fields(&self) -> [&Array; 5] {
        [&self.mu, &self.rot, &self.log_scale, &self.opacity_logit, &self.mask_logit]
    }

    pub fn fields_mut(&mut self) -> [&mut Array; 5] {
        [
            &mut self.mu,
            &mut self.rot,
            &mut self.log_scale,
            &mut self.opacity_logit,
            &mut self.mask_logit,
        ]
    }
}

/// Pinhole camera in the OpenCV convention (x right, y down, looking down +z).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Rigid world-to-camera transform.
    pub world_to_cam: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Normalized timestamp in `[0, 1]`.
    pub time: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `fov_x` in radians.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_x: f64, width: usize, height: usize) -> Self {
        let fwd = normalize3(sub3(target, eye));
        let right = normalize3(cross3(fwd, up));
        let down = cross3(fwd, right);
        let rot = [right, down, fwd];
        let t = [-dot3(rot[0], eye), -dot3(rot[1], eye), -dot3(rot[2], eye)];
        let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            world_to_cam: rigid(rot, t),
            fx: focal,
            fy: focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            near: 0.01,
            far: 100.0,
            time: 0.0,
        }
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn rotation(&self) -> Mat3 {
        let w = &self.world_to_cam;
        [
            [w[0][0], w[0][1], w[0][2]],
            [w[1][0], w[1][1], w[1][2]],
            [w[2][0], w[2][1], w[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.world_to_cam[0][3], self.world_to_cam[1][3], self.world_to_cam[2][3]]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [dot3(r[0], p) + t[0], dot3(r[1], p) + t[1], dot3(r[2], p) + t[2]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.rotation(), 1e-6) {
            return Err(Error::InvalidCamera("rotation block is not orthonormal".into()));
        }
        if self.near <= 0.0 || self.near >= self.far {
            return Err(Error::InvalidCamera(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::InvalidCamera(format!("time {} outside [0, 1]", self.time)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        Ok(())
    }
}

/// Symmetric PSD 3x3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3 {
    pub sigma: Mat3,
}

/// Screen-space projection of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mu2d: [f64; 2],
    pub sigma2d: [[f64; 2]; 2],
    pub depth: f64,
}

pub fn quat_to_rotation(q: [f64; 4]) -> Result<Mat3> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

/// `R diag(s)^2 R^T`.
pub fn covariance_3d(r: [f64; 4], s: [f64; 3]) -> Result<Covariance3> {
    let rot = quat_to_rotation(r)?;
    let mut sigma = [[0.0; 3]; 3];
    for (a, row) in sigma.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| rot[a][k] * rot[b][k] * s[k] * s[k]).sum();
        }
    }
    Ok(Covariance3 { sigma })
}

/// EWA projection; `None` when the point is outside the depth range.
pub fn project(mu: [f64; 3], cov: &Covariance3, cam: &Camera) -> Option<Projected> {
    let [x, y, z] = cam.to_camera(mu);
    if z <= cam.near || z >= cam.far {
        return None;
    }
    let j = [[cam.fx / z, 0.0, -cam.fx * x / (z * z)], [0.0, cam.fy / z, -cam.fy * y / (z * z)]];
    let w = cam.rotation();
    // T = J W (2x3)
    let mut t = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            t[i][k] = (0..3).map(|m| j[i][m] * w[m][k]).sum();
        }
    }
    let mut s2 = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for p in 0..3 {
                for q in 0..3 {
                    acc += t[a][p] * cov.sigma[p][q] * t[b][q];
                }
            }
            s2[a][b] = acc;
        }
    }
    s2[0][0] += SCREEN_DILATION;
    s2[1][1] += SCREEN_DILATION;
    Some(Projected {
        mu2d: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
        sigma2d: s2,
        depth: z,
    })
}

/// Deformed, masked world-space Gaussians ready for projection.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGaussians {
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions.
    pub rotations: Vec<[f64; 4]>,
    /// Linear scales.
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
}

/// Value-level composition: `mu + d_mu`, `normalize(r + d_r)`,
/// `M exp(log_scale) + M d_s` (forward value of `sg(M)` is `M`),
/// `M sigmoid(opacity_logit)`.
pub fn compose_deformed(
    cloud: &GaussianCloud,
    offsets: &crate::deform::DeformOffsets,
    masks: &crate::mask::MaskValues,
) -> Result<DeformedGaussians> {
    let n = cloud.len();
    if offsets.len() != n || masks.len() != n {
        return Err(Error::SizeMismatch {
            what: "compose_deformed",
            expected: n,
            got: if offsets.len() != n { offsets.len() } else { masks.len() },
        });
    }
    let mut out = DeformedGaussians {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
    };
    for i in 0..n {
        let m = masks.binary[i];
        let p = cloud.position(i);
        let dm = offsets.d_mu.row(i);
        out.positions.push([p[0] + dm[0], p[1] + dm[1], p[2] + dm[2]]);
        let q = cloud.quaternion(i);
        let dr = offsets.d_rot.row(i);
        let q = [q[0] + dr[0], q[1] + dr[1], q[2] + dr[2], q[3] + dr[3]];
        let qn = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        out.rotations.push([q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]);
        let s = cloud.scale(i);
        let ds = offsets.d_scale.row(i);
        out.scales.push([m * s[0] + m * ds[0], m * s[1] + m * ds[1], m * s[2] + m * ds[2]]);
        out.opacities.push(m * cloud.opacity(i));
    }
    Ok(out)
}

/// Tape variables of a screen-space projection.
pub struct ProjectedVars {
    /// `[n, 2]` pixel centers.
    pub mu2d: Var,
    /// `[n, 3]` inverse screen covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: Var,
    /// Camera-space depth per point (not differentiated).
    pub depth: Vec<f64>,
}

/// Recorded EWA projection of `n` points that all lie inside the depth range.
///
/// `pos` `[n, 3]`, `rot` `[n, 4]` unit quaternions, `scale` `[n, 3]` linear.
pub fn project_graph(tape: &mut Tape, pos: Var, rot: Var, scale: Var, cam: &Camera) -> std::result::Result<ProjectedVars, KernelError> {
    let w = cam.rotation();
    let wt = Array::new(vec![3, 3], (0..9).map(|k| w[k % 3][k / 3]).collect())?;
    let wt = tape.constant(wt);
    let tr = tape.constant(Array::new(vec![1, 3], cam.translation().to_vec())?);
    let pc = tape.matmul(pos, wt)?;
    let pc = tape.add(pc, tr)?;
    let x = tape.column(pc, 0)?;
    let y = tape.column(pc, 1)?;
    let z = tape.column(pc, 2)?;
    let depth = tape.value(z).data().to_vec();

    let one = tape.scalar(1.0);
    let iz = tape.div(one, z)?;
    let xz = tape.mul(x, iz)?;
    let yz = tape.mul(y, iz)?;
    let u = tape.scale(xz, cam.fx);
    let u = tape.add_scalar(u, cam.cx);
    let v = tape.scale(yz, cam.fy);
    let v = tape.add_scalar(v, cam.cy);
    let mu2d = tape.concat(&[u, v])?;

    // Jacobian entries of the perspective map.
    let j00 = tape.scale(iz, cam.fx);
    let j11 = tape.scale(iz, cam.fy);
    let xzz = tape.mul(xz, iz)?;
    let yzz = tape.mul(yz, iz)?;
    let j02 = tape.scale(xzz, -cam.fx);
    let j12 = tape.scale(yzz, -cam.fy);
    // T = J W, rows 0 and 1.
    let mut t = [[j00; 3]; 2];
    for k in 0..3 {
        let a = tape.scale(j00, w[0][k]);
        let b = tape.scale(j02, w[2][k]);
        t[0][k] = tape.add(a, b)?;
        let a = tape.scale(j11, w[1][k]);
        let b = tape.scale(j12, w[2][k]);
        t[1][k] = tape.add(a, b)?;
    }

    let rm = rotation_graph(tape, rot)?;
    // M = R diag(s)
    let mut m = [[j00; 3]; 3];
    for k in 0..3 {
        let sk = tape.column(scale, k)?;
        for (a, row) in m.iter_mut().enumerate() {
            row[k] = tape.mul(rm[a][k], sk)?;
        }
    }
    // Mc = T M (2x3), then Sigma2d = Mc Mc^T.
    let mut mc = [[j00; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            let mut acc = tape.mul(t[i][0], m[0][k])?;
            for jj in 1..3 {
                let p = tape.mul(t[i][jj], m[jj][k])?;
                acc = tape.add(acc, p)?;
            }
            mc[i][k] = acc;
        }
    }
    let dot = |tape: &mut Tape, a: &[Var; 3], b: &[Var; 3]| -> std::result::Result<Var, KernelError> {
        let mut acc = tape.mul(a[0], b[0])?;
        for k in 1..3 {
            let p = tape.mul(a[k], b[k])?;
            acc = tape.add(acc, p)?;
        }
        Ok(acc)
    };
    let s00 = dot(tape, &mc[0], &mc[0])?;
    let s01 = dot(tape, &mc[0], &mc[1])?;
    let s11 = dot(tape, &mc[1], &mc[1])?;
    let a = tape.add_scalar(s00, SCREEN_DILATION);
    let c = tape.add_scalar(s11, SCREEN_DILATION);
    let ac = tape.mul(a, c)?;
    let bb = tape.mul(s01, s01)?;
    let det = tape.sub(ac, bb)?;
    let ca = tape.div(c, det)?;
    let cb = tape.div(s01, det)?;
    let cb = tape.neg(cb);
    let cc = tape.div(a, det)?;
    let conic = tape.concat(&[ca, cb, cc])?;
    Ok(ProjectedVars { mu2d, conic, depth })
}

/// Rotation matrix entries (each `[n, 1]`) of unit quaternions `[n, 4]`.
pub fn rotation_graph(tape: &mut Tape, q: Var) -> std::result::Result<[[Var; 3]; 3], KernelError> {
    let w = tape.column(q, 0)?;
    let x = tape.column(q, 1)?;
    let y = tape.column(q, 2)?;
    let z = tape.column(q, 3)?;
    let mut prod = |a: Var, b: Var| tape.mul(a, b);
    let (xx, yy, zz) = (prod(x, x)?, prod(y, y)?, prod(z, z)?);
    let (xy, xz, yz) = (prod(x, y)?, prod(x, z)?, prod(y, z)?);
    let (wx, wy, wz) = (prod(w, x)?, prod(w, y)?, prod(w, z)?);
    // 1 - 2(a + b)
    let diag = |tape: &mut Tape, a: Var, b: Var| -> std::result::Result<Var, KernelError> {
        let s = tape.add(a, b)?;
        let s = tape.scale(s, -2.0);
        Ok(tape.add_scalar(s, 1.0))
    };
    // 2(a + sign b)
    let off = |tape: &mut Tape, a: Var, b: Var, plus: bool| -> std::result::Result<Var, KernelError> {
        let s = if plus { tape.add(a, b)? } else { tape.sub(a, b)? };
        Ok(tape.scale(s, 2.0))
    };
    Ok([
        [diag(tape, yy, zz)?, off(tape, xy, wz, false)?, off(tape, xz, wy, true)?],
        [off(tape, xy, wz, true)?, diag(tape, xx, zz)?, off(tape, yz, wx, false)?],
        [off(tape, xz, wy, false)?, off(tape, yz, wx, true)?, diag(tape, xx, yy)?],
    ])
}

pub(crate) fn rigid(rot: Mat3, t: [f64; 3]) -> [[f64; 4]; 4] {
    [
        [rot[0][0], rot[0][1], rot[0][2], t[0]],
        [rot[1][0], rot[1][1], rot[1][2], t[1]],
        [rot[2][0], rot[2][1], rot[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub(crate) fn is_rotation(r: &Mat3, tol: f64) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let d = dot3(r[i], r[j]);
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > tol || !d.is_finite() {
                return false;
            }
        }
    }
    let det = dot3(r[0], cross3(r[1], r[2]));
    (det - 1.0).abs() <= tol.max(1e-9) * 3.0
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axis_camera(f: f64) -> Camera {
        Camera {
            world_to_cam: rigid([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]),
            fx: f,
            fy: f * 1.25,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
            near: 0.01,
            far: 100.0,
            time: 0.0,
        }
    }

    #[test]
    fn identity_covariances() {
        let c = covariance_3d([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.sigma, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let c = covariance_3d([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.sigma, [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(covariance_3d([0.0; 4], [1.0; 3]), Err(Error::DegenerateQuaternion)));
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = axis_camera(50.0);
        let cov = covariance_3d([1.0, 0.0, 0.0, 0.0], [0.1; 3]).unwrap();
        let p = project([0.0, 0.0, 3.0], &cov, &cam).unwrap();
        assert_eq!(p.mu2d, [cam.cx, cam.cy]);
        assert_eq!(p.depth, 3.0);
        assert!(project([0.0, 0.0, -1.0], &cov, &cam).is_none());
    }

    #[test]
    fn isotropic_screen_covariance_closed_form() {
        let cam = axis_camera(50.0);
        let (sigma, z) = (0.2, 4.0);
        let cov = covariance_3d([1.0, 0.0, 0.0, 0.0], [sigma; 3]).unwrap();
        let p = project([0.0, 0.0, z], &cov, &cam).unwrap();
        let want_x = (cam.fx * sigma / z).powi(2) + SCREEN_DILATION;
        let want_y = (cam.fy * sigma / z).powi(2) + SCREEN_DILATION;
        assert!((p.sigma2d[0][0] - want_x).abs() < 1e-12);
        assert!((p.sigma2d[1][1] - want_y).abs() < 1e-12);
        assert!(p.sigma2d[0][1].abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn covariance_is_psd(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
                             s0 in 0.01f64..3.0, s1 in 0.01f64..3.0, s2 in 0.01f64..3.0) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let c = covariance_3d([w, x, y, z], [s0, s1, s2]).unwrap().sigma;
            for i in 0..3 { for j in 0..3 { prop_assert!((c[i][j] - c[j][i]).abs() < 1e-12); } }
            // PSD via Sylvester-style check on random directions.
            for k in 0..16 {
                let v = [((k * 7) as f64).sin(), ((k * 13) as f64).cos(), ((k * 3) as f64 + 0.5).sin()];
                let q: f64 = (0..3).map(|i| (0..3).map(|j| v[i] * c[i][j] * v[j]).sum::<f64>()).sum();
                prop_assert!(q >= -1e-10);
            }
        }
    }
}
