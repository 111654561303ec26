//! PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over valid 11x11 Gaussian windows, computed per channel and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same(b)?;
    ssim_check_size(a.width, a.height)?;
    Ok(ssim_and_grad(&a.data, &b.data, a.width, a.height, false).0)
}

pub(crate) fn ssim_check_size(width: usize, height: usize) -> Result<()> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width,
            height,
            window: SSIM_WINDOW,
        });
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `ow x oh` map back over `w x h`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for k in 0..SSIM_WINDOW {
                tmp[(y + k) * ow + x] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

/// SSIM of interleaved RGB buffers and, if requested, its gradient with
/// respect to `a`.
pub(crate) fn ssim_and_grad(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let g = gaussian_taps();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let count = (ow * oh * 3) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; a.len()] } else { Vec::new() };
    for ch in 0..3 {
        let pa: Vec<f64> = a.iter().skip(ch).step_by(3).copied().collect();
        let pb: Vec<f64> = b.iter().skip(ch).step_by(3).copied().collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &g);
        let mu_b = filter_valid(&pb, w, h, &g);
        let e_aa = filter_valid(&aa, w, h, &g);
        let e_bb = filter_valid(&bb, w, h, &g);
        let e_ab = filter_valid(&ab, w, h, &g);
        let m = ow * oh;
        let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
            (vec![0.0; m], vec![0.0; m], vec![0.0; m])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for p in 0..m {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let var_a = e_aa[p] - ma * ma;
            let var_b = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = var_a + var_b + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let scale = 1.0 / count;
                g_ab[p] = scale * s * 2.0 / a2;
                g_aa[p] = -scale * s / b2;
                g_mu[p] = scale * s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
            }
        }
        if want_grad {
            let d_mu = filter_valid_adjoint(&g_mu, w, h, &g);
            let d_aa = filter_valid_adjoint(&g_aa, w, h, &g);
            let d_ab = filter_valid_adjoint(&g_ab, w, h, &g);
            for q in 0..w * h {
                grad[3 * q + ch] = d_mu[q] + 2.0 * pa[q] * d_aa[q] + pb[q] * d_ab[q];
            }
        }
    }
    (total / count, grad)
}

/// Per-frame quality numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Wall time of the render, seconds.
    pub render_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.ssim))
    }

    pub fn fps(&self) -> f64 {
        let secs: f64 = self.frames.iter().map(|f| f.render_seconds).sum();
        if secs > 0.0 {
            self.frames.len() as f64 / secs
        } else {
            f64::INFINITY
        }
    }

    /// CSV with one row per frame and a final `mean` row. LPIPS is not computed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim,lpips,render_seconds\n");
        for f in &self.frames {
            s.push_str(&format!("{},{:.6},{:.6},NA,{:.6}\n", f.frame, f.psnr, f.ssim, f.render_seconds));
        }
        let secs: f64 = self.frames.iter().map(|f| f.render_seconds).sum();
        s.push_str(&format!("mean,{:.6},{:.6},NA,{:.6}\n", self.mean_psnr(), self.mean_ssim(), secs));
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
