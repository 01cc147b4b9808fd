//! Photometric and opacity losses with analytic gradients.
//!
//! Total loss: `(1 - λ)·L1 + λ·(1 - SSIM) + κ·mean(-o log o)`.

use crate::error::{Error, Result};
use crate::image::Image;

/// Floor applied to opacities inside the logarithm.
pub const OPACITY_LOG_FLOOR: f64 = 1e-12;

/// Mean absolute error over all pixels and channels.
pub fn l1_loss(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.same_shape(target)?;
    let n = rendered.data.len().max(1) as f64;
    Ok(rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// L1 loss and its gradient w.r.t. `rendered` (subgradient 0 at ties).
pub fn l1_loss_grad(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    let value = l1_loss(rendered, target)?;
    let n = rendered.data.len().max(1) as f64;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, data_range: 1.0, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    pub fn with_range(data_range: f64) -> Self {
        Self { data_range, ..Self::default() }
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / s).collect()
    }
}

/// Single-channel plane with separable "valid" Gaussian filtering.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, ch: usize) -> Self {
        Self { w: img.width, h: img.height, v: img.data.iter().skip(ch).step_by(3).copied().collect() }
    }

    fn map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (ow, oh) = (self.w + 1 - n, self.h + 1 - n);
        let mut tmp = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v: out }
    }

    /// Adjoint of [`Plane::filter_valid`], scattering back to `w × h`.
    fn filter_valid_adjoint(&self, k: &[f64], w: usize, h: usize) -> Plane {
        let n = k.len();
        let mut tmp = vec![0.0; self.w * h];
        for y in 0..self.h {
            for x in 0..self.w {
                let g = self.v[y * self.w + x];
                for j in 0..n {
                    tmp[(y + j) * self.w + x] += k[j] * g;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..self.w {
                let g = tmp[y * self.w + x];
                for j in 0..n {
                    out[y * w + x + j] += k[j] * g;
                }
            }
        }
        Plane { w, h, v: out }
    }
}

fn check_ssim_inputs(a: &Image, b: &Image, p: &SsimParams) -> Result<()> {
    a.same_shape(b)?;
    if a.width < p.window || a.height < p.window {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            a.width, a.height, p.window, p.window
        )));
    }
    Ok(())
}

/// Mean SSIM over valid window positions and channels, with the gradient
/// w.r.t. `a` when requested.
fn ssim_impl(a: &Image, b: &Image, p: &SsimParams, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_ssim_inputs(a, b, p)?;
    let k = p.kernel();
    let (c1, c2) = (p.c1(), p.c2());
    let mut sum = 0.0;
    let mut windows = 0usize;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    for ch in 0..3 {
        let x = Plane::channel(a, ch);
        let y = Plane::channel(b, ch);
        let mx = x.filter_valid(&k);
        let my = y.filter_valid(&k);
        let exx = x.map(&x, |u, _| u * u).filter_valid(&k);
        let eyy = y.map(&y, |u, _| u * u).filter_valid(&k);
        let exy = x.map(&y, |u, v| u * v).filter_valid(&k);
        let np = mx.v.len();
        windows += np;
        let scale = 1.0 / (3.0 * np as f64);
        let mut gm = vec![0.0; np];
        let mut g2 = vec![0.0; np];
        let mut gxy = vec![0.0; np];
        for i in 0..np {
            let (ux, uy) = (mx.v[i], my.v[i]);
            let sxx = exx.v[i] - ux * ux;
            let syy = eyy.v[i] - uy * uy;
            let sxy = exy.v[i] - ux * uy;
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            if want_grad {
                gm[i] = scale * (2.0 * uy * (a2 / (b1 * b2) - a1 / (b1 * b2))
                    + 2.0 * ux * (a1 * a2 / (b1 * b2 * b2) - a1 * a2 / (b1 * b1 * b2)));
                g2[i] = -scale * a1 * a2 / (b1 * b2 * b2);
                gxy[i] = scale * 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(grad) = grad.as_mut() {
            let back = |v: Vec<f64>| Plane { w: mx.w, h: mx.h, v }.filter_valid_adjoint(&k, a.width, a.height);
            let bm = back(gm);
            let b2 = back(g2);
            let bxy = back(gxy);
            for i in 0..x.v.len() {
                grad[i * 3 + ch] = bm.v[i] + 2.0 * x.v[i] * b2.v[i] + y.v[i] * bxy.v[i];
            }
        }
    }
    Ok((sum / windows as f64, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5) averaged over channels.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(a, b, params, false)?.0)
}

/// `1 - SSIM` with data range 1.
pub fn ssim_loss(rendered: &Image, target: &Image) -> Result<f64> {
    Ok(1.0 - ssim(rendered, target, &SsimParams::default())?)
}

/// `1 - SSIM` and its gradient w.r.t. `rendered`.
pub fn ssim_loss_grad(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(rendered, target, &SsimParams::default(), true)?;
    Ok((1.0 - s, g.expect("requested").into_iter().map(|v| -v).collect()))
}

/// `mean(-o log o)` and its gradient `-(log o + 1) / N`.
pub fn opacity_entropy_loss(opacities: &[f64]) -> Result<(f64, Vec<f64>)> {
    if opacities.is_empty() {
        return Err(Error::Empty("opacity entropy of an empty set".into()));
    }
    let n = opacities.len() as f64;
    let mut value = 0.0;
    let grad = opacities
        .iter()
        .map(|&o| {
            let lo = o.max(OPACITY_LOG_FLOOR).ln();
            value -= o * lo;
            -(lo + 1.0) / n
        })
        .collect();
    Ok((value / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// SSIM weight λ.
    pub lambda: f64,
    /// Entropy weight κ.
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.2, kappa: 5e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub l_opa: f64,
    pub d_image: Vec<f64>,
    /// Gradient w.r.t. each (activated) spatial opacity.
    pub d_opacity: Vec<f64>,
}

/// `(1 - λ) L1 + λ L_ssim + κ L_opa`; gradients are the same weighted sum.
/// An empty opacity set contributes zero entropy.
pub fn total_loss(rendered: &Image, target: &Image, opacities: &[f64], w: &LossWeights) -> Result<TotalLoss> {
    if !(0.0..=1.0).contains(&w.lambda) || w.kappa < 0.0 {
        return Err(Error::Config(format!("invalid loss weights λ={} κ={}", w.lambda, w.kappa)));
    }
    let (l1, g1) = l1_loss_grad(rendered, target)?;
    let (ls, gs) = if w.lambda > 0.0 {
        ssim_loss_grad(rendered, target)?
    } else {
        (ssim_loss(rendered, target).unwrap_or(f64::NAN), vec![0.0; g1.len()])
    };
    let (lo, go) = if opacities.is_empty() {
        (0.0, Vec::new())
    } else {
        opacity_entropy_loss(opacities)?
    };
    let d_image = g1.iter().zip(&gs).map(|(a, b)| (1.0 - w.lambda) * a + w.lambda * b).collect();
    let d_opacity = go.iter().map(|g| w.kappa * g).collect();
    let ssim_term = if w.lambda > 0.0 { w.lambda * ls } else { 0.0 };
    Ok(TotalLoss {
        total: (1.0 - w.lambda) * l1 + ssim_term + w.kappa * lo,
        l1,
        ssim_loss: ls,
        l_opa: lo,
        d_image,
        d_opacity,
    })
}
