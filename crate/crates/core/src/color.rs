//! DC-AC color: a per-Gaussian DC logit plus a shared AC predictor,
//! `rgb = sigmoid(c_dc + F(sg(μ), sg(d_v), t, c_dc))`.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::sigmoid;
use crate::mlp::{Mlp, MlpCache, MlpGrad};

/// Input width of the AC predictor: center (3) + direction (3) + time (1) + DC (3).
pub const COLOR_INPUT_DIM: usize = 10;

/// Unit direction from the camera center to `mu3`. Returns `fallback` and
/// `true` when the two points coincide.
pub fn view_direction(mu3: &Vector3<f64>, p_v: &Vector3<f64>, fallback: &Vector3<f64>) -> (Vector3<f64>, bool) {
    let d = mu3 - p_v;
    let n = d.norm();
    if n < 1e-12 {
        (fallback.normalize(), true)
    } else {
        (d / n, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPredictor {
    pub phi: Mlp,
}

impl ColorPredictor {
    /// Linear–ReLU–linear–ReLU–linear with a zero-initialized head.
    pub fn new<R: Rng>(hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { phi: Mlp::new(&[COLOR_INPUT_DIM, hidden, hidden, 3], true, rng)? })
    }

    pub fn validate(&self) -> Result<()> {
        self.phi.validate()?;
        if self.phi.in_dim() != COLOR_INPUT_DIM || self.phi.out_dim() != 3 {
            return Err(Error::Config(format!(
                "color predictor is {}→{}, expected {COLOR_INPUT_DIM}→3",
                self.phi.in_dim(),
                self.phi.out_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        mu3: &[f64; 3],
        d_v: &[f64; 3],
        t: f64,
        c_dc: &[f64; 3],
    ) -> Result<([f64; 3], MlpCache)> {
        let input = [mu3[0], mu3[1], mu3[2], d_v[0], d_v[1], d_v[2], t, c_dc[0], c_dc[1], c_dc[2]];
        let cache = self.phi.forward(&input)?;
        let ac = cache.output();
        let rgb = [sigmoid(c_dc[0] + ac[0]), sigmoid(c_dc[1] + ac[1]), sigmoid(c_dc[2] + ac[2])];
        Ok((rgb, cache))
    }

    /// Accumulates φ gradients; returns `(dL/dc_dc, dL/dt)`. The DC term
    /// receives gradient through both the skip path and the network input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        rgb: &[f64; 3],
        d_rgb: &[f64; 3],
        grad: &mut MlpGrad,
    ) -> Result<([f64; 3], f64)> {
        let dz: [f64; 3] = std::array::from_fn(|c| d_rgb[c] * rgb[c] * (1.0 - rgb[c]));
        let d_in = self.phi.backward(cache, &dz, grad)?;
        let d_dc = [dz[0] + d_in[7], dz[1] + d_in[8], dz[2] + d_in[9]];
        Ok((d_dc, d_in[6]))
    }
}

/// DC-only color, used when the AC predictor is disabled.
pub fn dc_color(c_dc: &[f64; 3]) -> [f64; 3] {
    [sigmoid(c_dc[0]), sigmoid(c_dc[1]), sigmoid(c_dc[2])]
}

pub fn dc_color_backward(rgb: &[f64; 3], d_rgb: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|c| d_rgb[c] * rgb[c] * (1.0 - rgb[c]))
}

/// Per-Gaussian storage layouts for the parameter-count comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorLayout {
    /// DC logits only; view/time dependence lives in the shared predictor.
    DcAc,
    /// 4D spherical harmonics with view degree `k_v` and time degree `k_t`.
    SphericalHarmonics4D { k_v: usize, k_t: usize },
}

impl ColorLayout {
    pub const REFERENCE_4DGS: ColorLayout = ColorLayout::SphericalHarmonics4D { k_v: 3, k_t: 2 };
}

/// Geometric attributes shared by both layouts: mean, two quaternions,
/// scale and opacity.
const GEOMETRY_PARAMS: usize = 4 + 4 + 4 + 4 + 1;

pub fn param_count_per_gaussian(layout: ColorLayout) -> usize {
    GEOMETRY_PARAMS
        + match layout {
            ColorLayout::DcAc => 3,
            ColorLayout::SphericalHarmonics4D { k_v, k_t } => 3 * (k_v + 1) * (k_v + 1) * (k_t + 1),
        }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn view_direction_cases() {
        let fwd = Vector3::new(0.0, 0.0, 1.0);
        let (d, f) = view_direction(&Vector3::new(0.0, 0.0, 1.0), &Vector3::zeros(), &fwd);
        assert_eq!((d, f), (Vector3::new(0.0, 0.0, 1.0), false));
        let (d, _) = view_direction(&Vector3::new(3.0, 4.0, 0.0), &Vector3::zeros(), &fwd);
        assert!((d - Vector3::new(0.6, 0.8, 0.0)).norm() < 1e-15);
        let (d, f) = view_direction(&Vector3::new(1.0, 1.0, 1.0), &Vector3::new(1.0, 1.0, 1.0), &fwd);
        assert!(f);
        assert_eq!(d, fwd);
    }

    #[test]
    fn zero_phi_is_dc_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cp = ColorPredictor::new(16, &mut rng).unwrap();
        cp.phi.params_mut().for_each(|p| *p = 0.0);
        let (rgb, _) = cp.forward(&[0.1, 0.2, 0.3], &[0.0, 0.0, 1.0], 0.5, &[0.0; 3]).unwrap();
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
        let (rgb, _) = cp
            .forward(&[0.1, 0.2, 0.3], &[0.0, 0.0, 1.0], 0.5, &[3f64.ln(), 0.0, -(3f64.ln())])
            .unwrap();
        assert!((rgb[0] - 0.75).abs() < 1e-15);
        assert_eq!(rgb[1], 0.5);
        assert!((rgb[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_head_ignores_time_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cp = ColorPredictor::new(32, &mut rng).unwrap();
        let dc = [0.3, -1.2, 2.0];
        let (a, _) = cp.forward(&[0.1, 0.2, 0.3], &[0.0, 0.0, 1.0], 0.1, &dc).unwrap();
        let (b, _) = cp.forward(&[0.1, 0.2, 0.3], &[0.6, 0.8, 0.0], 0.9, &dc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, dc_color(&dc));
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(param_count_per_gaussian(ColorLayout::DcAc), 20);
        assert_eq!(param_count_per_gaussian(ColorLayout::REFERENCE_4DGS), 161);
        let ratio = 161.0 / 20.0;
        assert!((ratio - 8.05f64).abs() < 1e-12);
    }
}
