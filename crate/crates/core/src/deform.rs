//! Temporal-viewpoint deformation of 4D Gaussians.
//!
//! A shared network maps the frequency-encoded (stop-gradient) 4D center,
//! view direction and time to 16 raw outputs that adjust the Gaussian's
//! center, log-scales and both rotor quaternions. Zero raw output is the
//! identity transform, so a zero-initialized head leaves rendering unchanged.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{Gaussian4D, GeometryGrad, Quaternion};
use crate::mlp::{Activation, Dense, Mlp, MlpCache, MlpGrad};

/// Deformed quaternions with a norm below this fall back to the prior one.
pub const MIN_DEFORMED_QUAT_NORM: f64 = 1e-9;

/// `[sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp)]` per scalar,
/// scalars concatenated in input order.
pub fn posenc(p: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len() * 2 * levels);
    posenc_into(p, levels, &mut out);
    out
}

fn posenc_into(p: &[f64], levels: usize, out: &mut Vec<f64>) {
    for &x in p {
        let mut freq = PI;
        for _ in 0..levels {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub freq_pos: usize,
    pub freq_dir: usize,
    pub freq_time: usize,
    pub encoder_width: usize,
    pub hidden: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { freq_pos: 6, freq_dir: 6, freq_time: 10, encoder_width: 32, hidden: 64 }
    }
}

/// Raw network outputs, split 4/4/4/4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub m_mu4: [f64; 4],
    pub m_s4: [f64; 4],
    pub m_ql: [f64; 4],
    pub m_qr: [f64; 4],
}

impl Deformation {
    pub fn from_raw(raw: &[f64]) -> Self {
        let take = |o: usize| [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
        Self { m_mu4: take(0), m_s4: take(4), m_ql: take(8), m_qr: take(12) }
    }

    pub fn to_raw(&self) -> [f64; 16] {
        let mut r = [0.0; 16];
        r[0..4].copy_from_slice(&self.m_mu4);
        r[4..8].copy_from_slice(&self.m_s4);
        r[8..12].copy_from_slice(&self.m_ql);
        r[12..16].copy_from_slice(&self.m_qr);
        r
    }

    pub fn is_finite(&self) -> bool {
        self.to_raw().iter().all(|v| v.is_finite())
    }
}

/// The deformation network: one Linear+ReLU encoder per input group
/// (center, view direction, time), concatenation, two fused Linear+ReLU
/// layers and a linear head of width 16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformPredictor {
    pub config: DeformConfig,
    pub encoders: Vec<Mlp>,
    pub fusion: Mlp,
}

#[derive(Debug, Clone, Default)]
pub struct DeformCache {
    encoders: Vec<MlpCache>,
    fusion: MlpCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformGrad {
    pub encoders: Vec<MlpGrad>,
    pub fusion: MlpGrad,
}

impl DeformGrad {
    pub fn zeros_like(p: &DeformPredictor) -> Self {
        Self {
            encoders: p.encoders.iter().map(MlpGrad::zeros_like).collect(),
            fusion: MlpGrad::zeros_like(&p.fusion),
        }
    }

    pub fn add_assign(&mut self, other: &DeformGrad) {
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            a.add_assign(b);
        }
        self.fusion.add_assign(&other.fusion);
    }

    /// Same order as [`DeformPredictor::params_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.encoders.iter().flat_map(|g| g.flatten()).collect();
        out.extend(self.fusion.flatten());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.encoders.iter().all(MlpGrad::is_zero) && self.fusion.is_zero()
    }
}

impl DeformPredictor {
    pub fn new<R: Rng>(config: DeformConfig, rng: &mut R) -> Result<Self> {
        let in_dims = [8 * config.freq_pos, 6 * config.freq_dir, 2 * config.freq_time];
        if in_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("deformation frequency counts must be ≥ 1".into()));
        }
        let encoders = in_dims
            .iter()
            .map(|&d| Mlp {
                layers: vec![Dense::random(d, config.encoder_width, Activation::Relu, rng)],
            })
            .collect();
        let fusion = Mlp::new(
            &[3 * config.encoder_width, config.hidden, config.hidden, 16],
            true,
            rng,
        )?;
        Ok(Self { config, encoders, fusion })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let in_dims = [8 * c.freq_pos, 6 * c.freq_dir, 2 * c.freq_time];
        if self.encoders.len() != 3 {
            return Err(Error::Config(format!("expected 3 encoders, found {}", self.encoders.len())));
        }
        let mut concat = 0;
        for (i, (enc, &d)) in self.encoders.iter().zip(&in_dims).enumerate() {
            enc.validate()?;
            if enc.in_dim() != d {
                return Err(Error::Config(format!(
                    "encoder {i} expects {} inputs but the encoding has {d}",
                    enc.in_dim()
                )));
            }
            concat += enc.out_dim();
        }
        self.fusion.validate()?;
        if self.fusion.in_dim() != concat || self.fusion.out_dim() != 16 {
            return Err(Error::Config(format!(
                "fusion network is {}→{}, expected {concat}→16",
                self.fusion.in_dim(),
                self.fusion.out_dim()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoders.iter().map(Mlp::param_count).sum::<usize>() + self.fusion.param_count()
    }

    pub fn zero_head(&mut self) {
        self.fusion.zero_head();
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoders
            .iter_mut()
            .flat_map(|m| m.params_mut())
            .chain(self.fusion.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.encoders.iter().flat_map(|m| m.params()).chain(self.fusion.params())
    }

    /// Evaluates the network. `mu4` and `d_v` are stop-gradient inputs; no
    /// gradient is ever produced for them.
    pub fn forward(&self, mu4: &[f64; 4], d_v: &[f64; 3], t: f64) -> Result<(Deformation, DeformCache)> {
        let n = (d_v[0] * d_v[0] + d_v[1] * d_v[1] + d_v[2] * d_v[2]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("view direction norm {n} is not 1")));
        }
        let c = &self.config;
        let groups = [posenc(mu4, c.freq_pos), posenc(d_v, c.freq_dir), posenc(&[t], c.freq_time)];
        let mut encoders = Vec::with_capacity(3);
        let mut concat = Vec::with_capacity(self.fusion.in_dim());
        for (enc, x) in self.encoders.iter().zip(&groups) {
            let cache = enc.forward(x)?;
            concat.extend_from_slice(cache.output());
            encoders.push(cache);
        }
        let fusion = self.fusion.forward(&concat)?;
        let d = Deformation::from_raw(fusion.output());
        Ok((d, DeformCache { encoders, fusion }))
    }

    /// Accumulates θ gradients for an upstream gradient on the 16 raw outputs.
    pub fn backward(&self, cache: &DeformCache, d_raw: &[f64; 16], grad: &mut DeformGrad) -> Result<()> {
        if cache.encoders.len() != self.encoders.len() {
            return Err(Error::State("deformation backward without a forward cache".into()));
        }
        let d_concat = self.fusion.backward(&cache.fusion, d_raw, &mut grad.fusion)?;
        let mut offset = 0;
        for ((enc, c), g) in self.encoders.iter().zip(&cache.encoders).zip(&mut grad.encoders) {
            let w = enc.out_dim();
            // encoder inputs are constants; their input gradient is discarded
            enc.backward(c, &d_concat[offset..offset + w], g)?;
            offset += w;
        }
        Ok(())
    }
}

/// Which quaternions fell back to their prior value during apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApplyInfo {
    pub ql_fallback: bool,
    pub qr_fallback: bool,
}

impl ApplyInfo {
    pub fn fallbacks(&self) -> usize {
        self.ql_fallback as usize + self.qr_fallback as usize
    }
}

fn add_unit(m: &[f64; 4]) -> Quaternion {
    Quaternion::new(1.0 + m[0], m[1], m[2], m[3])
}

/// Residual deformation: `μ' = μ ⊙ (1 + m_μ)`, `s' = s + m_s`,
/// `q' = q ⊗ (1 + m_q)`. Quaternion scale is left to the rotor, which
/// normalizes on use; a zero deformation returns `g` bit-exactly.
pub fn apply_deformation(g: &Gaussian4D, d: &Deformation) -> (Gaussian4D, ApplyInfo) {
    let mut out = *g;
    let mut info = ApplyInfo::default();
    for k in 0..4 {
        out.mu4[k] = g.mu4[k] * (1.0 + d.m_mu4[k]);
        out.s4[k] = g.s4[k] + d.m_s4[k];
    }
    let ql = g.q_l.hamilton(add_unit(&d.m_ql));
    if ql.norm() < MIN_DEFORMED_QUAT_NORM {
        info.ql_fallback = true;
    } else {
        out.q_l = ql;
    }
    let qr = g.q_r.hamilton(add_unit(&d.m_qr));
    if qr.norm() < MIN_DEFORMED_QUAT_NORM {
        info.qr_fallback = true;
    } else {
        out.q_r = qr;
    }
    (out, info)
}

/// Backward of [`apply_deformation`]: returns the gradient for the original
/// attributes and for the 16 raw deformation outputs.
pub fn apply_deformation_backward(
    g: &Gaussian4D,
    d: &Deformation,
    info: &ApplyInfo,
    upstream: &GeometryGrad,
) -> (GeometryGrad, [f64; 16]) {
    let mut gg = GeometryGrad::default();
    let mut raw = [0.0; 16];
    for k in 0..4 {
        gg.mu4[k] = upstream.mu4[k] * (1.0 + d.m_mu4[k]);
        raw[k] = upstream.mu4[k] * g.mu4[k];
        gg.s4[k] = upstream.s4[k];
        raw[4 + k] = upstream.s4[k];
    }
    let quat_back = |q: Quaternion, m: &[f64; 4], up: &[f64; 4], fallback: bool| {
        let up = nalgebra::Vector4::from(*up);
        if fallback {
            return (*up.as_ref(), [0.0; 4]);
        }
        // q' = Rm(1 + m) q = L(q) (1 + m)
        let dq = add_unit(m).right_matrix().transpose() * up;
        let dm = q.left_matrix().transpose() * up;
        (*dq.as_ref(), *dm.as_ref())
    };
    let (dq, dm) = quat_back(g.q_l, &d.m_ql, &upstream.q_l, info.ql_fallback);
    gg.q_l = dq;
    raw[8..12].copy_from_slice(&dm);
    let (dq, dm) = quat_back(g.q_r, &d.m_qr, &upstream.q_r, info.qr_fallback);
    gg.q_r = dq;
    raw[12..16].copy_from_slice(&dm);
    (gg, raw)
}

/// Chain rule through apply and the network: accumulates θ gradients and
/// returns the gradient for the undeformed attributes. The network input
/// carries no gradient (stop-gradient on center and view direction).
pub fn deform_backward(
    pred: &DeformPredictor,
    cache: &DeformCache,
    g: &Gaussian4D,
    d: &Deformation,
    info: &ApplyInfo,
    upstream: &GeometryGrad,
    grad: &mut DeformGrad,
) -> Result<GeometryGrad> {
    let (gg, raw) = apply_deformation_backward(g, d, info, upstream);
    pred.backward(cache, &raw, grad)?;
    Ok(gg)
}
