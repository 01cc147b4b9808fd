//! 4D Gaussian geometry: double-quaternion rotors, covariance assembly,
//! temporal slicing and the temporal-opacity filter.
//!
//! A 4D Gaussian over `(x, y, z, t)` with covariance
//! `Σ = R S Sᵀ Rᵀ = [[U, V], [Vᵀ, W]]` conditioned on time `t` gives a 3D
//! Gaussian with covariance `U - V Vᵀ / W`, mean `μ_xyz + (t - μ_t) V / W`
//! and a temporal weight `exp(-(t - μ_t)² / 2W)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to the temporal variance `W` before dividing by it.
pub const MIN_TEMPORAL_VARIANCE: f64 = 1e-12;

/// Default render-time temporal opacity threshold.
pub const DEFAULT_TEMPORAL_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit quaternion in the same direction, `None` for a zero quaternion.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn hamilton(self, rhs: Self) -> Self {
        let (a0, a1, a2, a3) = (self.w, self.x, self.y, self.z);
        let (b0, b1, b2, b3) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Self::new(
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        )
    }

    /// Matrix of `p ↦ self ⊗ p` acting on `(w, x, y, z)` column vectors.
    pub fn left_matrix(self) -> Matrix4<f64> {
        let (a, b, c, d) = (self.w, self.x, self.y, self.z);
        Matrix4::new(
            a, -b, -c, -d, //
            b, a, -d, c, //
            c, d, a, -b, //
            d, -c, b, a,
        )
    }

    /// Matrix of `p ↦ p ⊗ self`.
    pub fn right_matrix(self) -> Matrix4<f64> {
        let (a, b, c, d) = (self.w, self.x, self.y, self.z);
        Matrix4::new(
            a, -b, -c, -d, //
            b, a, d, -c, //
            c, -d, a, b, //
            d, c, -b, a,
        )
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// One primitive's learnable attributes. Scales are log-scales and the
/// opacity is a logit; both are activated where they are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian4D {
    pub mu4: [f64; 4],
    pub q_l: Quaternion,
    pub q_r: Quaternion,
    pub s4: [f64; 4],
    pub c_dc: [f64; 3],
    pub o_logit: f64,
}

impl Gaussian4D {
    pub fn mu3(&self) -> Vector3<f64> {
        Vector3::new(self.mu4[0], self.mu4[1], self.mu4[2])
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.o_logit)
    }
}

impl Default for Gaussian4D {
    fn default() -> Self {
        Self {
            mu4: [0.0; 4],
            q_l: Quaternion::IDENTITY,
            q_r: Quaternion::IDENTITY,
            s4: [0.0; 4],
            c_dc: [0.0; 3],
            o_logit: 0.0,
        }
    }
}

/// The time-`t` slice of a 4D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sliced3D {
    pub mu3_t: Vector3<f64>,
    pub sigma3: Matrix3<f64>,
    pub temporal_opacity: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// SO(4) rotation `L(q_l) · R(q_r)` from a pair of (normalized) quaternions.
pub fn rotor4(q_l: Quaternion, q_r: Quaternion) -> Result<Matrix4<f64>> {
    let l = q_l
        .normalized()
        .ok_or_else(|| Error::InvalidParameter("zero-norm quaternion q_l".into()))?;
    let r = q_r
        .normalized()
        .ok_or_else(|| Error::InvalidParameter("zero-norm quaternion q_r".into()))?;
    Ok(l.left_matrix() * r.right_matrix())
}

/// Factors a rotation in SO(4) into `(q_l, q_r)` with
/// `rotor4(q_l, q_r) = rot`. The pair is unique up to a joint sign flip.
/// Returns `None` when `rot` is not a proper rotation.
pub fn rotor_factors(rot: &Matrix4<f64>) -> Option<(Quaternion, Quaternion)> {
    let basis = |i: usize| Quaternion::from_array(std::array::from_fn(|k| (k == i) as u8 as f64));
    // ⟨L(e_i) R(e_j), rot⟩ / 4 = a_i b_j for rot = L(a) R(b)
    let mut m = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            let e = basis(i).left_matrix() * basis(j).right_matrix();
            m[(i, j)] = e.component_mul(rot).sum() / 4.0;
        }
    }
    let row = (0..4).max_by(|&a, &b| m.row(a).norm().total_cmp(&m.row(b).norm()))?;
    let b = m.row(row).transpose().try_normalize(1e-9)?;
    let a = m * b;
    let (ql, qr) = (
        Quaternion::from_array([a[0], a[1], a[2], a[3]]),
        Quaternion::from_array([b[0], b[1], b[2], b[3]]),
    );
    let back = rotor4(ql, qr).ok()?;
    ((back - rot).abs().max() < 1e-6).then_some((ql.normalized()?, qr))
}

impl Gaussian4D {
    /// Builds a Gaussian with the given mean and 4D covariance.
    pub fn from_covariance(mu4: [f64; 4], sigma4: &Matrix4<f64>, c_dc: [f64; 3], o_logit: f64) -> Result<Self> {
        let eig = nalgebra::SymmetricEigen::new(*sigma4);
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("covariance is not positive definite".into()));
        }
        let mut rot = eig.eigenvectors;
        if rot.determinant() < 0.0 {
            let c = -rot.column(0);
            rot.set_column(0, &c);
        }
        let (q_l, q_r) = rotor_factors(&rot)
            .ok_or_else(|| Error::InvalidParameter("eigenvectors do not form a rotation".into()))?;
        let s4 = std::array::from_fn(|k| 0.5 * eig.eigenvalues[k].ln());
        Ok(Self { mu4, q_l, q_r, s4, c_dc, o_logit })
    }
}

/// `Σ_4D = R S Sᵀ Rᵀ` with `S = diag(exp(s4))`.
pub fn covariance4(g: &Gaussian4D) -> Result<Matrix4<f64>> {
    let rot = rotor4(g.q_l, g.q_r)?;
    let d = Vector4::from_iterator(g.s4.iter().map(|s| (2.0 * s).exp()));
    Ok(rot * Matrix4::from_diagonal(&d) * rot.transpose())
}

/// Conditions a 4D Gaussian (mean, covariance) on time `t`.
pub fn slice_covariance(mu4: &[f64; 4], sigma4: &Matrix4<f64>, t: f64) -> Sliced3D {
    let u: Matrix3<f64> = sigma4.fixed_view::<3, 3>(0, 0).into_owned();
    let v: Vector3<f64> = sigma4.fixed_view::<3, 1>(0, 3).into_owned();
    let w = sigma4[(3, 3)].max(MIN_TEMPORAL_VARIANCE);
    let dt = t - mu4[3];
    Sliced3D {
        mu3_t: Vector3::new(mu4[0], mu4[1], mu4[2]) + v * (dt / w),
        sigma3: u - v * v.transpose() / w,
        temporal_opacity: (-dt * dt / (2.0 * w)).exp(),
    }
}

pub fn slice(g: &Gaussian4D, t: f64) -> Result<Sliced3D> {
    Ok(slice_covariance(&g.mu4, &covariance4(g)?, t))
}

/// Temporal opacity only; cheaper than a full slice.
pub fn temporal_opacity(g: &Gaussian4D, t: f64) -> Result<f64> {
    let rot = rotor4(g.q_l, g.q_r)?;
    let w: f64 = (0..4)
        .map(|k| rot[(3, k)] * rot[(3, k)] * (2.0 * g.s4[k]).exp())
        .sum::<f64>()
        .max(MIN_TEMPORAL_VARIANCE);
    let dt = t - g.mu4[3];
    Ok((-dt * dt / (2.0 * w)).exp())
}

/// Forward intermediates of rotor → covariance → slice, kept for backward.
#[derive(Debug, Clone)]
pub struct GeometryForward {
    pub ql_unit: Quaternion,
    pub qr_unit: Quaternion,
    pub ql_norm: f64,
    pub qr_norm: f64,
    pub rot: Matrix4<f64>,
    pub var4: Vector4<f64>,
    pub v: Vector3<f64>,
    pub w: f64,
    pub w_clamped: bool,
    pub dt: f64,
    pub sliced: Sliced3D,
}

impl GeometryForward {
    pub fn new(g: &Gaussian4D, t: f64) -> Result<Self> {
        let ql_norm = g.q_l.norm();
        let qr_norm = g.q_r.norm();
        let rot = rotor4(g.q_l, g.q_r)?;
        let ql_unit = g.q_l.normalized().expect("checked by rotor4");
        let qr_unit = g.q_r.normalized().expect("checked by rotor4");
        let var4 = Vector4::from_iterator(g.s4.iter().map(|s| (2.0 * s).exp()));
        let sigma4 = rot * Matrix4::from_diagonal(&var4) * rot.transpose();
        let v: Vector3<f64> = sigma4.fixed_view::<3, 1>(0, 3).into_owned();
        let w_raw = sigma4[(3, 3)];
        let sliced = slice_covariance(&g.mu4, &sigma4, t);
        Ok(Self {
            ql_unit,
            qr_unit,
            ql_norm,
            qr_norm,
            rot,
            var4,
            v,
            w: w_raw.max(MIN_TEMPORAL_VARIANCE),
            w_clamped: w_raw < MIN_TEMPORAL_VARIANCE,
            dt: t - g.mu4[3],
            sliced,
        })
    }
}

/// Gradients of the geometric attributes of one Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeometryGrad {
    pub mu4: [f64; 4],
    pub q_l: [f64; 4],
    pub q_r: [f64; 4],
    pub s4: [f64; 4],
}

/// Backpropagates gradients of the slice outputs (`mu3_t`, full 3×3
/// `sigma3`, temporal opacity) to the raw 4D attributes.
pub fn geometry_backward(
    fwd: &GeometryForward,
    d_mu3: &Vector3<f64>,
    d_sigma3: &Matrix3<f64>,
    d_opacity: f64,
) -> GeometryGrad {
    let w = fwd.w;
    let v = &fwd.v;
    let dt = fwd.dt;
    let sigma_t = fwd.sliced.temporal_opacity;

    let g_dot_v = d_mu3.dot(v);
    let sym = d_sigma3 + d_sigma3.transpose();

    let d_mu_t = -g_dot_v / w + d_opacity * sigma_t * dt / w;
    let d_v = d_mu3 * (dt / w) - sym * v / w;
    let d_w = if fwd.w_clamped {
        0.0
    } else {
        -dt * g_dot_v / (w * w)
            + v.dot(&(d_sigma3 * v)) / (w * w)
            + d_opacity * sigma_t * dt * dt / (2.0 * w * w)
    };

    // Gradient w.r.t. Σ4 as a full matrix: U block, V in column 3, W.
    let mut d_sigma4 = Matrix4::zeros();
    d_sigma4.fixed_view_mut::<3, 3>(0, 0).copy_from(d_sigma3);
    d_sigma4.fixed_view_mut::<3, 1>(0, 3).copy_from(&d_v);
    d_sigma4[(3, 3)] = d_w;

    // Σ4 = R D Rᵀ
    let d = Matrix4::from_diagonal(&fwd.var4);
    let d_rot = (d_sigma4 + d_sigma4.transpose()) * fwd.rot * d;
    let m = fwd.rot.transpose() * d_sigma4 * fwd.rot;
    let mut d_s4 = [0.0; 4];
    for k in 0..4 {
        d_s4[k] = m[(k, k)] * 2.0 * fwd.var4[k];
    }

    // R = L(a) Rm(b)
    let lm = fwd.ql_unit.left_matrix();
    let rm = fwd.qr_unit.right_matrix();
    let d_lm = d_rot * rm.transpose();
    let d_rm = lm.transpose() * d_rot;
    let mut d_a = Vector4::zeros();
    let mut d_b = Vector4::zeros();
    for k in 0..4 {
        let mut e = [0.0; 4];
        e[k] = 1.0;
        let basis = Quaternion::from_array(e);
        d_a[k] = d_lm.component_mul(&basis.left_matrix()).sum();
        d_b[k] = d_rm.component_mul(&basis.right_matrix()).sum();
    }

    GeometryGrad {
        mu4: [d_mu3.x, d_mu3.y, d_mu3.z, d_mu_t],
        q_l: normalize_backward(fwd.ql_unit, fwd.ql_norm, &d_a),
        q_r: normalize_backward(fwd.qr_unit, fwd.qr_norm, &d_b),
        s4: d_s4,
    }
}

fn normalize_backward(unit: Quaternion, norm: f64, d_unit: &Vector4<f64>) -> [f64; 4] {
    let u = unit.to_vector();
    let g = (d_unit - u * u.dot(d_unit)) / norm;
    [g[0], g[1], g[2], g[3]]
}

/// Structure-of-arrays collection of 4D Gaussians.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub mu4: Vec<[f64; 4]>,
    pub q_l: Vec<[f64; 4]>,
    pub q_r: Vec<[f64; 4]>,
    pub s4: Vec<[f64; 4]>,
    pub c_dc: Vec<[f64; 3]>,
    pub o_logit: Vec<f64>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            mu4: Vec::with_capacity(n),
            q_l: Vec::with_capacity(n),
            q_r: Vec::with_capacity(n),
            s4: Vec::with_capacity(n),
            c_dc: Vec::with_capacity(n),
            o_logit: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.mu4.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu4.is_empty()
    }

    pub fn push(&mut self, g: Gaussian4D) {
        self.mu4.push(g.mu4);
        self.q_l.push(g.q_l.to_array());
        self.q_r.push(g.q_r.to_array());
        self.s4.push(g.s4);
        self.c_dc.push(g.c_dc);
        self.o_logit.push(g.o_logit);
    }

    pub fn get(&self, i: usize) -> Gaussian4D {
        Gaussian4D {
            mu4: self.mu4[i],
            q_l: Quaternion::from_array(self.q_l[i]),
            q_r: Quaternion::from_array(self.q_r[i]),
            s4: self.s4[i],
            c_dc: self.c_dc[i],
            o_logit: self.o_logit[i],
        }
    }

    pub fn set(&mut self, i: usize, g: Gaussian4D) {
        self.mu4[i] = g.mu4;
        self.q_l[i] = g.q_l.to_array();
        self.q_r[i] = g.q_r.to_array();
        self.s4[i] = g.s4;
        self.c_dc[i] = g.c_dc;
        self.o_logit[i] = g.o_logit;
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian4D> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Keeps the Gaussians whose mask entry is `true`, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len(), "mask length must equal count");
        fn compact<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut k = keep.iter();
            v.retain(|_| *k.next().unwrap());
        }
        compact(&mut self.mu4, keep);
        compact(&mut self.q_l, keep);
        compact(&mut self.q_r, keep);
        compact(&mut self.s4, keep);
        compact(&mut self.c_dc, keep);
        compact(&mut self.o_logit, keep);
    }

    /// Checks that all attribute arrays have the same length.
    pub fn validate(&self) -> Result<()> {
        let n = self.mu4.len();
        let lens = [
            self.q_l.len(),
            self.q_r.len(),
            self.s4.len(),
            self.c_dc.len(),
            self.o_logit.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!(
                "cloud arrays disagree: mu4 {n}, others {lens:?}"
            )));
        }
        Ok(())
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.o_logit.iter().map(|&o| sigmoid(o)).collect()
    }
}

/// Indices of Gaussians whose temporal opacity at `t` exceeds `threshold`,
/// in ascending order.
pub fn temporal_filter(cloud: &GaussianCloud, t: f64, threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "temporal threshold {threshold} outside [0, 1)"
        )));
    }
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        let sigma = temporal_opacity(&cloud.get(i), t)
            .map_err(|e| Error::InvalidParameter(format!("gaussian {i}: {e}")))?;
        if sigma > threshold {
            out.push(i);
        }
    }
    Ok(out)
}
