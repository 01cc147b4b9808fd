#![allow(dead_code)]

pub mod codec;
pub mod geometry;
pub mod gradients;
pub mod raster;

use mega4d::camera::Camera;
use mega4d::color::ColorPredictor;
use mega4d::deform::{apply_deformation, DeformConfig, DeformPredictor};
use mega4d::gauss::{logit, sigmoid, slice, Gaussian4D, GaussianCloud, Quaternion};
use mega4d::nalgebra::{Matrix2, Vector3};
use mega4d::render::{Anchors, Predictors, RenderConfig};
use mega4d::Image;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn camera(size: usize, time: f64) -> Camera {
    let f = 0.5 * size as f64 / (0.5 * 45f64.to_radians()).tan();
    Camera::look_at(
        Vector3::new(0.4, 0.3, -3.0),
        Vector3::zeros(),
        Vector3::y(),
        f,
        f,
        size,
        size,
        time,
    )
    .unwrap()
}

pub fn random_quaternion<R: Rng>(rng: &mut R) -> Quaternion {
    Quaternion::from_array(std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// A Gaussian inside the unit box with moderate scales and opacity.
pub fn random_gaussian<R: Rng>(rng: &mut R) -> Gaussian4D {
    let mut s4 = [0.0; 4];
    for s in s4.iter_mut().take(3) {
        *s = rng.random_range(0.05f64..0.3).ln();
    }
    s4[3] = rng.random_range(0.3f64..2.0).ln();
    Gaussian4D {
        mu4: [
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(0.0..1.0),
        ],
        q_l: random_quaternion(rng),
        q_r: random_quaternion(rng),
        s4,
        c_dc: std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)),
        o_logit: logit(rng.random_range(0.1..0.9)),
    }
}

pub fn random_cloud<R: Rng>(n: usize, rng: &mut R) -> GaussianCloud {
    let mut c = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        c.push(random_gaussian(rng));
    }
    c
}

/// Small networks with every weight, including the heads, randomized.
pub fn random_predictors<R: Rng>(rng: &mut R, head_scale: f64) -> Predictors {
    let cfg = DeformConfig { freq_pos: 2, freq_dir: 2, freq_time: 3, encoder_width: 8, hidden: 12 };
    let mut deform = DeformPredictor::new(cfg, rng).unwrap();
    let mut color = ColorPredictor::new(12, rng).unwrap();
    for l in [deform.fusion.layers.last_mut().unwrap(), color.phi.layers.last_mut().unwrap()] {
        for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *w = rng.random_range(-head_scale..head_scale);
        }
    }
    Predictors { color: Some(color), deform: Some(deform) }
}

pub fn random_image<R: Rng>(w: usize, h: usize, rng: &mut R) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// One splat as seen by the reference compositor.
struct RefSplat {
    mean: [f64; 2],
    inv: Matrix2<f64>,
    depth: f64,
    alpha_base: f64,
    rgb: [f64; 3],
    index: usize,
}

/// Per-pixel reference renderer: every surviving Gaussian is evaluated at
/// every pixel, globally sorted by (depth, index), no tiles and no
/// footprint culling.
pub fn naive_render(
    cloud: &GaussianCloud,
    preds: &Predictors,
    cam: &Camera,
    cfg: &RenderConfig,
    anchors: Option<&Anchors>,
) -> Image {
    let p_v = cam.center();
    let axis = cam.rotation.transpose() * Vector3::z();
    let dir_to = |p: &Vector3<f64>| {
        let d = p - p_v;
        if d.norm() < 1e-12 {
            axis.normalize()
        } else {
            d.normalize()
        }
    };
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let g = cloud.get(i);
        let deformed = match &preds.deform {
            Some(net) => {
                let a = anchors.map_or(g.mu4, |a| a.deform_mu4[i]);
                let d_v = dir_to(&Vector3::new(a[0], a[1], a[2]));
                let (d, _) = net.forward(&a, &[d_v.x, d_v.y, d_v.z], cam.time).unwrap();
                apply_deformation(&g, &d).0
            }
            None => g,
        };
        let sl = slice(&deformed, cam.time).unwrap();
        if sl.temporal_opacity <= cfg.temporal_threshold {
            continue;
        }
        let rgb = match &preds.color {
            Some(cp) => {
                let mu = anchors.map_or([deformed.mu4[0], deformed.mu4[1], deformed.mu4[2]], |a| a.color_mu3[i]);
                let d_v = dir_to(&Vector3::from(mu));
                cp.forward(&mu, &[d_v.x, d_v.y, d_v.z], cam.time, &g.c_dc).unwrap().0
            }
            None => g.c_dc.map(sigmoid),
        };
        let p = cam.rotation * sl.mu3_t + cam.translation;
        if p.z < cfg.z_near {
            continue;
        }
        let (fx, fy) = (cam.fx, cam.fy);
        let j = mega4d::nalgebra::Matrix2x3::new(
            fx / p.z,
            0.0,
            -fx * p.x / (p.z * p.z),
            0.0,
            fy / p.z,
            -fy * p.y / (p.z * p.z),
        );
        let cov = j * cam.rotation * sl.sigma3 * cam.rotation.transpose() * j.transpose()
            + Matrix2::identity() * cfg.dilation;
        splats.push(RefSplat {
            mean: [fx * p.x / p.z + cam.cx, fy * p.y / p.z + cam.cy],
            inv: cov.try_inverse().unwrap(),
            depth: p.z,
            alpha_base: sigmoid(g.o_logit) * sl.temporal_opacity,
            rgb,
            index: i,
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let mut data = vec![0.0; cam.width * cam.height * 3];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for s in &splats {
                let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                let q = s.inv[(0, 0)] * dx * dx + 2.0 * s.inv[(0, 1)] * dx * dy + s.inv[(1, 1)] * dy * dy;
                let alpha = (s.alpha_base * (-0.5 * q).exp()).min(cfg.max_alpha);
                if alpha < cfg.min_alpha {
                    continue;
                }
                if t * (1.0 - alpha) < cfg.min_transmittance {
                    break;
                }
                for k in 0..3 {
                    c[k] += s.rgb[k] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for k in 0..3 {
                data[(y * cam.width + x) * 3 + k] = c[k] + t * cfg.background[k];
            }
        }
    }
    Image::from_data(cam.width, cam.height, data).unwrap()
}

/// Componentwise relative error with an absolute floor below which two
/// values count as equal-scale noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at `x` along one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
