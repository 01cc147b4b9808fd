//! Central-difference checks of every hand-written backward pass.

use mega4d::deform::{apply_deformation, deform_backward, DeformGrad};
use mega4d::gauss::{Gaussian4D, GeometryGrad};
use mega4d::loss::{opacity_entropy_loss, ssim_loss, ssim_loss_grad};
use mega4d::mlp::MlpGrad;
use mega4d::render::{backward, render, Predictors, RenderConfig};
use mega4d::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_diff, dot, random_cloud, random_gaussian, random_image, random_predictors, rel_err};

/// Step and absolute floor per check. Below the floor a component is
/// compared in absolute terms: the rendered loss sums thousands of pixels,
/// so its central differences carry round-off near 1e-9 at h = 1e-6.
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-8;
const H_RENDER: f64 = 1e-5;
const FLOOR_RENDER: f64 = 1e-5;
const H_SSIM: f64 = 1e-4;

/// The component with the largest relative error seen so far.
#[derive(Debug, Clone, Default)]
pub struct Worst {
    pub err: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub what: String,
}

impl Worst {
    fn update(&mut self, analytic: f64, numeric: f64, floor: f64, what: impl FnOnce() -> String) {
        let e = rel_err(analytic, numeric, floor);
        if e > self.err || self.what.is_empty() {
            *self = Worst { err: e, analytic, numeric, what: what() };
        }
    }
}

impl std::fmt::Display for Worst {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2e} at {} (analytic {:.6e}, numeric {:.6e})", self.err, self.what, self.analytic, self.numeric)
    }
}

/// Worst component per checked function, by name.
pub type Report = Vec<(&'static str, Worst)>;

fn param_mut(g: &mut Gaussian4D, j: usize) -> &mut f64 {
    match j {
        0..=3 => &mut g.mu4[j],
        4..=11 => {
            let q = if j < 8 { &mut g.q_l } else { &mut g.q_r };
            match j % 4 {
                0 => &mut q.w,
                1 => &mut q.x,
                2 => &mut q.y,
                _ => &mut q.z,
            }
        }
        12..=15 => &mut g.s4[j - 12],
        16..=18 => &mut g.c_dc[j - 16],
        _ => &mut g.o_logit,
    }
}

fn sample_indices(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// `Σ w ⊙ image` against [`backward`] for every cloud attribute and a
/// sample of both networks' weights. Network inputs are frozen through
/// the forward pass's anchors, matching the stop-gradient contract.
pub fn render_backward_error(gaussians: usize, size: usize, with_networks: bool, seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(gaussians, &mut rng);
    let preds = if with_networks { random_predictors(&mut rng, 0.3) } else { Predictors::default() };
    let cam = super::camera(size, rng.random_range(0.2..0.8));
    let cfg = RenderConfig { background: [0.2, 0.1, 0.3], ..RenderConfig::smooth() };
    let w: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = render(&cloud, &preds, &cam, &cfg, None).unwrap();
    let anchors = base.cache.anchors().clone();
    let grads = backward(&cloud, &preds, &base.cache, &w).unwrap();
    let loss = |c: &mega4d::GaussianCloud, p: &Predictors| {
        dot(&render(c, p, &cam, &cfg, Some(&anchors)).unwrap().image.data, &w)
    };

    let mut worst = Worst::default();
    for i in 0..cloud.len() {
        let analytic = grads.cloud.gaussian(i);
        for (j, &a) in analytic.iter().enumerate() {
            let mut c = cloud.clone();
            let mut g = c.get(i);
            let x0 = *param_mut(&mut g, j);
            let fd = central_diff(
                |x| {
                    *param_mut(&mut g, j) = x;
                    c.set(i, g);
                    loss(&c, &preds)
                },
                x0,
                H_RENDER,
            );
            worst.update(a, fd, FLOOR_RENDER, || format!("gaussian {i} param {j}"));
        }
    }
    if with_networks {
        let theta = grads.deform.as_ref().unwrap().flatten();
        for k in sample_indices(theta.len(), 80, &mut rng) {
            let mut p = preds.clone();
            let x0 = *p.deform.as_ref().unwrap().params().nth(k).unwrap();
            let fd = central_diff(
                |x| {
                    *p.deform.as_mut().unwrap().params_mut().nth(k).unwrap() = x;
                    loss(&cloud, &p)
                },
                x0,
                H_RENDER,
            );
            worst.update(theta[k], fd, FLOOR_RENDER, || format!("theta {k}"));
        }
        let phi = grads.color.as_ref().unwrap().flatten();
        for k in sample_indices(phi.len(), 80, &mut rng) {
            let mut p = preds.clone();
            let x0 = *p.color.as_ref().unwrap().phi.params().nth(k).unwrap();
            let fd = central_diff(
                |x| {
                    *p.color.as_mut().unwrap().phi.params_mut().nth(k).unwrap() = x;
                    loss(&cloud, &p)
                },
                x0,
                H_RENDER,
            );
            worst.update(phi[k], fd, FLOOR_RENDER, || format!("phi {k}"));
        }
    }
    worst
}

/// AC color predictor: gradients for the DC logits, time and every φ weight.
pub fn color_error(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..5 {
        let cp = random_predictors(&mut rng, 0.5).color.unwrap();
        let mu: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let dir = mega4d::nalgebra::Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize();
        let d_v = [dir.x, dir.y, dir.z];
        let t = rng.random_range(0.0..1.0);
        let dc: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let (rgb, cache) = cp.forward(&mu, &d_v, t, &dc).unwrap();
        let mut grad = MlpGrad::zeros_like(&cp.phi);
        let (d_dc, d_t) = cp.backward(&cache, &rgb, &w, &mut grad).unwrap();
        let f = |cp: &mega4d::color::ColorPredictor, t: f64, dc: &[f64; 3]| dot(&cp.forward(&mu, &d_v, t, dc).unwrap().0, &w);
        for k in 0..3 {
            let fd = central_diff(
                |x| {
                    let mut d = dc;
                    d[k] = x;
                    f(&cp, t, &d)
                },
                dc[k],
                H,
            );
            worst.update(d_dc[k], fd, FLOOR, || format!("c_dc {k}"));
        }
        worst.update(d_t, central_diff(|x| f(&cp, x, &dc), t, H), FLOOR, || "t".into());
        let analytic = grad.flatten();
        for (k, &a) in analytic.iter().enumerate() {
            let mut p = cp.clone();
            let x0 = *p.phi.params().nth(k).unwrap();
            let fd = central_diff(
                |x| {
                    *p.phi.params_mut().nth(k).unwrap() = x;
                    f(&p, t, &dc)
                },
                x0,
                H,
            );
            worst.update(a, fd, FLOOR, || format!("phi {k}"));
        }
    }
    worst
}

fn geometry_dot(g: &Gaussian4D, u: &GeometryGrad) -> f64 {
    dot(&g.mu4, &u.mu4) + dot(&g.q_l.to_array(), &u.q_l) + dot(&g.q_r.to_array(), &u.q_r) + dot(&g.s4, &u.s4)
}

/// Deformation network plus residual apply: gradients for the undeformed
/// attributes (network input held at the original center) and every θ
/// weight, under a random linear upstream.
pub fn deform_error(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..5 {
        let net = random_predictors(&mut rng, 0.3).deform.unwrap();
        let g = random_gaussian(&mut rng);
        let dir = mega4d::nalgebra::Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize();
        let d_v = [dir.x, dir.y, dir.z];
        let t = rng.random_range(0.0..1.0);
        let mut r = || std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let u = GeometryGrad { mu4: r(), q_l: r(), q_r: r(), s4: r() };
        let anchor = g.mu4;
        let (d, cache) = net.forward(&anchor, &d_v, t).unwrap();
        let (_, info) = apply_deformation(&g, &d);
        let mut grad = DeformGrad::zeros_like(&net);
        let gg = deform_backward(&net, &cache, &g, &d, &info, &u, &mut grad).unwrap();
        let f = |net: &mega4d::deform::DeformPredictor, g: &Gaussian4D| {
            let (d, _) = net.forward(&anchor, &d_v, t).unwrap();
            geometry_dot(&apply_deformation(g, &d).0, &u)
        };
        let analytic: Vec<f64> = gg.mu4.iter().chain(&gg.q_l).chain(&gg.q_r).chain(&gg.s4).copied().collect();
        for (j, &a) in analytic.iter().enumerate() {
            let mut h = g;
            let x0 = *param_mut(&mut h, j);
            let fd = central_diff(
                |x| {
                    *param_mut(&mut h, j) = x;
                    f(&net, &h)
                },
                x0,
                H,
            );
            worst.update(a, fd, FLOOR, || format!("attribute {j}"));
        }
        for (k, &a) in grad.flatten().iter().enumerate() {
            let mut p = net.clone();
            let x0 = *p.params().nth(k).unwrap();
            let fd = central_diff(
                |x| {
                    *p.params_mut().nth(k).unwrap() = x;
                    f(&p, &g)
                },
                x0,
                H,
            );
            worst.update(a, fd, FLOOR, || format!("theta {k}"));
        }
    }
    worst
}

/// `1 - SSIM` with respect to every pixel of the rendered image.
pub fn ssim_error(size: usize, seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_image(size, size, &mut rng);
    // a correlated target keeps SSIM away from zero
    let b = Image::from_data(
        size,
        size,
        a.data.iter().map(|v| (0.7 * v + 0.3 * rng.random_range(0.0..1.0f64)).clamp(0.0, 1.0)).collect(),
    )
    .unwrap();
    let (_, grad) = ssim_loss_grad(&a, &b).unwrap();
    let mut worst = Worst::default();
    for k in 0..a.data.len() {
        let mut img = a.clone();
        let fd = central_diff(
            |x| {
                img.data[k] = x;
                ssim_loss(&img, &b).unwrap()
            },
            a.data[k],
            H_SSIM,
        );
        worst.update(grad[k], fd, FLOOR, || format!("pixel value {k}"));
    }
    worst
}

/// Mean opacity entropy with respect to each opacity.
pub fn entropy_error(seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o: Vec<f64> = (0..50).map(|_| rng.random_range(0.01..0.99)).collect();
    let (_, grad) = opacity_entropy_loss(&o).unwrap();
    let mut worst = Worst::default();
    for k in 0..o.len() {
        let mut p = o.clone();
        let fd = central_diff(
            |x| {
                p[k] = x;
                opacity_entropy_loss(&p).unwrap().0
            },
            o[k],
            H,
        );
        worst.update(grad[k], fd, FLOOR, || format!("opacity {k}"));
    }
    worst
}

/// The full suite at the acceptance scale (≤ 50 Gaussians, 32×32).
pub fn suite() -> Report {
    vec![
        ("rasterize_backward (cloud only)", render_backward_error(50, 32, false, 1)),
        ("rasterize_backward (with networks)", render_backward_error(40, 32, true, 2)),
        ("predict_color", color_error(3)),
        ("deform_forward/backward", deform_error(4)),
        ("ssim_loss", ssim_error(32, 5)),
        ("opacity_entropy_loss", entropy_error(6)),
    ]
}
