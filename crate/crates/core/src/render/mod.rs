//! Differentiable CPU renderer.
//!
//! Per Gaussian: deformation → temporal slice → temporal filter → color →
//! perspective projection. Surviving splats are binned into 16×16 tiles,
//! depth sorted by `(depth, index)` and alpha composited front to back.
//! [`backward`] runs the chain rule through every stage.
//!
//! Gradients are exact for the piecewise-smooth image function: the
//! temporal filter, the `min_alpha` skip, the opacity clamp and early
//! termination are hard gates that contribute no gradient.

mod raster;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::color::{dc_color, dc_color_backward, view_direction, ColorPredictor};
use crate::deform::{apply_deformation, deform_backward, ApplyInfo, DeformCache, DeformGrad, DeformPredictor, Deformation};
use crate::error::{Error, Result};
use crate::gauss::{
    geometry_backward, sigmoid, temporal_opacity, Gaussian4D, GaussianCloud, GeometryForward, GeometryGrad, Sliced3D,
    DEFAULT_TEMPORAL_THRESHOLD,
};
use crate::image::Image;
use crate::mlp::{MlpCache, MlpGrad};

use raster::{composite_backward, composite_forward, Composite, RasterSplat, TileGrid};

/// Floor for the alpha used to size splat footprints when `min_alpha` is 0.
const FOOTPRINT_ALPHA_FLOOR: f64 = 1e-15;

/// Number of Gaussians handled per parallel work item.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub temporal_threshold: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
    pub min_transmittance: f64,
    pub dilation: f64,
    pub z_near: f64,
    pub tile_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            temporal_threshold: DEFAULT_TEMPORAL_THRESHOLD,
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.99,
            min_transmittance: 1e-4,
            dilation: 0.3,
            z_near: 0.01,
            tile_size: 16,
        }
    }
}

impl RenderConfig {
    /// No alpha skip and no early termination: the image is smooth in every
    /// parameter except at the temporal filter and the opacity clamp.
    pub fn smooth() -> Self {
        Self { min_alpha: 0.0, min_transmittance: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.temporal_threshold) {
            return Err(Error::Config("temporal threshold must lie in [0, 1)".into()));
        }
        if !(self.max_alpha > 0.0 && self.max_alpha < 1.0) {
            return Err(Error::Config("max alpha must lie in (0, 1)".into()));
        }
        if self.min_alpha < 0.0 || self.min_alpha >= self.max_alpha {
            return Err(Error::Config("min alpha must lie in [0, max_alpha)".into()));
        }
        Ok(())
    }
}

/// The shared networks. `None` disables a branch: no deformation, or
/// DC-only color.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictors {
    pub color: Option<ColorPredictor>,
    pub deform: Option<DeformPredictor>,
}

impl Predictors {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.color {
            c.validate()?;
        }
        if let Some(d) = &self.deform {
            d.validate()?;
        }
        Ok(())
    }
}

/// Stop-gradient inputs: the center fed to the deformation network and the
/// (deformed) center fed to the color network. Normally derived from the
/// cloud itself; supplying them freezes those inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub deform_mu4: Vec<[f64; 4]>,
    pub color_mu3: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2: Vector2<f64>,
    pub cov2: Matrix2<f64>,
    pub depth: f64,
    pub alpha_base: f64,
    pub rgb: [f64; 3],
}

struct Projection {
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    splat: Splat2D,
}

fn project_full(s: &Sliced3D, rgb: [f64; 3], alpha_base: f64, cam: &Camera, cfg: &RenderConfig) -> Option<Projection> {
    let p = cam.rotation * s.mu3_t + cam.translation;
    if p.z < cfg.z_near {
        return None;
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let jac = Matrix2x3::new(
        cam.fx / z, 0.0, -cam.fx * x / (z * z), //
        0.0, cam.fy / z, -cam.fy * y / (z * z),
    );
    let sigma_cam = cam.rotation * s.sigma3 * cam.rotation.transpose();
    let cov2 = jac * sigma_cam * jac.transpose() + Matrix2::identity() * cfg.dilation;
    let mean2 = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    Some(Projection {
        p_cam: p,
        jac,
        sigma_cam,
        splat: Splat2D { mean2, cov2, depth: z, alpha_base, rgb },
    })
}

/// Pixel footprint of a splat: inclusive pixel bounds of the ellipse outside
/// which its alpha is below the skip threshold, or `None` when it misses
/// the viewport or can never reach the threshold.
fn footprint(s: &Splat2D, width: usize, height: usize, cfg: &RenderConfig) -> Option<[usize; 4]> {
    let cut = cfg.min_alpha.max(FOOTPRINT_ALPHA_FLOOR);
    if s.alpha_base.min(cfg.max_alpha) < cut {
        return None;
    }
    let r = (2.0 * (s.alpha_base / cut).ln()).max(0.0).sqrt();
    let ex = r * s.cov2[(0, 0)].sqrt();
    let ey = r * s.cov2[(1, 1)].sqrt();
    // pixel centers sit at integer + 0.5
    let x0 = (s.mean2.x - ex - 0.5).ceil();
    let x1 = (s.mean2.x + ex - 0.5).floor();
    let y0 = (s.mean2.y - ey - 0.5).ceil();
    let y1 = (s.mean2.y + ey - 0.5).floor();
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
        return None;
    }
    if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 || x1 < x0 || y1 < y0 {
        return None;
    }
    Some([
        x0.max(0.0) as usize,
        y0.max(0.0) as usize,
        x1.min((width - 1) as f64) as usize,
        y1.min((height - 1) as f64) as usize,
    ])
}

/// Projects a sliced Gaussian; `None` when culled (behind the near plane or
/// entirely outside the viewport).
pub fn project(s: &Sliced3D, rgb: [f64; 3], alpha_base: f64, cam: &Camera, cfg: &RenderConfig) -> Option<Splat2D> {
    let proj = project_full(s, rgb, alpha_base, cam, cfg)?;
    footprint(&proj.splat, cam.width, cam.height, cfg)?;
    Some(proj.splat)
}

/// Everything computed for one Gaussian before rasterization.
struct Stage1 {
    deform: Option<(Deformation, DeformCache, ApplyInfo)>,
    deformed: Gaussian4D,
    geom: GeometryForward,
    view_fallback: bool,
}

struct Visible {
    index: usize,
    stage: Stage1,
    color_cache: Option<MlpCache>,
    opacity: f64,
    proj: Projection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub total: usize,
    pub after_filter: usize,
    pub visible: usize,
    pub quaternion_fallbacks: usize,
    pub view_fallbacks: usize,
}

/// Forward intermediates needed by [`backward`].
pub struct RenderCache {
    cfg: RenderConfig,
    cam: Camera,
    count: usize,
    has_color: bool,
    has_deform: bool,
    visible: Vec<Visible>,
    splats: Vec<RasterSplat>,
    grid: TileGrid,
    comp: Composite,
    anchors: Anchors,
    pub stats: RenderStats,
}

impl RenderCache {
    pub fn anchors(&self) -> &Anchors {
        &self.anchors
    }

    /// Composited splats with their Gaussian index, in binning order.
    pub fn splats(&self) -> Vec<(usize, Splat2D)> {
        self.visible.iter().map(|v| (v.index, v.proj.splat)).collect()
    }

    pub fn final_transmittance(&self) -> &[f64] {
        &self.comp.final_t
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }
}

pub struct Rendered {
    pub image: Image,
    pub cache: RenderCache,
}

fn stage1(
    g: &Gaussian4D,
    index: usize,
    preds: &Predictors,
    cam: &Camera,
    anchors: Option<&Anchors>,
) -> Result<Stage1> {
    let p_v = cam.center();
    let axis = cam.forward();
    let mut view_fallback = false;
    let (deform, deformed) = match &preds.deform {
        Some(net) => {
            let anchor = anchors.map_or(g.mu4, |a| a.deform_mu4[index]);
            let (d_v, fb) = view_direction(&Vector3::new(anchor[0], anchor[1], anchor[2]), &p_v, &axis);
            view_fallback |= fb;
            let (d, cache) = net.forward(&anchor, &[d_v.x, d_v.y, d_v.z], cam.time)?;
            let (out, info) = apply_deformation(g, &d);
            (Some((d, cache, info)), out)
        }
        None => (None, *g),
    };
    let geom = GeometryForward::new(&deformed, cam.time)
        .map_err(|e| Error::InvalidParameter(format!("gaussian {index}: {e}")))?;
    Ok(Stage1 { deform, deformed, geom, view_fallback })
}

/// Renders `cloud` from `cam`, keeping everything needed for [`backward`].
pub fn render(
    cloud: &GaussianCloud,
    preds: &Predictors,
    cam: &Camera,
    cfg: &RenderConfig,
    anchors: Option<&Anchors>,
) -> Result<Rendered> {
    cloud.validate()?;
    cfg.validate()?;
    cam.validate()?;
    preds.validate()?;
    if let Some(a) = anchors {
        if a.deform_mu4.len() != cloud.len() || a.color_mu3.len() != cloud.len() {
            return Err(Error::Dimension("anchors do not match the cloud size".into()));
        }
    }
    let n = cloud.len();
    let p_v = cam.center();
    let axis = cam.forward();

    let chunks: Vec<Result<Vec<(Option<Visible>, [f64; 3], bool, usize)>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::with_capacity(CHUNK);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let g = cloud.get(i);
                let st = stage1(&g, i, preds, cam, anchors)?;
                let color_anchor = anchors.map_or(
                    [st.deformed.mu4[0], st.deformed.mu4[1], st.deformed.mu4[2]],
                    |a| a.color_mu3[i],
                );
                let fallbacks = st.deform.as_ref().map_or(0, |(_, _, info)| info.fallbacks());
                let sigma_t = st.geom.sliced.temporal_opacity;
                if sigma_t <= cfg.temporal_threshold {
                    out.push((None, color_anchor, false, fallbacks));
                    continue;
                }
                let mut view_fb = st.view_fallback;
                let (rgb, color_cache) = match &preds.color {
                    Some(cp) => {
                        let mu = Vector3::from(color_anchor);
                        let (d_v, fb) = view_direction(&mu, &p_v, &axis);
                        view_fb |= fb;
                        let (rgb, cache) = cp.forward(&color_anchor, &[d_v.x, d_v.y, d_v.z], cam.time, &g.c_dc)?;
                        (rgb, Some(cache))
                    }
                    None => (dc_color(&g.c_dc), None),
                };
                let opacity = sigmoid(g.o_logit);
                let vis = project_full(&st.geom.sliced, rgb, opacity * sigma_t, cam, cfg).map(|proj| Visible {
                    index: i,
                    stage: st,
                    color_cache,
                    opacity,
                    proj,
                });
                out.push((vis, color_anchor, view_fb, fallbacks));
            }
            Ok(out)
        })
        .collect();

    let mut stats = RenderStats { total: n, ..Default::default() };
    let mut visible = Vec::new();
    let mut color_mu3 = Vec::with_capacity(n);
    let mut splats = Vec::new();
    for chunk in chunks {
        for (vis, anchor, view_fb, fallbacks) in chunk? {
            color_mu3.push(anchor);
            stats.view_fallbacks += view_fb as usize;
            stats.quaternion_fallbacks += fallbacks;
            let Some(v) = vis else { continue };
            stats.after_filter += 1;
            let s = &v.proj.splat;
            let Some(bounds) = footprint(s, cam.width, cam.height, cfg) else {
                continue;
            };
            let inv = s.cov2.try_inverse().ok_or_else(|| {
                Error::InvalidParameter(format!("gaussian {}: singular 2D covariance", v.index))
            })?;
            splats.push(RasterSplat {
                mean: [s.mean2.x, s.mean2.y],
                conic: [inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]],
                alpha_base: s.alpha_base,
                rgb: s.rgb,
                depth: s.depth,
                index: v.index,
                bounds,
            });
            visible.push(v);
        }
    }
    stats.visible = visible.len();

    let grid = TileGrid::build(&splats, cam.width, cam.height, cfg.tile_size);
    let comp = composite_forward(&splats, &grid, cam.width, cam.height, cfg);
    let image = Image::from_data(cam.width, cam.height, comp.color.clone())?;
    let anchors = match anchors {
        Some(a) => a.clone(),
        None => Anchors { deform_mu4: cloud.mu4.clone(), color_mu3 },
    };
    Ok(Rendered {
        image,
        cache: RenderCache {
            cfg: *cfg,
            cam: *cam,
            count: n,
            has_color: preds.color.is_some(),
            has_deform: preds.deform.is_some(),
            visible,
            splats,
            grid,
            comp,
            anchors,
            stats,
        },
    })
}

/// Forward render without keeping the cache.
pub fn rasterize(cloud: &GaussianCloud, preds: &Predictors, cam: &Camera, cfg: &RenderConfig) -> Result<Image> {
    Ok(render(cloud, preds, cam, cfg, None)?.image)
}

/// Per-attribute gradients for every Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrad {
    pub mu4: Vec<[f64; 4]>,
    pub q_l: Vec<[f64; 4]>,
    pub q_r: Vec<[f64; 4]>,
    pub s4: Vec<[f64; 4]>,
    pub c_dc: Vec<[f64; 3]>,
    pub o_logit: Vec<f64>,
}

impl CloudGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu4: vec![[0.0; 4]; n],
            q_l: vec![[0.0; 4]; n],
            q_r: vec![[0.0; 4]; n],
            s4: vec![[0.0; 4]; n],
            c_dc: vec![[0.0; 3]; n],
            o_logit: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu4.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu4.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.mu4.iter().chain(&self.q_l).chain(&self.q_r).chain(&self.s4).all(|a| a.iter().all(|&x| x == 0.0))
            && self.c_dc.iter().all(|a| a.iter().all(|&x| x == 0.0))
            && self.o_logit.iter().all(|&x| x == 0.0)
    }

    /// The 20 per-Gaussian gradients in storage order
    /// (mu4, q_l, q_r, s4, c_dc, o_logit).
    pub fn gaussian(&self, i: usize) -> [f64; 20] {
        let mut out = [0.0; 20];
        out[0..4].copy_from_slice(&self.mu4[i]);
        out[4..8].copy_from_slice(&self.q_l[i]);
        out[8..12].copy_from_slice(&self.q_r[i]);
        out[12..16].copy_from_slice(&self.s4[i]);
        out[16..19].copy_from_slice(&self.c_dc[i]);
        out[19] = self.o_logit[i];
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub cloud: CloudGrad,
    pub color: Option<MlpGrad>,
    pub deform: Option<DeformGrad>,
    /// `dL/d mean2` in pixel units per Gaussian (0 when not rendered).
    pub mean2: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

struct GaussGrad {
    index: usize,
    geometry: GeometryGrad,
    c_dc: [f64; 3],
    o_logit: f64,
    mean2: [f64; 2],
}

/// Chain rule from `dL/dImage` to every Gaussian attribute and both
/// networks. Gaussians removed by the temporal filter or culled get zero.
pub fn backward(
    cloud: &GaussianCloud,
    preds: &Predictors,
    cache: &RenderCache,
    d_image: &[f64],
) -> Result<Gradients> {
    if cache.count != cloud.len()
        || cache.has_color != preds.color.is_some()
        || cache.has_deform != preds.deform.is_some()
    {
        return Err(Error::State("render cache does not belong to this cloud/predictor set".into()));
    }
    let (w, h) = (cache.cam.width, cache.cam.height);
    if d_image.len() != w * h * 3 {
        return Err(Error::Dimension(format!("image gradient has {} values, expected {}", d_image.len(), w * h * 3)));
    }
    let cfg = &cache.cfg;
    let cam = &cache.cam;
    let splat_grads = composite_backward(&cache.splats, &cache.grid, &cache.comp, d_image, w, h, cfg);

    let nv = cache.visible.len();
    let chunks: Vec<Result<(Vec<GaussGrad>, Option<MlpGrad>, Option<DeformGrad>)>> = (0..nv.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut color_grad = preds.color.as_ref().map(|cp| MlpGrad::zeros_like(&cp.phi));
            let mut deform_grad = preds.deform.as_ref().map(DeformGrad::zeros_like);
            let mut out = Vec::with_capacity(CHUNK);
            for k in c * CHUNK..((c + 1) * CHUNK).min(nv) {
                let v = &cache.visible[k];
                let sg = &splat_grads[k];
                let g = cloud.get(v.index);
                let splat = &v.proj.splat;

                // conic = cov2⁻¹
                let conic = Matrix2::new(cache.splats[k].conic[0], cache.splats[k].conic[1], cache.splats[k].conic[1], cache.splats[k].conic[2]);
                let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
                let g_cov2 = -(conic * g_conic * conic);

                // cov2 = J M Jᵀ + dilation
                let jac = &v.proj.jac;
                let m = &v.proj.sigma_cam;
                let g_m = jac.transpose() * g_cov2 * jac;
                let g_jac = g_cov2 * jac * m.transpose() + g_cov2.transpose() * jac * m;
                let g_sigma3 = cam.rotation.transpose() * g_m * cam.rotation;

                let p = &v.proj.p_cam;
                let (x, y, z) = (p.x, p.y, p.z);
                let (fx, fy) = (cam.fx, cam.fy);
                let z2 = z * z;
                let z3 = z2 * z;
                let mut g_p = Vector3::new(
                    sg.mean[0] * fx / z,
                    sg.mean[1] * fy / z,
                    -sg.mean[0] * fx * x / z2 - sg.mean[1] * fy * y / z2,
                );
                g_p.x += g_jac[(0, 2)] * (-fx / z2);
                g_p.y += g_jac[(1, 2)] * (-fy / z2);
                g_p.z += g_jac[(0, 0)] * (-fx / z2)
                    + g_jac[(1, 1)] * (-fy / z2)
                    + g_jac[(0, 2)] * (2.0 * fx * x / z3)
                    + g_jac[(1, 2)] * (2.0 * fy * y / z3);
                let g_mu3 = cam.rotation.transpose() * g_p;

                let sigma_t = v.stage.geom.sliced.temporal_opacity;
                let g_sigma_t = sg.alpha_base * v.opacity;
                let g_o_logit = sg.alpha_base * sigma_t * v.opacity * (1.0 - v.opacity);

                let g_dc = match (&preds.color, &v.color_cache, &mut color_grad) {
                    (Some(cp), Some(cc), Some(cg)) => cp.backward(cc, &splat.rgb, &sg.rgb, cg)?.0,
                    _ => dc_color_backward(&splat.rgb, &sg.rgb),
                };

                let mut geometry = geometry_backward(&v.stage.geom, &g_mu3, &g_sigma3, g_sigma_t);
                if let (Some(net), Some((d, dc, info)), Some(dg)) = (&preds.deform, &v.stage.deform, &mut deform_grad) {
                    geometry = deform_backward(net, dc, &g, d, info, &geometry, dg)?;
                }
                out.push(GaussGrad {
                    index: v.index,
                    geometry,
                    c_dc: g_dc,
                    o_logit: g_o_logit,
                    mean2: sg.mean,
                });
            }
            Ok((out, color_grad, deform_grad))
        })
        .collect();

    let n = cloud.len();
    let mut grads = Gradients {
        cloud: CloudGrad::zeros(n),
        color: preds.color.as_ref().map(|cp| MlpGrad::zeros_like(&cp.phi)),
        deform: preds.deform.as_ref().map(DeformGrad::zeros_like),
        mean2: vec![[0.0; 2]; n],
        visible: vec![false; n],
    };
    for chunk in chunks {
        let (items, cg, dg) = chunk?;
        for it in items {
            let i = it.index;
            grads.cloud.mu4[i] = it.geometry.mu4;
            grads.cloud.q_l[i] = it.geometry.q_l;
            grads.cloud.q_r[i] = it.geometry.q_r;
            grads.cloud.s4[i] = it.geometry.s4;
            grads.cloud.c_dc[i] = it.c_dc;
            grads.cloud.o_logit[i] = it.o_logit;
            grads.mean2[i] = it.mean2;
            grads.visible[i] = true;
        }
        if let (Some(acc), Some(cg)) = (&mut grads.color, cg) {
            acc.add_assign(&cg);
        }
        if let (Some(acc), Some(dg)) = (&mut grads.deform, dg) {
            acc.add_assign(&dg);
        }
    }
    Ok(grads)
}

/// Fraction of Gaussians whose (deformed, when enabled) temporal opacity
/// exceeds `threshold` at each time. `view` supplies the camera center for
/// the deformation network.
pub fn participation_ratio(
    cloud: &GaussianCloud,
    preds: &Predictors,
    view: &Camera,
    times: &[f64],
    threshold: f64,
) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::Empty("participation ratio of an empty cloud".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} outside [0, 1)")));
    }
    times
        .iter()
        .map(|&t| {
            let cam = view.with_time(t);
            let mut count = 0usize;
            for i in 0..cloud.len() {
                let g = cloud.get(i);
                let sigma = match preds.deform {
                    Some(_) => stage1(&g, i, preds, &cam, None)?.geom.sliced.temporal_opacity,
                    None => temporal_opacity(&g, t)?,
                };
                if sigma > threshold {
                    count += 1;
                }
            }
            Ok(count as f64 / cloud.len() as f64)
        })
        .collect()
}
