//! Training: initialization, the optimization loop, densification and
//! entropy-driven pruning.

use std::fmt::Write as _;

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::color::ColorPredictor;
use crate::dataset::{BoundingBox, Dataset, View};
use crate::deform::{DeformConfig, DeformPredictor};
use crate::error::{Error, Result};
use crate::gauss::{logit, rotor4, sigmoid, Gaussian4D, GaussianCloud, Quaternion};
use crate::loss::{total_loss, LossWeights};
use crate::mlp::MlpGrad;
use crate::model::Model;
use crate::optim::{adam_step, adam_step_rates, lr_schedule, AdamConfig, AdamState, LrConfig, ParamGroup};
use crate::render::{backward, participation_ratio, render, Gradients, Predictors, RenderConfig};

/// Values per Gaussian in optimizer order: mu4, q_l, q_r, s4, c_dc, o_logit.
const ROW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    pub from: usize,
    pub every: usize,
    /// Mean NDC-space positional gradient that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians whose largest spatial scale is at most this fraction of
    /// the scene extent are cloned; larger ones are split.
    pub percent_dense: f64,
    pub split_children: usize,
    pub split_scale_divisor: f64,
    pub max_gaussians: Option<usize>,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            from: 100,
            every: 100,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_children: 2,
            split_scale_divisor: 1.6,
            max_gaussians: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub count: usize,
    pub opacity: f64,
    /// Temporal standard deviation of new Gaussians.
    pub time_scale: f64,
    /// Neighbours averaged for the initial spatial scale.
    pub neighbours: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { count: 2000, opacity: 0.1, time_scale: 0.2, neighbours: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// SSIM weight λ.
    pub lambda: f64,
    /// Opacity-entropy weight κ.
    pub kappa: f64,
    pub iterations: usize,
    pub densify_until: usize,
    pub prune_every: usize,
    pub prune_opacity_threshold: f64,
    pub temporal_filter_threshold: f64,
    pub lr: LrConfig,
    pub adam: AdamConfig,
    pub weight_decay_theta: f64,
    pub densify: DensifyConfig,
    pub init: InitConfig,
    pub use_deform: bool,
    pub use_color_net: bool,
    pub deform: DeformConfig,
    pub color_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_iterations(3000)
    }
}

impl TrainConfig {
    /// Defaults with densification stopping at the midpoint.
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            lambda: 0.2,
            kappa: 5e-4,
            iterations,
            densify_until: iterations / 2,
            prune_every: 500,
            prune_opacity_threshold: 0.005,
            temporal_filter_threshold: 0.05,
            lr: LrConfig::default(),
            adam: AdamConfig::default(),
            weight_decay_theta: 1e-6,
            densify: DensifyConfig::default(),
            init: InitConfig::default(),
            use_deform: true,
            use_color_net: true,
            deform: DeformConfig::default(),
            color_hidden: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(0.0..=1.0).contains(&self.lambda) || !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("λ must lie in [0, 1] and κ ≥ 0 (got {}, {})", self.lambda, self.kappa)));
        }
        if !unit(self.prune_opacity_threshold) || !unit(self.temporal_filter_threshold) {
            return Err(Error::Config("prune and temporal thresholds must lie in (0, 1)".into()));
        }
        if self.densify_until > self.iterations {
            return Err(Error::Config(format!(
                "densify_until {} exceeds iterations {}",
                self.densify_until, self.iterations
            )));
        }
        if self.prune_every == 0 || self.densify.every == 0 || self.densify.split_children < 1 {
            return Err(Error::Config("prune/densify cadence and split children must be ≥ 1".into()));
        }
        if !(self.densify.split_scale_divisor > 0.0) || !(self.densify.percent_dense > 0.0) {
            return Err(Error::Config("split divisor and percent_dense must be positive".into()));
        }
        if self.init.count == 0 || !unit(self.init.opacity) || !(self.init.time_scale > 0.0) || self.init.neighbours == 0 {
            return Err(Error::Config("invalid initialization settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub l1: f64,
    pub ssim_loss: f64,
    pub l_opa: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub before: usize,
    pub after: usize,
    pub cloned: usize,
    pub split: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub iteration: usize,
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: usize,
    pub densify_until: usize,
    /// One record per iteration; `count` is the size after that
    /// iteration's densify/prune step.
    pub records: Vec<IterRecord>,
    pub densifications: Vec<DensifyEvent>,
    pub prunes: Vec<PruneEvent>,
    /// `(iteration, mean participation ratio)` at checkpoints.
    pub participation: Vec<(usize, f64)>,
}

impl TrainLog {
    /// Line-oriented text form, readable by [`TrainLog::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# mega4d train log");
        let _ = writeln!(s, "meta {} {}", self.iterations, self.densify_until);
        let _ = writeln!(s, "# step iteration l1 ssim_loss l_opa count");
        for r in &self.records {
            let _ = writeln!(s, "step {} {:e} {:e} {:e} {}", r.iteration, r.l1, r.ssim_loss, r.l_opa, r.count);
        }
        for d in &self.densifications {
            let _ = writeln!(s, "densify {} {} {} {} {}", d.iteration, d.before, d.after, d.cloned, d.split);
        }
        for p in &self.prunes {
            let _ = writeln!(s, "prune {} {} {}", p.iteration, p.before, p.after);
        }
        for (i, r) in &self.participation {
            let _ = writeln!(s, "participation {i} {r:e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidParameter(format!("train log line {}: '{line}'", ln + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            let u = |k: usize| f.get(k).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
            let r = |k: usize| f.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
            match (f[0], f.len()) {
                ("meta", 3) => {
                    log.iterations = u(1)?;
                    log.densify_until = u(2)?;
                }
                ("step", 6) => log.records.push(IterRecord {
                    iteration: u(1)?,
                    l1: r(2)?,
                    ssim_loss: r(3)?,
                    l_opa: r(4)?,
                    count: u(5)?,
                }),
                ("densify", 6) => log.densifications.push(DensifyEvent {
                    iteration: u(1)?,
                    before: u(2)?,
                    after: u(3)?,
                    cloned: u(4)?,
                    split: u(5)?,
                }),
                ("prune", 4) => log.prunes.push(PruneEvent { iteration: u(1)?, before: u(2)?, after: u(3)? }),
                ("participation", 3) => log.participation.push((u(1)?, r(2)?)),
                _ => return Err(bad()),
            }
        }
        Ok(log)
    }

    /// `(iteration, count)` per record.
    pub fn count_trajectory(&self) -> Vec<(usize, usize)> {
        self.records.iter().map(|r| (r.iteration, r.count)).collect()
    }

    /// Gaussian count at `densify_until` (or the last record before it).
    pub fn count_at_densify_until(&self) -> Option<usize> {
        self.records.iter().rev().find(|r| r.iteration <= self.densify_until).map(|r| r.count)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: TrainLog,
}

/// Mean NDC-space positional gradient per Gaussian since the last reset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub denom: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], denom: vec![0; n] }
    }

    /// Adds one view's screen-space gradients, converted from pixels to
    /// normalized device coordinates.
    pub fn add(&mut self, grads: &Gradients, width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..self.accum.len() {
            if grads.visible[i] {
                let [gx, gy] = grads.mean2[i];
                self.accum[i] += ((gx * sx).powi(2) + (gy * sy).powi(2)).sqrt();
                self.denom[i] += 1;
            }
        }
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.denom[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.denom[i] as f64
        }
    }
}

/// Outcome of [`densify`]: the new cloud is the kept originals followed by
/// `appended` new Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub kept: Vec<bool>,
    pub appended: usize,
}

fn max_spatial_scale(s4: &[f64; 4]) -> f64 {
    s4[0].max(s4[1]).max(s4[2]).exp()
}

/// Clones small and splits large Gaussians whose mean positional gradient
/// reaches the threshold. Split children are drawn from the parent's 4D
/// distribution with scales divided by `split_scale_divisor`; the parent
/// is removed.
pub fn densify<R: Rng>(
    cloud: &mut GaussianCloud,
    stats: &GradStats,
    extent: f64,
    cfg: &DensifyConfig,
    rng: &mut R,
) -> Result<DensifyReport> {
    let n = cloud.len();
    if stats.accum.len() != n || stats.denom.len() != n {
        return Err(Error::Dimension(format!("gradient stats cover {} of {n} Gaussians", stats.accum.len())));
    }
    let mut budget = cfg.max_gaussians.map_or(usize::MAX, |m| m.saturating_sub(n));
    let growth = cfg.split_children - 1;
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        if stats.average(i) < cfg.grad_threshold {
            continue;
        }
        let small = max_spatial_scale(&cloud.s4[i]) <= cfg.percent_dense * extent;
        let cost = if small { 1 } else { growth };
        if cost > budget {
            continue;
        }
        budget -= cost;
        if small {
            clones.push(i);
        } else {
            splits.push(i);
        }
    }
    let mut kept = vec![true; n];
    let mut added = Vec::with_capacity(clones.len() + splits.len() * cfg.split_children);
    for &i in &clones {
        added.push(cloud.get(i));
    }
    let shrink = cfg.split_scale_divisor.ln();
    for &i in &splits {
        let g = cloud.get(i);
        let rot = rotor4(g.q_l, g.q_r)?;
        for _ in 0..cfg.split_children {
            let z = Vector4::from_fn(|k, _| g.s4[k].exp() * rng.sample::<f64, _>(StandardNormal));
            let off = rot * z;
            let mut child = g;
            child.mu4 = std::array::from_fn(|k| g.mu4[k] + off[k]);
            child.s4 = g.s4.map(|s| s - shrink);
            added.push(child);
        }
        kept[i] = false;
    }
    cloud.retain_mask(&kept);
    for g in &added {
        cloud.push(*g);
    }
    Ok(DensifyReport { cloned: clones.len(), split: splits.len(), kept, appended: added.len() })
}

/// Removes Gaussians with `sigmoid(o_logit) < threshold`, preserving order.
/// Returns the keep mask.
pub fn prune(cloud: &mut GaussianCloud, threshold: f64) -> Vec<bool> {
    let keep: Vec<bool> = cloud.o_logit.iter().map(|&o| sigmoid(o) >= threshold).collect();
    cloud.retain_mask(&keep);
    keep
}

/// Random Gaussians inside `bbox`: uniform centers and times, spatial
/// scales from the mean distance to the nearest neighbours, identity
/// rotations, gray color.
pub fn initialize<R: Rng>(bbox: &BoundingBox, cfg: &InitConfig, rng: &mut R) -> GaussianCloud {
    let pts: Vec<[f64; 3]> = (0..cfg.count)
        .map(|_| std::array::from_fn(|a| rng.random_range(bbox.min[a]..bbox.max[a])))
        .collect();
    let times: Vec<f64> = (0..cfg.count).map(|_| rng.random::<f64>()).collect();
    let mut cloud = GaussianCloud::with_capacity(cfg.count);
    let k = cfg.neighbours.min(cfg.count.saturating_sub(1)).max(1);
    let fallback = bbox.extent() * 0.1;
    for (i, p) in pts.iter().enumerate() {
        let mut d: Vec<f64> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
            .collect();
        let scale = if d.is_empty() {
            fallback
        } else {
            let k = k.min(d.len());
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            (d[..k].iter().sum::<f64>() / k as f64).sqrt().max(1e-7)
        };
        cloud.push(Gaussian4D {
            mu4: [p[0], p[1], p[2], times[i]],
            q_l: Quaternion::IDENTITY,
            q_r: Quaternion::IDENTITY,
            s4: [scale.ln(), scale.ln(), scale.ln(), cfg.time_scale.ln()],
            c_dc: [0.0; 3],
            o_logit: logit(cfg.opacity),
        });
    }
    cloud
}

fn cloud_rows(cloud: &GaussianCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len() * ROW);
    for i in 0..cloud.len() {
        out.extend_from_slice(&cloud.mu4[i]);
        out.extend_from_slice(&cloud.q_l[i]);
        out.extend_from_slice(&cloud.q_r[i]);
        out.extend_from_slice(&cloud.s4[i]);
        out.extend_from_slice(&cloud.c_dc[i]);
        out.push(cloud.o_logit[i]);
    }
    out
}

fn set_cloud_rows(cloud: &mut GaussianCloud, rows: &[f64]) {
    for (i, r) in rows.chunks_exact(ROW).enumerate() {
        cloud.mu4[i].copy_from_slice(&r[0..4]);
        cloud.q_l[i].copy_from_slice(&r[4..8]);
        cloud.q_r[i].copy_from_slice(&r[8..12]);
        cloud.s4[i].copy_from_slice(&r[12..16]);
        cloud.c_dc[i].copy_from_slice(&r[16..19]);
        cloud.o_logit[i] = r[19];
    }
}

fn row_rates(it: usize, cfg: &TrainConfig, extent: f64) -> [f64; ROW] {
    let g = |grp| lr_schedule(grp, it, cfg.iterations, extent, &cfg.lr);
    let (p, r, s, c, o) = (
        g(ParamGroup::Position),
        g(ParamGroup::Rotation),
        g(ParamGroup::Scale),
        g(ParamGroup::DcColor),
        g(ParamGroup::Opacity),
    );
    [p, p, p, p, r, r, r, r, r, r, r, r, s, s, s, s, c, c, c, o]
}

fn mlp_grad_vec(g: &MlpGrad) -> Vec<f64> {
    g.flatten()
}

/// Views the training loop can use: validated cameras and matching images.
fn check_views(views: &[View]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::Empty("dataset has no views".into()));
    }
    for (k, v) in views.iter().enumerate() {
        v.camera.validate().map_err(|e| Error::Manifest(format!("view {k}: {e}")))?;
        if v.image.width != v.camera.width || v.image.height != v.camera.height {
            return Err(Error::Manifest(format!(
                "view {k}: image {}x{} does not match camera {}x{}",
                v.image.width, v.image.height, v.camera.width, v.camera.height
            )));
        }
    }
    Ok(())
}

fn mean_participation(cloud: &GaussianCloud, preds: &Predictors, view: &Camera, times: &[f64], threshold: f64) -> Result<f64> {
    if cloud.is_empty() || times.is_empty() {
        return Ok(0.0);
    }
    let r = participation_ratio(cloud, preds, view, times, threshold)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_views(&dataset.views, &dataset.manifest.bbox, dataset.manifest.background, cfg)
}

/// Optimizes a fresh model against `views`, one uniformly sampled view per
/// iteration. Deterministic for a given seed.
pub fn train_views(views: &[View], bbox: &BoundingBox, background: [f64; 3], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_views(views)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extent = bbox.extent();
    let mut cloud = initialize(bbox, &cfg.init, &mut rng);
    let mut preds = Predictors {
        color: if cfg.use_color_net { Some(ColorPredictor::new(cfg.color_hidden, &mut rng)?) } else { None },
        deform: if cfg.use_deform { Some(DeformPredictor::new(cfg.deform, &mut rng)?) } else { None },
    };
    let render_cfg = RenderConfig {
        background,
        temporal_threshold: cfg.temporal_filter_threshold,
        ..RenderConfig::default()
    };
    let mut times: Vec<f64> = views.iter().map(|v| v.camera.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let weights = LossWeights { lambda: cfg.lambda, kappa: cfg.kappa };

    let mut log = TrainLog { iterations: cfg.iterations, densify_until: cfg.densify_until, ..Default::default() };
    let mut cloud_adam = AdamState::new(cloud.len() * ROW);
    let mut color_adam = preds.color.as_ref().map(|c| AdamState::new(c.phi.param_count()));
    let mut deform_adam = preds.deform.as_ref().map(|d| AdamState::new(d.param_count()));
    let mut stats = GradStats::new(cloud.len());

    for i in 0..cfg.iterations {
        let it = i + 1;
        let view = &views[rng.random_range(0..views.len())];
        let out = render(&cloud, &preds, &view.camera, &render_cfg, None)?;
        let opacities = cloud.opacities();
        let loss = total_loss(&out.image, &view.image, &opacities, &weights)?;
        let mut grads = backward(&cloud, &preds, &out.cache, &loss.d_image)?;
        for (k, d) in loss.d_opacity.iter().enumerate() {
            let o = opacities[k];
            grads.cloud.o_logit[k] += d * o * (1.0 - o);
        }
        if it <= cfg.densify_until {
            stats.add(&grads, view.camera.width, view.camera.height);
        }

        let rates = row_rates(i, cfg, extent);
        let mut rows = cloud_rows(&cloud);
        let grad_rows: Vec<f64> = (0..cloud.len()).flat_map(|k| grads.cloud.gaussian(k)).collect();
        adam_step_rates(&mut rows, &grad_rows, &mut cloud_adam, &rates, &cfg.adam)?;
        set_cloud_rows(&mut cloud, &rows);
        if let (Some(cp), Some(st), Some(g)) = (preds.color.as_mut(), color_adam.as_mut(), grads.color.as_ref()) {
            let mut p: Vec<f64> = cp.phi.params().copied().collect();
            let lr = lr_schedule(ParamGroup::ColorNet, i, cfg.iterations, extent, &cfg.lr);
            adam_step(&mut p, &mlp_grad_vec(g), st, lr, &cfg.adam)?;
            cp.phi.params_mut().zip(p).for_each(|(d, s)| *d = s);
        }
        if let (Some(dp), Some(st), Some(g)) = (preds.deform.as_mut(), deform_adam.as_mut(), grads.deform.as_ref()) {
            let mut p: Vec<f64> = dp.params().copied().collect();
            let mut gv = g.flatten();
            for (gk, pk) in gv.iter_mut().zip(&p) {
                *gk += cfg.weight_decay_theta * pk;
            }
            let lr = lr_schedule(ParamGroup::Deform, i, cfg.iterations, extent, &cfg.lr);
            adam_step(&mut p, &gv, st, lr, &cfg.adam)?;
            dp.params_mut().zip(p).for_each(|(d, s)| *d = s);
        }

        if it < cfg.densify_until && it >= cfg.densify.from && it % cfg.densify.every == 0 {
            let before = cloud.len();
            if log::log_enabled!(log::Level::Debug) {
                let mut avg: Vec<f64> = (0..cloud.len()).map(|k| stats.average(k)).collect();
                avg.sort_by(f64::total_cmp);
                let q = |f: f64| avg[((avg.len() - 1) as f64 * f) as usize];
                log::debug!("densify {it}: grad quantiles 50% {:.2e} 90% {:.2e} 99% {:.2e} max {:.2e}", q(0.5), q(0.9), q(0.99), q(1.0));
            }
            let rep = densify(&mut cloud, &stats, extent, &cfg.densify, &mut rng)?;
            cloud_adam.retain_blocks(&rep.kept, ROW);
            cloud_adam.extend_zeros(rep.appended * ROW);
            stats = GradStats::new(cloud.len());
            log.densifications.push(DensifyEvent {
                iteration: it,
                before,
                after: cloud.len(),
                cloned: rep.cloned,
                split: rep.split,
            });
        }
        let prune_now = it >= cfg.densify_until && (it % cfg.prune_every == 0 || it == cfg.iterations);
        if prune_now {
            let before = cloud.len();
            let keep = prune(&mut cloud, cfg.prune_opacity_threshold);
            cloud_adam.retain_blocks(&keep, ROW);
            cloud.validate()?;
            log.prunes.push(PruneEvent { iteration: it, before, after: cloud.len() });
            let p = mean_participation(&cloud, &preds, &views[0].camera, &times, cfg.temporal_filter_threshold)?;
            log.participation.push((it, p));
        }
        log.records.push(IterRecord {
            iteration: it,
            l1: loss.l1,
            ssim_loss: loss.ssim_loss,
            l_opa: loss.l_opa,
            count: cloud.len(),
        });
        if it % 100 == 0 || it == cfg.iterations {
            log::info!(
                "iter {it}/{}: l1 {:.5} ssim {:.5} opa {:.5} gaussians {}",
                cfg.iterations,
                loss.l1,
                loss.ssim_loss,
                loss.l_opa,
                cloud.len()
            );
        }
    }
    Ok(TrainOutput { model: Model::new(cloud, preds), log })
}
