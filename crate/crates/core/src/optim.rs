//! Adam and the per-group learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// First/second moments and the shared step counter of one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Appends `count` zeroed slots.
    pub fn extend_zeros(&mut self, count: usize) {
        self.m.resize(self.m.len() + count, 0.0);
        self.v.resize(self.v.len() + count, 0.0);
    }

    /// Copies slots `[from, from + count)` to the end.
    pub fn extend_from_within(&mut self, from: usize, count: usize) {
        self.m.extend_from_within(from..from + count);
        self.v.extend_from_within(from..from + count);
    }

    /// Keeps blocks of `stride` slots whose mask entry is true.
    pub fn retain_blocks(&mut self, keep: &[bool], stride: usize) {
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (b, &k) in keep.iter().enumerate() {
                if k {
                    out.extend_from_slice(&buf[b * stride..(b + 1) * stride]);
                }
            }
            *buf = out;
        }
    }
}

/// One bias-corrected Adam update with a single learning rate.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    adam_step_rates(params, grads, state, &[lr], cfg)
}

/// Adam update where slot `j` uses `lrs[j % lrs.len()]`, for interleaved
/// parameter layouts with per-column rates.
pub fn adam_step_rates(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lrs: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if lrs.is_empty() || params.len() % lrs.len() != 0 {
        return Err(Error::Dimension(format!("adam: {} rates for {} params", lrs.len(), params.len())));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let stride = lrs.len();
    for (j, ((p, &g), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lrs[j % stride] * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Spatial and temporal means.
    Position,
    Rotation,
    Scale,
    DcColor,
    Opacity,
    /// Deformation network θ.
    Deform,
    /// AC color network φ.
    ColorNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    /// Initial/final position rate, multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub dc_color: f64,
    pub opacity: f64,
    pub deform_init: f64,
    pub deform_final: f64,
    pub color_net: f64,
    pub color_warmup: usize,
    /// Decay points on the reference schedule, rescaled to the run length.
    pub color_milestones: Vec<usize>,
    pub color_decay: f64,
    pub reference_iterations: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            dc_color: 2.5e-3,
            opacity: 5e-2,
            deform_init: 8e-4,
            deform_final: 1.6e-6,
            color_net: 0.01,
            color_warmup: 100,
            color_milestones: vec![5000, 15000, 25000],
            color_decay: 3.0,
            reference_iterations: 30000,
        }
    }
}

fn log_lerp(a: f64, b: f64, frac: f64) -> f64 {
    a * (b / a).powf(frac)
}

/// Learning rate of `group` at `iteration` of a `total`-iteration run.
/// `extent` scales the position group.
pub fn lr_schedule(group: ParamGroup, iteration: usize, total: usize, extent: f64, cfg: &LrConfig) -> f64 {
    let frac = if total == 0 { 0.0 } else { (iteration.min(total) as f64) / total as f64 };
    match group {
        ParamGroup::Position => log_lerp(cfg.position_init * extent, cfg.position_final * extent, frac),
        ParamGroup::Rotation => cfg.rotation,
        ParamGroup::Scale => cfg.scale,
        ParamGroup::DcColor => cfg.dc_color,
        ParamGroup::Opacity => cfg.opacity,
        ParamGroup::Deform => log_lerp(cfg.deform_init, cfg.deform_final, frac),
        ParamGroup::ColorNet => {
            if iteration < cfg.color_warmup {
                return cfg.color_net * iteration as f64 / cfg.color_warmup as f64;
            }
            let scale = total as f64 / cfg.reference_iterations.max(1) as f64;
            let passed = cfg
                .color_milestones
                .iter()
                .filter(|&&m| iteration as f64 >= (m as f64 * scale).round())
                .count();
            cfg.color_net / cfg.color_decay.powi(passed as i32)
        }
    }
}
