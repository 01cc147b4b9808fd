//! Procedural dynamic scenes: a ground-truth cloud of moving, appearing and
//! vanishing blobs, rendered from a ring of cameras.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::codec::round_model;
use crate::dataset::{BoundingBox, FrameEntry, Manifest, RigCamera};
use crate::error::{Error, Result};
use crate::gauss::{logit, Gaussian4D, GaussianCloud};
use crate::model::Model;
use crate::render::{rasterize, Predictors, RenderConfig};

pub const GROUND_TRUTH_NAME: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub cameras: usize,
    pub frames: usize,
    pub resolution: usize,
    pub gaussians: usize,
    /// Fraction of blobs that exist only for part of the sequence.
    pub transient_fraction: f64,
    pub max_speed: f64,
    pub orbit_radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub half_size: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cameras: 3,
            frames: 8,
            resolution: 64,
            gaussians: 30,
            transient_fraction: 0.25,
            max_speed: 0.5,
            orbit_radius: 3.5,
            elevation_deg: 20.0,
            fov_deg: 45.0,
            half_size: 1.0,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Parses `orbit-<C>cam-<F>frames-<R>px`.
    pub fn preset(name: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown preset '{name}' (expected orbit-<C>cam-<F>frames-<R>px)"));
        let parts: Vec<&str> = name.split('-').collect();
        if parts.len() != 4 || parts[0] != "orbit" {
            return Err(bad());
        }
        let num = |s: &str, suffix: &str| -> Result<usize> {
            s.strip_suffix(suffix).and_then(|v| v.parse().ok()).filter(|&v| v > 0).ok_or_else(bad)
        };
        Ok(Self {
            cameras: num(parts[1], "cam")?,
            frames: num(parts[2], "frames")?,
            resolution: num(parts[3], "px")?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 || self.frames == 0 || self.resolution < 11 || self.gaussians == 0 {
            return Err(Error::Config("synth needs ≥1 camera, ≥1 frame, ≥1 blob and ≥11 px".into()));
        }
        if !(0.0..=1.0).contains(&self.transient_fraction) || self.orbit_radius <= self.half_size * 3f64.sqrt() {
            return Err(Error::Config("transient fraction outside [0, 1] or cameras inside the scene box".into()));
        }
        if !(1.0..179.0).contains(&self.fov_deg) {
            return Err(Error::Config(format!("field of view {} out of range", self.fov_deg)));
        }
        Ok(())
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox { min: [-self.half_size; 3], max: [self.half_size; 3] }
    }

    /// Frame times evenly spanning [0, 1].
    pub fn times(&self) -> Vec<f64> {
        if self.frames == 1 {
            return vec![0.5];
        }
        (0..self.frames).map(|k| k as f64 / (self.frames - 1) as f64).collect()
    }

    /// Ring of cameras around the origin at a fixed elevation.
    pub fn rig(&self) -> Result<Vec<Camera>> {
        let f = 0.5 * self.resolution as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        let el = self.elevation_deg.to_radians();
        (0..self.cameras)
            .map(|c| {
                let az = std::f64::consts::TAU * c as f64 / self.cameras as f64 + 0.3;
                let eye = Vector3::new(az.cos() * el.cos(), el.sin(), az.sin() * el.cos()) * self.orbit_radius;
                Camera::look_at(eye, Vector3::zeros(), Vector3::y(), f, f, self.resolution, self.resolution, 0.0)
            })
            .collect()
    }
}

/// A blob with spatial covariance `spatial`, temporal std `tau`, temporal
/// center `mu_t` and velocity `v`:
/// `Σ4 = [[S + τ² v vᵀ, τ² v], [τ² vᵀ, τ²]]`, so the slice at `t` is centered
/// at `μ3 + (t - μ_t) v` with covariance `S`.
pub fn moving_blob(
    mu3: Vector3<f64>,
    mu_t: f64,
    spatial: &Matrix3<f64>,
    tau: f64,
    v: Vector3<f64>,
    c_dc: [f64; 3],
    o_logit: f64,
) -> Result<Gaussian4D> {
    let tau2 = tau * tau;
    let mut sigma = Matrix4::zeros();
    sigma.fixed_view_mut::<3, 3>(0, 0).copy_from(&(spatial + v * v.transpose() * tau2));
    for k in 0..3 {
        sigma[(k, 3)] = tau2 * v[k];
        sigma[(3, k)] = tau2 * v[k];
    }
    sigma[(3, 3)] = tau2;
    Gaussian4D::from_covariance([mu3.x, mu3.y, mu3.z, mu_t], &sigma, c_dc, o_logit)
}

/// The seeded ground-truth cloud.
pub fn ground_truth(cfg: &SynthConfig) -> Result<GaussianCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let transient = (cfg.gaussians as f64 * cfg.transient_fraction).round() as usize;
    let reach = 0.65 * cfg.half_size;
    let mut cloud = GaussianCloud::with_capacity(cfg.gaussians);
    for i in 0..cfg.gaussians {
        let is_transient = i >= cfg.gaussians - transient;
        let mu3 = Vector3::from_fn(|_, _| rng.random_range(-reach..reach));
        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let rot = Rotation3::from_scaled_axis(axis.normalize() * angle);
        let scales = Vector3::from_fn(|_, _| rng.random_range(0.06..0.18) * cfg.half_size);
        let spatial = rot.matrix() * Matrix3::from_diagonal(&scales.component_mul(&scales)) * rot.matrix().transpose();
        let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize();
        let speed = rng.random_range(0.0..cfg.max_speed) * cfg.half_size;
        let (mu_t, tau) = if is_transient {
            (rng.random_range(0.15..0.85), rng.random_range(0.1..0.18))
        } else {
            (0.5, rng.random_range(1.0..2.0))
        };
        let rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.95));
        let opacity = rng.random_range(0.75..0.95);
        cloud.push(moving_blob(mu3, mu_t, &spatial, tau, dir * speed, rgb.map(logit), logit(opacity))?);
    }
    Ok(cloud)
}

/// Writes `cameras.json`, one PPM per (camera, time) and the ground-truth
/// model (rounded to binary16) to `dir`. Returns the manifest.
pub fn synth(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("frames"))?;
    let (cloud, preds) = round_model(&ground_truth(cfg)?, &Predictors::default())?;
    let rig = cfg.rig()?;
    let render_cfg = RenderConfig { background: cfg.background, ..RenderConfig::default() };
    let mut frames = Vec::new();
    for (k, &t) in cfg.times().iter().enumerate() {
        for (c, cam) in rig.iter().enumerate() {
            let image = rasterize(&cloud, &preds, &cam.with_time(t), &render_cfg)?;
            let name = format!("frames/cam{c}_t{k:03}.ppm");
            image.write_ppm(dir.join(&name))?;
            frames.push(FrameEntry { camera: c, time: t, image: name });
        }
    }
    let manifest = Manifest {
        cameras: rig
            .iter()
            .map(|c| RigCamera { intrinsics: c.intrinsics(), world_to_camera: c.world_to_camera_rows().to_vec() })
            .collect(),
        frames,
        bbox: cfg.bbox(),
        background: cfg.background,
        frame_count: cfg.frames,
    };
    manifest.save(dir)?;
    Model::new(cloud, preds).save_json(dir.join(GROUND_TRUTH_NAME))?;
    Ok(manifest)
}
