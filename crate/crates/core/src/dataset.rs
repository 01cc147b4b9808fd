//! Multi-view video datasets on disk: a `cameras.json` manifest plus one
//! binary PPM per (camera, time) frame.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_NAME: &str = "cameras.json";

/// One physical camera of the rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub intrinsics: Intrinsics,
    /// Row-major 3×4 world-to-camera `[R | t]`.
    pub world_to_camera: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub camera: usize,
    pub time: f64,
    /// Path relative to the dataset directory.
    pub image: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    /// Half the diagonal length.
    pub fn extent(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).powi(2)).sum::<f64>().sqrt() / 2.0
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cameras: Vec<RigCamera>,
    pub frames: Vec<FrameEntry>,
    pub bbox: BoundingBox,
    pub background: [f64; 3],
    /// Number of distinct time samples.
    pub frame_count: usize,
}

impl Manifest {
    /// Structural checks that do not touch the images.
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.frames.is_empty() {
            return Err(Error::Manifest("manifest lists no cameras or no frames".into()));
        }
        for a in 0..3 {
            if !(self.bbox.min[a] < self.bbox.max[a]) {
                return Err(Error::Manifest(format!("bbox axis {a} is empty")));
            }
        }
        for (i, c) in self.cameras.iter().enumerate() {
            Camera::from_parts(c.intrinsics, &c.world_to_camera, 0.0)
                .map_err(|e| Error::Manifest(format!("camera {i}: {e}")))?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.camera >= self.cameras.len() {
                return Err(Error::Manifest(format!("frame {i} references missing camera {}", f.camera)));
            }
            if !(0.0..=1.0).contains(&f.time) {
                return Err(Error::Manifest(format!("frame {i} time {} outside [0, 1]", f.time)));
            }
        }
        Ok(())
    }

    pub fn camera(&self, index: usize, time: f64) -> Result<Camera> {
        let c = self
            .cameras
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("camera {index} not in manifest ({} cameras)", self.cameras.len())))?;
        Camera::from_parts(c.intrinsics, &c.world_to_camera, time)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::write(dir.as_ref().join(MANIFEST_NAME), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A training/evaluation view: the posed camera and its reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub camera_index: usize,
    pub image: Image,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub views: Vec<View>,
}

impl Dataset {
    /// Loads the manifest and every frame, checking image sizes.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(&root)?;
        let mut views = Vec::with_capacity(manifest.frames.len());
        for f in &manifest.frames {
            let camera = manifest.camera(f.camera, f.time)?;
            let path = root.join(&f.image);
            if !path.is_file() {
                return Err(Error::Manifest(format!("frame image {} does not exist", path.display())));
            }
            let image = Image::read_ppm(&path)?;
            if image.width != camera.width || image.height != camera.height {
                return Err(Error::Manifest(format!(
                    "{} is {}x{} but camera {} is {}x{}",
                    f.image, image.width, image.height, f.camera, camera.width, camera.height
                )));
            }
            views.push(View { camera, camera_index: f.camera, image, name: f.image.clone() });
        }
        Ok(Self { root, manifest, views })
    }

    /// Distinct frame times in ascending order.
    pub fn times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.manifest.frames.iter().map(|f| f.time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}
