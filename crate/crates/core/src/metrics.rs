//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{ssim, SsimParams};

/// `10·log10(range² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, range: f64) -> Result<f64> {
    a.same_shape(b)?;
    if !(range > 0.0) {
        return Err(Error::InvalidParameter(format!("PSNR range must be positive, got {range}")));
    }
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DssimVariant {
    /// Data range 1.
    Range1,
    /// Data range 2.
    Range2,
}

impl DssimVariant {
    pub fn data_range(self) -> f64 {
        match self {
            DssimVariant::Range1 => 1.0,
            DssimVariant::Range2 => 2.0,
        }
    }
}

/// `(1 - SSIM) / 2` with the variant's data range.
pub fn dssim(a: &Image, b: &Image, variant: DssimVariant) -> Result<f64> {
    let s = ssim(a, b, &SsimParams::with_range(variant.data_range()))?;
    Ok(((1.0 - s) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub image: String,
    /// `None` when the images are identical (infinite PSNR).
    pub psnr: Option<f64>,
    pub dssim1: f64,
    pub dssim2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    /// Mean over finite frames; `None` when every frame is identical.
    pub mean_psnr: Option<f64>,
    pub infinite_psnr_frames: usize,
    pub mean_dssim1: f64,
    pub mean_dssim2: f64,
    /// Formula used for DSSIM.
    pub dssim_definition: String,
}

impl MetricsReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let finite: Vec<f64> = frames.iter().filter_map(|f| f.psnr).collect();
        let n = frames.len().max(1) as f64;
        Self {
            mean_psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            infinite_psnr_frames: frames.len() - finite.len(),
            mean_dssim1: frames.iter().map(|f| f.dssim1).sum::<f64>() / n,
            mean_dssim2: frames.iter().map(|f| f.dssim2).sum::<f64>() / n,
            dssim_definition: "(1 - SSIM) / 2".into(),
            frames,
        }
    }
}

/// Metrics of one rendered/reference pair.
pub fn frame_metrics(name: &str, rendered: &Image, reference: &Image) -> Result<FrameMetrics> {
    let p = psnr(rendered, reference, 1.0)?;
    Ok(FrameMetrics {
        image: name.to_string(),
        psnr: p.is_finite().then_some(p),
        dssim1: dssim(rendered, reference, DssimVariant::Range1)?,
        dssim2: dssim(rendered, reference, DssimVariant::Range2)?,
    })
}
