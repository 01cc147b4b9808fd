//! A trainable model: the Gaussian cloud plus the shared predictors, with
//! full-precision JSON storage and archive detection on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::Result;
use crate::gauss::GaussianCloud;
use crate::render::Predictors;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub predictors: Predictors,
}

impl Model {
    pub fn new(cloud: GaussianCloud, predictors: Predictors) -> Self {
        Self { cloud, predictors }
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        self.predictors.validate()
    }

    /// Writes full-precision JSON.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    /// Writes the compressed archive and returns its bytes.
    pub fn save_archive(&self, path: impl AsRef<Path>) -> Result<Vec<u8>> {
        codec::save_model(&self.cloud, &self.predictors, path)
    }

    /// Reads either format, choosing by the leading magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if codec::is_archive(&bytes) {
            let (cloud, predictors) = codec::decode(&bytes)?;
            Ok(Self { cloud, predictors })
        } else {
            let m: Model = serde_json::from_slice(&bytes)?;
            m.validate()?;
            Ok(m)
        }
    }

    /// The model as it will read back from an archive.
    pub fn rounded_fp16(&self) -> Result<Self> {
        let (cloud, predictors) = codec::round_model(&self.cloud, &self.predictors)?;
        Ok(Self { cloud, predictors })
    }
}
