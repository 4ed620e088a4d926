//! Datasets of `[C, H, W]` images with class labels, their on-disk
//! manifest format, and procedural generators for desk-scale experiments.

mod manifest;
mod synth;

pub use manifest::{load_dataset, read_ppm, save_dataset, write_ppm, ImageFormat};
pub use synth::{split_roles, synth_dataset, Family, SynthConfig, SynthSuite};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Validation,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Base => "base",
            Role::Validation => "validation",
            Role::Target => "target",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Role::Base),
            "validation" => Ok(Role::Validation),
            "target" => Ok(Role::Target),
            other => Err(Error::Config(format!("unknown dataset role `{other}`"))),
        }
    }
}

/// Per-channel standardization applied when images enter the model:
/// `(pixel - mean[c]) / std[c]`, with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn uniform(channels: usize, mean: f64, std: f64) -> Self {
        Normalization {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Data(format!(
                "normalization needs {channels} channel constants, got {} means and {} stds",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data(
                "normalization constants must be finite with std > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One class and its images. Pixel values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSamples {
    pub id: u32,
    pub images: Vec<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    /// `(C, H, W)`.
    pub geometry: (usize, usize, usize),
    pub normalization: Normalization,
    pub classes: Vec<ClassSamples>,
}

impl Dataset {
    /// Build a dataset, checking geometry, pixel range and class-id
    /// uniqueness.
    pub fn new(
        name: impl Into<String>,
        role: Role,
        geometry: (usize, usize, usize),
        normalization: Normalization,
        classes: Vec<ClassSamples>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            role,
            geometry,
            normalization,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.geometry;
        self.normalization.validate(c)?;
        let mut ids = std::collections::BTreeSet::new();
        for class in &self.classes {
            if !ids.insert(class.id) {
                return Err(Error::Data(format!("duplicate class id {} in {}", class.id, self.name)));
            }
            if class.images.is_empty() {
                return Err(Error::Data(format!(
                    "class {} of {} has no samples",
                    class.id, self.name
                )));
            }
            for (i, img) in class.images.iter().enumerate() {
                if img.shape() != [c, h, w] {
                    return Err(Error::Data(format!(
                        "sample {i} of class {} has shape {:?}, dataset geometry is {:?}",
                        class.id,
                        img.shape(),
                        [c, h, w]
                    )));
                }
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!(
                        "sample {i} of class {} has pixel values outside [0, 1]",
                        class.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.images.len()).collect()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// Raw `[0, 1]` image.
    pub fn image(&self, class: usize, sample: usize) -> &Tensor<f64> {
        &self.classes[class].images[sample]
    }

    /// Standardized model input at precision `F`.
    pub fn model_input<F: Real>(&self, class: usize, sample: usize) -> Tensor<F> {
        self.normalize(self.image(class, sample))
    }

    /// Apply this dataset's per-channel standardization to any `[C, H, W]` image.
    pub fn normalize<F: Real>(&self, img: &Tensor<f64>) -> Tensor<F> {
        let plane = self.geometry.1 * self.geometry.2;
        let data = img
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(ch, px)| {
                let (m, s) = (self.normalization.mean[ch], self.normalization.std[ch]);
                px.iter().map(move |&v| F::from_f64((v - m) / s))
            })
            .collect();
        Tensor::from_raw(img.shape().to_vec(), data)
    }

    /// `(class index, sample index)` of every sample, class-major.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| (0..c.images.len()).map(move |si| (ci, si)))
            .collect()
    }
}
