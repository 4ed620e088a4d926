use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-episode top-1 accuracies with their mean and 95% confidence
/// half-width `1.96 * s / sqrt(n)`, `s` being the sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracies: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub half_width: f64,
}

impl AccuracyReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Contract("accuracy report needs at least one episode".into()));
        }
        if let Some(bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Contract(format!("accuracy {bad} outside [0, 1]")));
        }
        let n = accuracies.len();
        // shifted by the first entry so identical accuracies give exactly zero spread
        let shift = accuracies[0];
        let offset = accuracies.iter().map(|a| a - shift).sum::<f64>() / n as f64;
        let mean = shift + offset;
        let std = if n > 1 {
            (accuracies.iter().map(|a| (a - shift - offset).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(AccuracyReport {
            half_width: 1.96 * std / (n as f64).sqrt(),
            accuracies,
            n,
            mean,
            std,
        })
    }

    /// `mean ± half_width` in percent.
    pub fn display_percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.half_width)
    }
}
