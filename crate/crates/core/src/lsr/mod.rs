//! Latent space reservation: rotated copies of episode classes as extra
//! classes at the input level, and pseudo-classes sampled in embedding space.

mod pseudo;

pub use pseudo::{generate_pseudo_classes, merge_pseudo, save_pseudo_batch, PseudoClassBatch};

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, EpisodeClass, EpisodeItem};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which training episodes receive pseudo-classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PnSchedule {
    /// The first `pn_episodes` episodes.
    #[default]
    First,
    /// `pn_episodes` episodes spread evenly over the run.
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsrConfig {
    /// Standard deviation of pseudo-member perturbations, raw coordinates.
    pub epsilon: f64,
    /// Pseudo-classes per augmented episode.
    pub n0: usize,
    pub pn_episodes: usize,
    pub pn_schedule: PnSchedule,
    /// Rotation angles in degrees, each one of 90, 180, 270.
    pub sst_rotations: Vec<u16>,
    /// Minimum cosine distance between a pseudo-prototype and every base prototype.
    pub min_sep: f64,
    pub members_per_pseudo: usize,
    /// Rejection-sampling attempts per pseudo-class.
    pub max_attempts: usize,
}

impl Default for LsrConfig {
    fn default() -> Self {
        LsrConfig {
            epsilon: 0.02,
            n0: 2,
            pn_episodes: 100,
            pn_schedule: PnSchedule::First,
            sst_rotations: vec![90, 180, 270],
            min_sep: 0.3,
            members_per_pseudo: 16,
            max_attempts: 1000,
        }
    }
}

impl LsrConfig {
    /// No pseudo-classes and no rotations.
    pub fn none() -> Self {
        LsrConfig {
            pn_episodes: 0,
            sst_rotations: Vec::new(),
            ..Default::default()
        }
    }

    pub fn pseudo_only() -> Self {
        LsrConfig {
            sst_rotations: Vec::new(),
            ..Default::default()
        }
    }

    pub fn sst_only() -> Self {
        LsrConfig {
            pn_episodes: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self, train_episodes: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n0 == 0 {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if self.pn_episodes > train_episodes {
            return Err(Error::Config(format!(
                "pn_episodes {} exceeds the {train_episodes} training episodes",
                self.pn_episodes
            )));
        }
        if !(self.min_sep > 0.0 && self.min_sep < 2.0) {
            return Err(Error::Config(format!(
                "min_sep must lie in (0, 2), got {}",
                self.min_sep
            )));
        }
        if self.members_per_pseudo == 0 || self.max_attempts == 0 {
            return Err(Error::Config(
                "members_per_pseudo and max_attempts must be positive".into(),
            ));
        }
        self.quarter_turns()?;
        Ok(())
    }

    /// Rotation angles as quarter turns, in configured order.
    pub fn quarter_turns(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.sst_rotations.len());
        for &deg in &self.sst_rotations {
            let k = match deg {
                90 => 1,
                180 => 2,
                270 => 3,
                other => return Err(Error::Config(format!("rotation {other} is not one of 90, 180, 270"))),
            };
            if out.contains(&k) {
                return Err(Error::Config(format!("rotation {deg} listed twice")));
            }
            out.push(k);
        }
        Ok(out)
    }

    /// Whether training episode `t` of `total` gets pseudo-classes.
    pub fn pseudo_active(&self, t: usize, total: usize) -> bool {
        match self.pn_schedule {
            PnSchedule::First => t < self.pn_episodes,
            PnSchedule::Interleaved => {
                total > 0 && ((t + 1) * self.pn_episodes) / total > (t * self.pn_episodes) / total
            }
        }
    }
}

/// Rotate a `[C, H, W]` image by `k` quarter turns counterclockwise:
/// pixel `(r, c)` moves to `(W - 1 - c, r)` per turn.
pub fn rotate90<F: Real>(image: &Tensor<F>, k: i64) -> Result<Tensor<F>> {
    let (c, h, w) = image.dims3()?;
    if h != w {
        return Err(Error::Contract(format!("rotate90 needs square images, got {h}x{w}")));
    }
    let n = h;
    let src = image.data();
    let turns = k.rem_euclid(4);
    if turns == 0 {
        return Ok(image.clone());
    }
    let mut out = vec![F::zero(); src.len()];
    for ch in 0..c {
        let base = ch * n * n;
        for r in 0..n {
            for col in 0..n {
                let (dr, dc) = match turns {
                    1 => (n - 1 - col, r),
                    2 => (n - 1 - r, n - 1 - col),
                    _ => (col, n - 1 - r),
                };
                out[base + dr * n + dc] = src[base + r * n + col];
            }
        }
    }
    Tensor::new(vec![c, n, n], out)
}

/// Add one class per (rotation, original class) holding rotated copies of
/// that class's support and query samples. The label of original class `i`
/// under the `j`-th rotation is `i + N * (j + 1)`.
pub fn expand_episode_sst(episode: &Episode, quarter_turns: &[u8]) -> Result<Episode> {
    if let Some(bad) = quarter_turns.iter().find(|&&k| k == 0 || k > 3) {
        return Err(Error::Contract(format!("quarter turns must be 1, 2 or 3, got {bad}")));
    }
    let n = episode.ways();
    let mut out = episode.clone();
    for (j, &k) in quarter_turns.iter().enumerate() {
        let shift = n * (j + 1);
        let turn = |it: &EpisodeItem| EpisodeItem {
            rotation: (it.rotation + k) % 4,
            label: it.label + shift,
            ..*it
        };
        out.support.extend(episode.support.iter().map(turn));
        out.query.extend(episode.query.iter().map(turn));
        out.classes.extend(episode.classes.iter().map(|c| EpisodeClass {
            rotation: (c.rotation + k) % 4,
            ..*c
        }));
    }
    Ok(out)
}
