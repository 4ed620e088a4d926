use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ClassSamples, Dataset, Normalization, Role};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, StreamPurpose, Tensor};

/// Procedural image family. Every family places its structure off-center
/// so quarter turns produce images unlike any unrotated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianBlobs,
    OrientedBars,
    RingPatterns,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::GaussianBlobs => "gaussian-blobs",
            Family::OrientedBars => "oriented-bars",
            Family::RingPatterns => "ring-patterns",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub role: Role,
    pub family: Family,
    pub classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel gaussian noise.
    pub noise: f64,
    /// Distractor squares per image, shared across families.
    pub clutter: usize,
    pub seed: u64,
    /// Ids are `first_class_id .. first_class_id + classes`.
    pub first_class_id: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".into(),
            role: Role::Base,
            family: Family::GaussianBlobs,
            classes: 8,
            samples_per_class: 40,
            channels: 3,
            height: 32,
            width: 32,
            noise: 0.05,
            clutter: 2,
            seed: 0,
            first_class_id: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "synthetic dataset needs positive class and sample counts".into(),
            ));
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::Config(
                "synthetic images need channels >= 1 and sides >= 4".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("synthetic noise must be finite and nonnegative".into()));
        }
        if u32::try_from(self.classes)
            .ok()
            .and_then(|n| self.first_class_id.checked_add(n))
            .is_none()
        {
            return Err(Error::Config("synthetic class ids overflow u32".into()));
        }
        Ok(())
    }

    fn id_range(&self) -> std::ops::Range<u32> {
        self.first_class_id..self.first_class_id + self.classes as u32
    }
}

/// Class-level parameters of one pattern.
enum Pattern {
    Blobs(Vec<Blob>),
    Bars {
        angle: f64,
        freq: f64,
        phase: f64,
        cx: f64,
        cy: f64,
        radius: f64,
    },
    Ring {
        cx: f64,
        cy: f64,
        radius: f64,
        width: f64,
        gap: f64,
    },
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    weight: f64,
}

fn between(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

impl Pattern {
    fn draw(family: Family, rng: &mut RngStream) -> Self {
        match family {
            Family::GaussianBlobs => Pattern::Blobs(
                (0..3)
                    .map(|i| Blob {
                        x: between(rng, 0.15, 0.85),
                        y: between(rng, 0.15, 0.85),
                        sigma: between(rng, 0.06, 0.12),
                        weight: if i == 0 { 1.0 } else { between(rng, 0.4, 0.8) },
                    })
                    .collect(),
            ),
            Family::OrientedBars => Pattern::Bars {
                angle: between(rng, 0.0, PI),
                freq: between(rng, 2.0, 5.0),
                phase: between(rng, 0.0, 2.0 * PI),
                cx: between(rng, 0.25, 0.75),
                cy: between(rng, 0.25, 0.75),
                radius: between(rng, 0.2, 0.35),
            },
            Family::RingPatterns => Pattern::Ring {
                cx: between(rng, 0.3, 0.7),
                cy: between(rng, 0.3, 0.7),
                radius: between(rng, 0.12, 0.3),
                width: between(rng, 0.04, 0.08),
                gap: between(rng, 0.0, 2.0 * PI),
            },
        }
    }

    /// Per-sample variation of the class pattern.
    fn jitter(&self, rng: &mut RngStream) -> Self {
        let mut j = |s: f64| s * rng.gaussian();
        match self {
            Pattern::Blobs(blobs) => Pattern::Blobs(
                blobs
                    .iter()
                    .map(|b| Blob {
                        x: b.x + j(0.03),
                        y: b.y + j(0.03),
                        sigma: b.sigma * (1.0 + j(0.1)).max(0.5),
                        weight: b.weight,
                    })
                    .collect(),
            ),
            &Pattern::Bars {
                angle,
                freq,
                phase,
                cx,
                cy,
                radius,
            } => Pattern::Bars {
                angle: angle + j(0.08),
                freq,
                phase: phase + j(0.4),
                cx: cx + j(0.03),
                cy: cy + j(0.03),
                radius,
            },
            &Pattern::Ring {
                cx,
                cy,
                radius,
                width,
                gap,
            } => Pattern::Ring {
                cx: cx + j(0.03),
                cy: cy + j(0.03),
                radius: radius * (1.0 + j(0.06)),
                width,
                gap: gap + j(0.15),
            },
        }
    }

    /// Intensity in `[0, 1]` at normalized coordinates `(x, y)`.
    fn at(&self, x: f64, y: f64) -> f64 {
        match self {
            Pattern::Blobs(blobs) => blobs
                .iter()
                .map(|b| {
                    let r2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                    b.weight * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                })
                .sum::<f64>()
                .min(1.0),
            &Pattern::Bars {
                angle,
                freq,
                phase,
                cx,
                cy,
                radius,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let envelope = (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
                let u = dx * angle.cos() + dy * angle.sin();
                let wave = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
                envelope * wave
            }
            &Pattern::Ring {
                cx,
                cy,
                radius,
                width,
                gap,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let r = (dx * dx + dy * dy).sqrt();
                let band = (-(r - radius).powi(2) / (2.0 * width * width)).exp();
                let theta = dy.atan2(dx);
                let off = (theta - gap).rem_euclid(2.0 * PI);
                let open = if off < 1.2 { 0.0 } else { 1.0 };
                band * open
            }
        }
    }
}

struct ClassStyle {
    pattern: Pattern,
    color: Vec<f64>,
}

fn render(style: &ClassStyle, cfg: &SynthConfig, rng: &mut RngStream) -> Tensor<f64> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let pattern = style.pattern.jitter(rng);
    let amplitude = 0.75 + 0.15 * rng.uniform();
    let background = 0.1 + 0.1 * rng.uniform();
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let v = pattern.at((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            for ch in 0..c {
                data[(ch * h + y) * w + x] = background + amplitude * v * style.color[ch];
            }
        }
    }
    let side = (h.min(w) / 5).max(1);
    for _ in 0..cfg.clutter {
        let (y0, x0) = (rng.below(h - side + 1), rng.below(w - side + 1));
        let shade: Vec<f64> = (0..c).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for (ch, &s) in shade.iter().enumerate() {
                    data[(ch * h + y) * w + x] = s;
                }
            }
        }
    }
    for v in &mut data {
        if cfg.noise > 0.0 {
            *v += cfg.noise * rng.gaussian();
        }
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_raw(vec![c, h, w], data)
}

/// Generate a dataset; a pure function of `cfg`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let classes = cfg
        .id_range()
        .map(|id| {
            let mut rng = root.derive(StreamPurpose::Data, (id as u64) << 8 | family_tag(cfg.family));
            let style = ClassStyle {
                pattern: Pattern::draw(cfg.family, &mut rng),
                color: (0..cfg.channels).map(|_| between(&mut rng, 0.3, 1.0)).collect(),
            };
            ClassSamples {
                id,
                images: (0..cfg.samples_per_class)
                    .map(|_| render(&style, cfg, &mut rng))
                    .collect(),
            }
        })
        .collect();
    Dataset::new(
        cfg.name.clone(),
        cfg.role,
        (cfg.channels, cfg.height, cfg.width),
        Normalization::uniform(cfg.channels, 0.3, 0.3),
        classes,
    )
}

fn family_tag(f: Family) -> u64 {
    match f {
        Family::GaussianBlobs => 1,
        Family::OrientedBars => 2,
        Family::RingPatterns => 3,
    }
}

/// Base, validation and target generators of one synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSuite {
    pub base: SynthConfig,
    pub validation: SynthConfig,
    pub targets: Vec<SynthConfig>,
}

impl Default for SynthSuite {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl SynthSuite {
    /// Gaussian-blob base (16 classes) and validation (6 classes) sets and
    /// an oriented-bar target (10 classes), 40 samples per class.
    pub fn with_seed(seed: u64) -> Self {
        let make = |name: &str, role, family, classes, first_class_id| SynthConfig {
            name: name.into(),
            role,
            family,
            classes,
            first_class_id,
            seed,
            ..SynthConfig::default()
        };
        SynthSuite {
            base: make("blobs-base", Role::Base, Family::GaussianBlobs, 16, 0),
            validation: make("blobs-val", Role::Validation, Family::GaussianBlobs, 6, 100),
            targets: vec![make("bars-target", Role::Target, Family::OrientedBars, 10, 200)],
        }
    }

    /// Generate every dataset, checking that ids are disjoint and that each
    /// target family differs from the base family.
    pub fn generate(&self) -> Result<(Dataset, Dataset, Vec<Dataset>)> {
        if self.targets.is_empty() {
            return Err(Error::Config("synthetic suite needs at least one target".into()));
        }
        for (i, a) in self.targets.iter().enumerate() {
            for b in &self.targets[i + 1..] {
                let (ra, rb) = (a.id_range(), b.id_range());
                if ra.start < rb.end && rb.start < ra.end {
                    return Err(Error::Config(format!(
                        "target `{}` class ids {ra:?} overlap target `{}` class ids {rb:?}",
                        a.name, b.name
                    )));
                }
            }
        }
        let mut targets = Vec::with_capacity(self.targets.len());
        let mut base = None;
        for t in &self.targets {
            let (b, v, t) = split_roles(&self.base, &self.validation, t)?;
            if base.is_none() {
                base = Some((b, v));
            }
            targets.push(t);
        }
        let (b, v) = base.expect("at least one target");
        Ok((b, v, targets))
    }
}

/// Generate base, validation and target datasets with disjoint class ids
/// and a target family different from the base family.
pub fn split_roles(base: &SynthConfig, val: &SynthConfig, target: &SynthConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let ranges = [
        ("base", base.id_range()),
        ("validation", val.id_range()),
        ("target", target.id_range()),
    ];
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (&ranges[i].1, &ranges[j].1);
            if a.start < b.end && b.start < a.end {
                return Err(Error::Config(format!(
                    "{} class ids {:?} overlap {} class ids {:?}",
                    ranges[i].0, a, ranges[j].0, b
                )));
            }
        }
    }
    if target.family == base.family {
        return Err(Error::Config(format!(
            "target family must differ from base family `{}`",
            base.family.as_str()
        )));
    }
    let with_role = |cfg: &SynthConfig, role| SynthConfig { role, ..cfg.clone() };
    Ok((
        synth_dataset(&with_role(base, Role::Base))?,
        synth_dataset(&with_role(val, Role::Validation))?,
        synth_dataset(&with_role(target, Role::Target))?,
    ))
}
