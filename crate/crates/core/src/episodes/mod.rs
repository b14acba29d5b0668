//! Synthetic driving episodes: a seeded two-view renderer, the on-disk
//! dataset format, stratified folds and evaluation metrics.
//!
//! View 0 ("cabin") shows a Gaussian blob drifting horizontally with a
//! class-dependent velocity. View 1 ("road") shows vertical stripes moving
//! with the same velocity plus the context bits as square corner markers.
//! A single frame carries almost no information about the velocity, so the
//! class can only be read off by integrating several frames.

mod folds;
mod io;
mod metrics;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::{Image, MultiViewFrame, ViewGeometry};
use crate::error::{Error, Result};
use crate::rules::{ContextVector, ScenarioSet};

pub use folds::{kfold_split, FoldSplit};
pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest, ManifestEntry, MANIFEST_FILE};
pub use metrics::{
    accuracy, anticipation_time, confusion_matrix, contradiction_rate, macro_f1, per_class_scores,
    ClassScores, FoldMetrics, MeanSd, MetricsReport,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub label: usize,
    pub context: ContextVector,
    pub frames: Vec<MultiViewFrame>,
}

impl Episode {
    pub fn frame_refs(&self) -> Vec<&MultiViewFrame> {
        self.frames.iter().collect()
    }
}

/// Renderer settings. Velocities are indexed by class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Horizontal drift in pixels per frame, one entry per class.
    pub velocities: Vec<f64>,
    pub blob_sigma: f64,
    /// Per-episode horizontal offset of the blob, uniform in `[-j, j]` pixels.
    pub blob_jitter: f64,
    pub stripe_period: f64,
    pub marker_size: usize,
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: 5,
            height: 32,
            width: 32,
            velocities: vec![0.0, -0.75, -1.5, 0.75, 1.5],
            blob_sigma: 3.0,
            blob_jitter: 5.0,
            stripe_period: 8.0,
            marker_size: 4,
            noise_std: 0.25,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, n_classes: usize, context_dim: usize) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("frames, height and width must be positive"));
        }
        if self.velocities.len() != n_classes {
            return Err(Error::config(format!(
                "{} velocities for {n_classes} classes",
                self.velocities.len()
            )));
        }
        if context_dim != 3 {
            return Err(Error::config(format!(
                "the renderer draws 3 context markers, got context dimension {context_dim}"
            )));
        }
        if 2 * self.marker_size > self.width || self.marker_size > self.height {
            return Err(Error::config("markers do not fit in the road view"));
        }
        let finite = [self.blob_sigma, self.blob_jitter, self.stripe_period, self.noise_std]
            .iter()
            .chain(&self.velocities)
            .all(|v| v.is_finite());
        if !finite || self.blob_sigma <= 0.0 || self.stripe_period <= 0.0 || self.noise_std < 0.0 || self.blob_jitter < 0.0 {
            return Err(Error::config("renderer parameters must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn views(&self) -> Vec<ViewGeometry> {
        vec![ViewGeometry::new(1, self.height, self.width); 2]
    }
}

/// Seed of episode `index` under a dataset seed.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the label uniformly, then a context uniformly among those the
/// rule set does not contradict for that label, then renders the frames.
pub fn generate_episode(id: u64, seed: u64, cfg: &GenConfig, rules: &ScenarioSet) -> Result<Episode> {
    let n_classes = rules.classes().len();
    cfg.validate(n_classes, rules.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = rng.random_range(0..n_classes);
    let consistent = consistent_contexts(label, rules)?;
    let context = consistent.choose(&mut rng).expect("non-empty").clone();
    let frames = render(&mut rng, cfg, cfg.velocities[label], &context)?;
    Ok(Episode {
        id,
        seed,
        label,
        context,
        frames,
    })
}

/// `n` episodes with ids `0..n`.
pub fn generate_dataset(n: usize, seed: u64, cfg: &GenConfig, rules: &ScenarioSet) -> Result<Vec<Episode>> {
    (0..n as u64)
        .map(|id| generate_episode(id, episode_seed(seed, id), cfg, rules))
        .collect()
}

fn consistent_contexts(label: usize, rules: &ScenarioSet) -> Result<Vec<ContextVector>> {
    let mut out = Vec::new();
    for c in ContextVector::enumerate(rules.dim()) {
        if !rules.contradicts(label, &c)? {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::config(format!(
            "class {} is contradicted in every context",
            rules.classes()[label]
        )));
    }
    Ok(out)
}

fn render(rng: &mut ChaCha8Rng, cfg: &GenConfig, v: f64, c: &ContextVector) -> Result<Vec<MultiViewFrame>> {
    let (h, w) = (cfg.height, cfg.width);
    let jitter = if cfg.blob_jitter > 0.0 {
        rng.random_range(-cfg.blob_jitter..=cfg.blob_jitter)
    } else {
        0.0
    };
    let phase0 = rng.random_range(0.0..cfg.stripe_period);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let half = cfg.frames as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 1..=cfg.frames {
        let cx = w as f64 / 2.0 + jitter + v * (t as f64 - half);
        let phase = phase0 + v * t as f64;
        let mut cabin = vec![0.0f64; h * w];
        let mut road = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                cabin[y * w + x] = (-(dx * dx + dy * dy) / (2.0 * cfg.blob_sigma * cfg.blob_sigma)).exp();
                road[y * w + x] = 0.5 + 0.5 * (two_pi * (x as f64 + 0.5 - phase) / cfg.stripe_period).sin();
            }
        }
        draw_markers(&mut road, h, w, cfg.marker_size, c);
        let mut finish = |buf: Vec<f64>| -> Result<Image> {
            let px = buf
                .into_iter()
                .map(|p| (p + noise.sample(rng)).clamp(0.0, 1.0) as f32)
                .collect();
            Image::new(1, h, w, px)
        };
        let cabin = finish(cabin)?;
        let road = finish(road)?;
        frames.push(MultiViewFrame::new(vec![cabin, road])?);
    }
    Ok(frames)
}

/// Bit 0 top-left, bit 1 top-right, bit 2 both bottom corners; the marker
/// value is the bit.
fn draw_markers(buf: &mut [f64], h: usize, w: usize, m: usize, c: &ContextVector) {
    let mut fill = |y0: usize, x0: usize, bit: bool| {
        for y in y0..y0 + m {
            for x in x0..x0 + m {
                buf[y * w + x] = if bit { 1.0 } else { 0.0 };
            }
        }
    };
    fill(0, 0, c.bit(0));
    fill(0, w - m, c.bit(1));
    fill(h - m, 0, c.bit(2));
    fill(h - m, w - m, c.bit(2));
}

#[cfg(test)]
mod tests;
