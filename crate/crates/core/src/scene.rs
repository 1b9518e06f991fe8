//! Seeded synthetic scenes for desk-scale experiments.
//!
//! A scene is a Voronoi partition into regions, each tinted toward one color
//! channel. The ground truth is that channel, so the dominant-channel toy
//! segmenter labels a clean scene perfectly.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, SegMap};

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageGrid,
    pub ground_truth: SegMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Color channels; also the class count.
    pub channels: usize,
    pub regions: usize,
    /// Weight of horizontal distance in the region metric; values below 1
    /// stretch regions into horizontal bands.
    pub horizontal_weight: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 3,
            regions: 4,
            horizontal_weight: 1.0,
        }
    }

    pub fn with_regions(mut self, regions: usize) -> Self {
        self.regions = regions;
        self
    }

    pub fn with_horizontal_weight(mut self, weight: f64) -> Self {
        self.horizontal_weight = weight;
        self
    }
}

/// Dominant channel sits in `[0.6, 0.95]`, the others in `[0.0, 0.45]`.
pub fn generate_scene(spec: SceneSpec, seed: u64) -> Result<Scene> {
    if spec.channels < 2
        || spec.regions == 0
        || spec.height == 0
        || spec.width == 0
        || !(spec.horizontal_weight > 0.0)
    {
        return Err(Error::InvalidArgument(format!("degenerate scene spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64, u16)> = (0..spec.regions)
        .map(|_| {
            (
                rng.random_range(0.0..spec.height as f64),
                rng.random_range(0.0..spec.width as f64),
                rng.random_range(0..spec.channels as u16),
            )
        })
        .collect();
    let hw = spec.horizontal_weight * spec.horizontal_weight;
    let ground_truth = SegMap::from_fn(spec.height, spec.width, spec.channels as u32, |i, j| {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        let nearest = centers
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - y).powi(2) + hw * (a.1 - x).powi(2);
                let db = (b.0 - y).powi(2) + hw * (b.1 - x).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one region");
        nearest.2
    })?;
    let mut data = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for &label in ground_truth.labels() {
        for c in 0..spec.channels {
            let v: f32 = if c == label as usize {
                rng.random_range(0.6..=0.95)
            } else {
                rng.random_range(0.0..=0.45)
            };
            // quantize so the scene survives 8-bit file round trips unchanged
            data.push((v * 255.0).round() / 255.0);
        }
    }
    let image = ImageGrid::new(spec.height, spec.width, spec.channels, data)?;
    Ok(Scene { image, ground_truth })
}
