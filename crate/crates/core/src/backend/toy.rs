//! Deterministic stand-ins for inpainting and segmentation networks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{DemaskingBackend, SegmentationBackend};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid, MaskedImage, SegMap};

const FILL_CACHE_LIMIT: usize = 512;

/// Fills every hidden pixel with the nearest visible pixel (Euclidean
/// distance, ties to the smallest row-major index). A fully hidden input
/// becomes mid-gray.
///
/// The source map depends on the mask alone, so it is cached per mask.
#[derive(Default)]
pub struct NearestFillDemasker {
    cache: Mutex<HashMap<MaskGrid, Arc<Vec<usize>>>>,
}

impl NearestFillDemasker {
    pub fn new() -> Self {
        Self::default()
    }

    fn sources(&self, mask: &MaskGrid) -> Arc<Vec<usize>> {
        if let Some(hit) = self.cache.lock().unwrap().get(mask) {
            return Arc::clone(hit);
        }
        let computed = Arc::new(nearest_visible_sources(mask));
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= FILL_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(mask.clone(), Arc::clone(&computed));
        computed
    }
}

/// For each pixel, the row-major index of its nearest visible pixel. Searches
/// square rings of growing Chebyshev radius `r`; every pixel on ring `r` is at
/// squared distance `>= r^2`, so the search stops once `r^2` exceeds the best
/// squared distance found.
fn nearest_visible_sources(mask: &MaskGrid) -> Vec<usize> {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let radius_limit = h.max(w);
    let mut out = Vec::with_capacity((h * w) as usize);
    for i in 0..h {
        for j in 0..w {
            if mask.is_visible(i as usize, j as usize) {
                out.push((i * w + j) as usize);
                continue;
            }
            let mut best: Option<(isize, isize)> = None; // (d2, index)
            let mut r = 1;
            while r <= radius_limit {
                if let Some((d2, _)) = best {
                    if r * r > d2 {
                        break;
                    }
                }
                for di in -r..=r {
                    let ii = i + di;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    let step = if di.abs() == r { 1 } else { 2 * r };
                    let mut dj = -r;
                    while dj <= r {
                        let jj = j + dj;
                        if jj >= 0 && jj < w && mask.is_visible(ii as usize, jj as usize) {
                            let cand = (di * di + dj * dj, ii * w + jj);
                            if best.is_none_or(|b| cand < b) {
                                best = Some(cand);
                            }
                        }
                        dj += step;
                    }
                }
                r += 1;
            }
            // usize::MAX marks "no visible pixel at all"
            out.push(best.map_or(usize::MAX, |(_, idx)| idx as usize));
        }
    }
    out
}

impl DemaskingBackend for NearestFillDemasker {
    fn demask(&self, input: &MaskedImage) -> Result<ImageGrid> {
        let img = input.image();
        let c = img.channels();
        if input.mask().visible_count() == 0 {
            return ImageGrid::filled(img.height(), img.width(), c, 0.5);
        }
        let sources = self.sources(input.mask());
        let data = img.data();
        let mut out = Vec::with_capacity(data.len());
        for &src in sources.iter() {
            out.extend_from_slice(&data[src * c..(src + 1) * c]);
        }
        ImageGrid::new(img.height(), img.width(), c, out)
    }

    fn fingerprint(&self) -> String {
        format!("toy-nearest-fill/{}", env!("CARGO_PKG_VERSION"))
    }
}

/// Replaces hidden pixels with a constant intensity; visible pixels pass through.
pub struct SolidFillDemasker {
    value: f32,
}

impl SolidFillDemasker {
    pub fn new(value: f32) -> Self {
        Self { value }
    }
}

impl DemaskingBackend for SolidFillDemasker {
    fn demask(&self, input: &MaskedImage) -> Result<ImageGrid> {
        let img = input.image();
        let mask = input.mask();
        ImageGrid::from_fn(img.height(), img.width(), img.channels(), |i, j, c| {
            if mask.is_visible(i, j) {
                img.get(i, j, c)
            } else {
                self.value
            }
        })
    }

    fn fingerprint(&self) -> String {
        format!("solid-fill({})/{}", self.value, env!("CARGO_PKG_VERSION"))
    }
}

pub struct ConstantSegmenter {
    num_classes: u32,
    label: u16,
}

impl ConstantSegmenter {
    pub fn new(num_classes: u32, label: u16) -> Self {
        assert!(u32::from(label) < num_classes, "label out of range");
        Self { num_classes, label }
    }
}

impl SegmentationBackend for ConstantSegmenter {
    fn segment(&self, image: &ImageGrid) -> Result<SegMap> {
        SegMap::filled(image.height(), image.width(), self.num_classes, self.label)
    }

    fn num_classes(&self) -> u32 {
        self.num_classes
    }

    fn fingerprint(&self) -> String {
        format!("constant({})/{}", self.label, env!("CARGO_PKG_VERSION"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ToyRule {
    /// Class = index of the brightest channel (ties to the lower index);
    /// `C` classes. Single-channel images split at 0.5 into 2 classes.
    DominantChannel,
    /// Class 1 where the mean channel intensity is `>= threshold`, else 0.
    Threshold(f32),
}

/// Rule-based per-pixel segmenter for synthetic scenes.
#[derive(Clone, Debug)]
pub struct ToyOracleSegmenter {
    channels: usize,
    rule: ToyRule,
}

impl ToyOracleSegmenter {
    pub fn dominant_channel(channels: usize) -> Self {
        Self {
            channels,
            rule: ToyRule::DominantChannel,
        }
    }

    pub fn threshold(channels: usize, threshold: f32) -> Self {
        Self {
            channels,
            rule: ToyRule::Threshold(threshold),
        }
    }

    pub fn rule(&self) -> ToyRule {
        self.rule
    }

    /// Label of a single pixel under this rule.
    pub fn classify(&self, px: &[f32]) -> u16 {
        match self.rule {
            ToyRule::DominantChannel if px.len() == 1 => u16::from(px[0] >= 0.5),
            ToyRule::DominantChannel => {
                let mut best = 0;
                for (c, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = c;
                    }
                }
                best as u16
            }
            ToyRule::Threshold(t) => {
                let mean = px.iter().sum::<f32>() / px.len() as f32;
                u16::from(mean >= t)
            }
        }
    }
}

impl SegmentationBackend for ToyOracleSegmenter {
    fn segment(&self, image: &ImageGrid) -> Result<SegMap> {
        if image.channels() != self.channels {
            return Err(Error::Backend {
                mask_index: None,
                message: format!(
                    "toy segmenter expects {} channels, got {}",
                    self.channels,
                    image.channels()
                ),
            });
        }
        SegMap::from_fn(image.height(), image.width(), self.num_classes(), |i, j| {
            self.classify(image.pixel(i, j))
        })
    }

    fn num_classes(&self) -> u32 {
        match self.rule {
            ToyRule::DominantChannel if self.channels > 1 => self.channels as u32,
            _ => 2,
        }
    }

    fn fingerprint(&self) -> String {
        format!("toy-oracle({:?},C={})/{}", self.rule, self.channels, env!("CARGO_PKG_VERSION"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::apply_mask;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force over all visible pixels in row-major order, keeping the
    /// strictly closest one.
    fn oracle_fill(x: &ImageGrid, m: &MaskGrid) -> ImageGrid {
        let (h, w) = (x.height(), x.width());
        ImageGrid::from_fn(h, w, x.channels(), |i, j, c| {
            if m.is_visible(i, j) {
                return x.get(i, j, c);
            }
            let mut best: Option<(usize, usize, usize)> = None;
            for a in 0..h {
                for b in 0..w {
                    if m.is_visible(a, b) {
                        let d = a.abs_diff(i).pow(2) + b.abs_diff(j).pow(2);
                        if best.is_none_or(|(bd, _, _)| d < bd) {
                            best = Some((d, a, b));
                        }
                    }
                }
            }
            best.map_or(0.5, |(_, a, b)| x.get(a, b, c))
        })
        .unwrap()
    }

    #[test]
    fn all_visible_is_identity() {
        let x = ImageGrid::from_fn(5, 6, 3, |i, j, c| ((i + j + c) % 4) as f32 / 4.0).unwrap();
        let m = MaskGrid::all_visible(5, 6).unwrap();
        let out = NearestFillDemasker::new().demask(&apply_mask(&x, &m).unwrap()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn left_red_fills_right() {
        let x = ImageGrid::from_fn(4, 8, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let m = MaskGrid::from_fn(4, 8, |_, j| j < 4).unwrap();
        let out = NearestFillDemasker::new().demask(&apply_mask(&x, &m).unwrap()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn fully_masked_is_gray() {
        let x = ImageGrid::filled(3, 3, 1, 1.0).unwrap();
        let out = NearestFillDemasker::new()
            .demask(&apply_mask(&x, &MaskGrid::all_masked(3, 3).unwrap()).unwrap())
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stripes_on_gradient_match_oracle() {
        let x = ImageGrid::from_fn(6, 15, 1, |_, j, _| j as f32 / 14.0).unwrap();
        let m = MaskGrid::from_fn(6, 15, |_, j| j % 5 == 2).unwrap();
        let out = NearestFillDemasker::new().demask(&apply_mask(&x, &m).unwrap()).unwrap();
        assert_eq!(out, oracle_fill(&x, &m));
        // piecewise constant: column 4 is equidistant from 2 and 7, tie goes to 2
        assert_eq!(out.get(0, 4, 0), x.get(0, 2, 0));
        assert_eq!(out.get(0, 5, 0), x.get(0, 7, 0));
    }

    #[test]
    fn random_masks_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let density: f32 = rng.random_range(0.02..0.6);
            let x = ImageGrid::from_fn(h, w, 2, |_, _, _| rng.random::<f32>()).unwrap();
            let m = MaskGrid::from_fn(h, w, |_, _| rng.random::<f32>() < density).unwrap();
            let out = NearestFillDemasker::new().demask(&apply_mask(&x, &m).unwrap()).unwrap();
            assert_eq!(out, oracle_fill(&x, &m));
        }
    }

    #[test]
    fn ignores_masked_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ImageGrid::from_fn(10, 10, 3, |_, _, _| rng.random::<f32>()).unwrap();
        let m = MaskGrid::from_fn(10, 10, |i, j| (i * 3 + j) % 7 == 0).unwrap();
        let clean = apply_mask(&x, &m).unwrap();
        let noisy = ImageGrid::from_fn(10, 10, 3, |i, j, c| {
            if m.is_visible(i, j) {
                x.get(i, j, c)
            } else {
                rng.random::<f32>()
            }
        })
        .unwrap();
        let noisy = MaskedImage::from_parts(noisy, m).unwrap();
        let g = NearestFillDemasker::new();
        assert_eq!(g.demask(&clean).unwrap(), g.demask(&noisy).unwrap());
        let s = SolidFillDemasker::new(0.25);
        assert_eq!(s.demask(&clean).unwrap(), s.demask(&noisy).unwrap());
    }

    #[test]
    fn dominant_channel_rule() {
        let f = ToyOracleSegmenter::dominant_channel(3);
        let red = ImageGrid::from_fn(2, 2, 3, |_, _, c| if c == 0 { 0.8 } else { 0.1 }).unwrap();
        assert_eq!(f.segment(&red).unwrap(), SegMap::filled(2, 2, 3, 0).unwrap());
        let split = ImageGrid::from_fn(2, 4, 3, |_, j, c| {
            let dom = if j < 2 { 0 } else { 1 };
            if c == dom { 0.7 } else { 0.2 }
        })
        .unwrap();
        let s = f.segment(&split).unwrap();
        assert_eq!(s.labels(), &[0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(f.classify(&[0.5, 0.5, 0.1]), 0);
        assert!(f.segment(&ImageGrid::filled(2, 2, 1, 0.0).unwrap()).is_err());

        let t = ToyOracleSegmenter::threshold(1, 0.5);
        assert_eq!(t.classify(&[0.49]), 0);
        assert_eq!(t.classify(&[0.5]), 1);
    }
}
