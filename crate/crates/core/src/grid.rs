//! Images, masks, segmentation maps and the rectangular patch threat model.
//!
//! All grids are row-major. Images store intensities normalized to `[0, 1]`;
//! 8-bit quantization happens only at I/O boundaries and in [`ImageGrid::to_u8`],
//! which is what bit-exact comparisons are performed on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidGeometry(format!(
                "image must be non-empty, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(
                format!("{} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a per-sample closure `(row, col, channel) -> value`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub(crate) fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Equality on the 8-bit representation.
    pub fn eq_u8(&self, other: &ImageGrid) -> bool {
        self.same_shape(other) && self.to_u8() == other.to_u8()
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dims(self.shape_string(), other.shape_string()))
        }
    }
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMap {
    height: usize,
    width: usize,
    num_classes: u32,
    labels: Vec<u16>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, num_classes: u32, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGeometry(format!(
                "segmentation must be non-empty, got {height}x{width}"
            )));
        }
        if num_classes == 0 || num_classes > 1 << 16 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be in 1..=65536, got {num_classes}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::dims(
                format!("{} labels", height * width),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| u32::from(l) >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: u32, label: u16) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        num_classes: u32,
        mut f: impl FnMut(usize, usize) -> u16,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                labels.push(f(i, j));
            }
        }
        Self::new(height, width, num_classes, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn same_dims(&self, other: &SegMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn ensure_same_dims(&self, other: &SegMap) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }
}

/// An axis-aligned `height x width` patch rectangle anchored at `(top, left)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchLocation {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchLocation {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom()).contains(&row) && (self.left..self.right()).contains(&col)
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bottom() > height || self.right() > width {
            return Err(Error::InvalidGeometry(format!(
                "patch {}x{} at ({}, {}) does not fit a {height}x{width} image",
                self.height, self.width, self.top, self.left
            )));
        }
        Ok(())
    }
}

/// Patch size, patch count and image size of the attack being certified against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub patch_height: usize,
    pub patch_width: usize,
    pub num_patches: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl ThreatModel {
    pub fn new(
        image_height: usize,
        image_width: usize,
        patch_height: usize,
        patch_width: usize,
    ) -> Result<Self> {
        Self::with_patches(image_height, image_width, patch_height, patch_width, 1)
    }

    pub fn with_patches(
        image_height: usize,
        image_width: usize,
        patch_height: usize,
        patch_width: usize,
        num_patches: usize,
    ) -> Result<Self> {
        let tm = Self {
            patch_height,
            patch_width,
            num_patches,
            image_height,
            image_width,
        };
        tm.validate()?;
        Ok(tm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidGeometry("image must be non-empty".into()));
        }
        if self.patch_height == 0
            || self.patch_width == 0
            || self.patch_height > self.image_height
            || self.patch_width > self.image_width
        {
            return Err(Error::InvalidGeometry(format!(
                "patch {}x{} does not fit a {}x{} image",
                self.patch_height, self.patch_width, self.image_height, self.image_width
            )));
        }
        if self.num_patches == 0 {
            return Err(Error::InvalidGeometry("num_patches must be >= 1".into()));
        }
        Ok(())
    }

    pub fn location_count(&self) -> usize {
        (self.image_height - self.patch_height + 1) * (self.image_width - self.patch_width + 1)
    }

    pub fn transposed(&self) -> Self {
        Self {
            patch_height: self.patch_width,
            patch_width: self.patch_height,
            num_patches: self.num_patches,
            image_height: self.image_width,
            image_width: self.image_height,
        }
    }
}

/// Per-pixel visibility. `false` marks a hidden pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    visible: Vec<bool>,
}

impl std::hash::Hash for MaskGrid {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        state.write_usize(self.height);
        state.write_usize(self.width);
        // one word per 64 cells
        for chunk in self.visible.chunks(64) {
            let word = chunk.iter().enumerate().fold(0u64, |w, (b, &v)| w | (u64::from(v) << b));
            state.write_u64(word);
        }
    }
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, visible: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGeometry("mask must be non-empty".into()));
        }
        if visible.len() != height * width {
            return Err(Error::dims(
                format!("{} cells", height * width),
                format!("{} cells", visible.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            visible,
        })
    }

    pub fn all_visible(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn all_masked(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut visible = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                visible.push(f(i, j));
            }
        }
        Self::new(height, width, visible)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.width + col]
    }

    pub fn set_visible(&mut self, row: usize, col: usize, visible: bool) {
        self.visible[row * self.width + col] = visible;
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn transpose(&self) -> Self {
        let mut visible = Vec::with_capacity(self.visible.len());
        for j in 0..self.width {
            for i in 0..self.height {
                visible.push(self.is_visible(i, j));
            }
        }
        Self {
            height: self.width,
            width: self.height,
            visible,
        }
    }

    fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height == height && self.width == width {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{height}x{width}"),
                format!("{}x{}", self.height, self.width),
            ))
        }
    }
}

/// An image buffer paired with its visibility mask.
///
/// The buffer content under hidden pixels carries no meaning; [`apply_mask`]
/// zero-fills it, but consumers must never read it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    image: ImageGrid,
    mask: MaskGrid,
}

impl MaskedImage {
    /// Pairs a buffer with a mask without touching hidden pixels.
    pub fn from_parts(image: ImageGrid, mask: MaskGrid) -> Result<Self> {
        mask.ensure_dims(image.height, image.width)?;
        Ok(Self { image, mask })
    }

    pub fn image(&self) -> &ImageGrid {
        &self.image
    }

    pub fn mask(&self) -> &MaskGrid {
        &self.mask
    }

    pub fn into_parts(self) -> (ImageGrid, MaskGrid) {
        (self.image, self.mask)
    }

    /// Equality on visible content only (8-bit), plus identical masks.
    pub fn eq_visible(&self, other: &MaskedImage) -> bool {
        if self.mask != other.mask || !self.image.same_shape(&other.image) {
            return false;
        }
        let a = self.image.to_u8();
        let b = other.image.to_u8();
        let c = self.image.channels;
        self.mask
            .visible
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .all(|(idx, _)| a[idx * c..(idx + 1) * c] == b[idx * c..(idx + 1) * c])
    }
}

/// Replaces the `loc` rectangle of `image` with the same rectangle of `content`.
pub fn apply_patch(image: &ImageGrid, content: &ImageGrid, loc: PatchLocation) -> Result<ImageGrid> {
    image.ensure_same_shape(content)?;
    loc.check_inside(image.height, image.width)?;
    let mut out = image.clone();
    for i in loc.top..loc.bottom() {
        for j in loc.left..loc.right() {
            out.pixel_mut(i, j).copy_from_slice(content.pixel(i, j));
        }
    }
    Ok(out)
}

/// Hides the masked pixels of `image`, zero-filling them in the buffer.
pub fn apply_mask(image: &ImageGrid, mask: &MaskGrid) -> Result<MaskedImage> {
    mask.ensure_dims(image.height, image.width)?;
    let mut out = image.clone();
    let c = out.channels;
    for (px, &visible) in out.data.chunks_exact_mut(c).zip(&mask.visible) {
        if !visible {
            px.fill(0.0);
        }
    }
    Ok(MaskedImage {
        image: out,
        mask: mask.clone(),
    })
}

/// True iff every pixel of `loc` is hidden by `mask`, so the patch content
/// cannot reach the masked image.
pub fn covers(mask: &MaskGrid, loc: PatchLocation) -> Result<bool> {
    loc.check_inside(mask.height, mask.width)?;
    Ok((loc.top..loc.bottom())
        .all(|i| (loc.left..loc.right()).all(|j| !mask.is_visible(i, j))))
}

/// All placements of the threat model's patch, in row-major order of their
/// top-left corner.
pub fn enumerate_locations(tm: &ThreatModel) -> Result<Vec<PatchLocation>> {
    tm.validate()?;
    let rows = tm.image_height - tm.patch_height + 1;
    let cols = tm.image_width - tm.patch_width + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for top in 0..rows {
        for left in 0..cols {
            out.push(PatchLocation::new(top, left, tm.patch_height, tm.patch_width));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(h, w, c, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn patch_top_left_block() {
        let x = ImageGrid::filled(4, 4, 1, 0.0).unwrap();
        let p = ImageGrid::filled(4, 4, 1, 1.0).unwrap();
        let out = apply_patch(&x, &p, PatchLocation::new(0, 0, 2, 2)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i < 2 && j < 2 { 1.0 } else { 0.0 };
                assert_eq!(out.get(i, j, 0), expected);
            }
        }
        assert_eq!(x.get(0, 0, 0), 0.0);
    }

    #[test]
    fn patch_with_own_content_is_identity() {
        let x = random_image(5, 6, 3, 1);
        let out = apply_patch(&x, &x, PatchLocation::new(1, 2, 3, 3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn patch_matches_pixel_loop() {
        let x = random_image(8, 8, 3, 2);
        let p = random_image(8, 8, 3, 3);
        let out = apply_patch(&x, &p, PatchLocation::new(3, 2, 2, 3)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let inside = (3..=4).contains(&i) && (2..=4).contains(&j);
                let src = if inside { &p } else { &x };
                for c in 0..3 {
                    assert_eq!(out.get(i, j, c), src.get(i, j, c));
                }
            }
        }
    }

    #[test]
    fn patch_errors() {
        let x = random_image(4, 4, 1, 0);
        let p = random_image(4, 5, 1, 0);
        assert!(matches!(
            apply_patch(&x, &p, PatchLocation::new(0, 0, 1, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            apply_patch(&x, &x, PatchLocation::new(3, 0, 2, 1)),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn mask_extremes() {
        let x = random_image(4, 5, 3, 4);
        let all = apply_mask(&x, &MaskGrid::all_visible(4, 5).unwrap()).unwrap();
        assert_eq!(all.image(), &x);
        let none = apply_mask(&x, &MaskGrid::all_masked(4, 5).unwrap()).unwrap();
        assert!(none.image().data().iter().all(|&v| v == 0.0));
        assert_eq!(none.mask().visible_count(), 0);
    }

    #[test]
    fn checkerboard_mask() {
        let x = random_image(6, 6, 2, 5);
        let m = MaskGrid::from_fn(6, 6, |i, j| (i + j) % 2 == 0).unwrap();
        let out = apply_mask(&x, &m).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for c in 0..2 {
                    let expected = if (i + j) % 2 == 0 { x.get(i, j, c) } else { 0.0 };
                    assert_eq!(out.image().get(i, j, c), expected);
                }
            }
        }
        assert!(apply_mask(&x, &MaskGrid::all_visible(6, 5).unwrap()).is_err());
    }

    #[test]
    fn covers_cases() {
        let loc = PatchLocation::new(1, 1, 2, 2);
        assert!(covers(&MaskGrid::all_masked(4, 4).unwrap(), loc).unwrap());
        assert!(!covers(&MaskGrid::all_visible(4, 4).unwrap(), loc).unwrap());
        // full-height column hidden at columns 2..=4 of an 8-wide image
        let col = MaskGrid::from_fn(8, 8, |_, j| !(2..=4).contains(&j)).unwrap();
        assert!(covers(&col, PatchLocation::new(0, 2, 3, 3)).unwrap());
        assert!(!covers(&col, PatchLocation::new(0, 1, 3, 3)).unwrap());
    }

    #[test]
    fn location_counts() {
        let count = |h, w, ph, pw| {
            enumerate_locations(&ThreatModel::new(h, w, ph, pw).unwrap())
                .unwrap()
                .len()
        };
        assert_eq!(count(4, 4, 4, 4), 1);
        assert_eq!(count(4, 4, 2, 2), 9);
        assert_eq!(count(6, 10, 2, 3), (6 - 2 + 1) * (10 - 3 + 1));
        let locs = enumerate_locations(&ThreatModel::new(4, 4, 4, 4).unwrap()).unwrap();
        assert_eq!(locs[0], PatchLocation::new(0, 0, 4, 4));
        assert!(ThreatModel::new(4, 4, 5, 1).is_err());
    }

    #[test]
    fn locations_are_sorted_and_unique() {
        let tm = ThreatModel::new(7, 9, 2, 3).unwrap();
        let locs = enumerate_locations(&tm).unwrap();
        assert!(locs.windows(2).all(|w| (w[0].top, w[0].left) < (w[1].top, w[1].left)));
        assert!(locs.iter().all(|l| l.check_inside(7, 9).is_ok()));
    }

    #[test]
    fn intensities_out_of_range_rejected() {
        assert!(ImageGrid::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageGrid::new(0, 1, 1, vec![]).is_err());
        assert!(SegMap::new(1, 2, 2, vec![0, 2]).is_err());
    }
}
