//! Mask-set construction and structural verification.
//!
//! Recovery sets partition the image into patch-sized blocks and make every
//! block visible in exactly one mask; the strength `T` of a set is the largest
//! number of masks a single patch placement can leave uncovered. Detection
//! sets hide full-height columns (or full-width rows) so that every placement
//! is hidden by at least one mask.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::grid::{enumerate_locations, MaskGrid, PatchLocation, ThreatModel};
use crate::io;

pub const BUILDER_VERSION: u32 = 1;

/// Tiling of the image into `block_height x block_width` blocks; the last
/// block row and column are truncated at the image border.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub image_height: usize,
    pub image_width: usize,
    pub block_height: usize,
    pub block_width: usize,
}

impl BlockPartition {
    pub fn new(
        image_height: usize,
        image_width: usize,
        block_height: usize,
        block_width: usize,
    ) -> Result<Self> {
        // same constraints as a single-patch threat model
        ThreatModel::new(image_height, image_width, block_height, block_width)?;
        Ok(Self {
            image_height,
            image_width,
            block_height,
            block_width,
        })
    }

    /// Blocks the size of the threat model's patch.
    pub fn for_threat(tm: &ThreatModel) -> Result<Self> {
        Self::new(tm.image_height, tm.image_width, tm.patch_height, tm.patch_width)
    }

    pub fn rows(&self) -> usize {
        self.image_height.div_ceil(self.block_height)
    }

    pub fn cols(&self) -> usize {
        self.image_width.div_ceil(self.block_width)
    }

    pub fn block_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn block_rect(&self, q: usize, r: usize) -> PatchLocation {
        let top = q * self.block_height;
        let left = r * self.block_width;
        PatchLocation::new(
            top,
            left,
            self.block_height.min(self.image_height - top),
            self.block_width.min(self.image_width - left),
        )
    }

    pub fn block_of(&self, row: usize, col: usize) -> (usize, usize) {
        (row / self.block_height, col / self.block_width)
    }

    pub fn threat(&self) -> ThreatModel {
        ThreatModel {
            patch_height: self.block_height,
            patch_width: self.block_width,
            num_patches: 1,
            image_height: self.image_height,
            image_width: self.image_width,
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            image_height: self.image_width,
            image_width: self.image_height,
            block_height: self.block_width,
            block_width: self.block_height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "col")]
    Column,
    #[serde(rename = "row")]
    Row,
    #[serde(rename = "3mask")]
    ThreeMask,
    #[serde(rename = "4mask")]
    FourMask,
    #[serde(rename = "det-col")]
    DetectionColumn,
    #[serde(rename = "det-row")]
    DetectionRow,
    #[serde(rename = "custom")]
    Custom,
}

impl Scheme {
    pub const BUILT_IN: [Scheme; 6] = [
        Scheme::Column,
        Scheme::Row,
        Scheme::ThreeMask,
        Scheme::FourMask,
        Scheme::DetectionColumn,
        Scheme::DetectionRow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Column => "col",
            Scheme::Row => "row",
            Scheme::ThreeMask => "3mask",
            Scheme::FourMask => "4mask",
            Scheme::DetectionColumn => "det-col",
            Scheme::DetectionRow => "det-row",
            Scheme::Custom => "custom",
        }
    }

    pub fn is_detection(&self) -> bool {
        matches!(self, Scheme::DetectionColumn | Scheme::DetectionRow)
    }

    /// Smallest K satisfying `K >= 2T + 1` for the recovery schemes.
    pub fn default_k(&self) -> Option<usize> {
        match self {
            Scheme::Column | Scheme::Row => Some(5),
            Scheme::ThreeMask => Some(7),
            Scheme::FourMask => Some(9),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "col" => Ok(Scheme::Column),
            "row" => Ok(Scheme::Row),
            "3mask" => Ok(Scheme::ThreeMask),
            "4mask" => Ok(Scheme::FourMask),
            "det-col" => Ok(Scheme::DetectionColumn),
            "det-row" => Ok(Scheme::DetectionRow),
            "custom" => Ok(Scheme::Custom),
            other => Err(Error::InvalidArgument(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSetKind {
    Recovery,
    Detection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Column,
    Row,
}

/// Which mask (0-based) makes each block visible, row-major over blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockAssignment {
    pub partition: BlockPartition,
    pub mask_of_block: Vec<usize>,
}

impl BlockAssignment {
    pub fn mask_of(&self, q: usize, r: usize) -> usize {
        self.mask_of_block[q * self.partition.cols() + r]
    }
}

/// Hidden bands of a detection set: mask `k` hides `[positions[k], positions[k] + extent)`
/// along `axis` across the whole image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bands {
    pub axis: Axis,
    pub extent: usize,
    pub stride: usize,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<MaskGrid>,
    kind: MaskSetKind,
    scheme: Scheme,
    threat: ThreatModel,
    declared_strength: Option<usize>,
    assignment: Option<BlockAssignment>,
    bands: Option<Bands>,
}

impl MaskSet {
    /// A recovery set from explicit masks and the block assignment they claim
    /// to realize. Nothing is verified here; see [`MaskSet::verify`].
    pub fn custom_recovery(
        masks: Vec<MaskGrid>,
        assignment: BlockAssignment,
        declared_strength: usize,
    ) -> Result<Self> {
        let threat = assignment.partition.threat();
        check_mask_dims(&masks, &threat)?;
        Ok(Self {
            masks,
            kind: MaskSetKind::Recovery,
            scheme: Scheme::Custom,
            threat,
            declared_strength: Some(declared_strength),
            assignment: Some(assignment),
            bands: None,
        })
    }

    pub fn custom_detection(masks: Vec<MaskGrid>, threat: ThreatModel) -> Result<Self> {
        threat.validate()?;
        check_mask_dims(&masks, &threat)?;
        Ok(Self {
            masks,
            kind: MaskSetKind::Detection,
            scheme: Scheme::Custom,
            threat,
            declared_strength: None,
            assignment: None,
            bands: None,
        })
    }

    pub fn masks(&self) -> &[MaskGrid] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn kind(&self) -> MaskSetKind {
        self.kind
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn threat(&self) -> &ThreatModel {
        &self.threat
    }

    pub fn declared_strength(&self) -> Option<usize> {
        self.declared_strength
    }

    pub fn block_assignment(&self) -> Option<&BlockAssignment> {
        self.assignment.as_ref()
    }

    pub fn bands(&self) -> Option<&Bands> {
        self.bands.as_ref()
    }

    /// Mutable access to one mask, for building deliberately broken sets.
    pub fn mask_mut(&mut self, k: usize) -> &mut MaskGrid {
        &mut self.masks[k]
    }

    pub fn empty_masks(&self) -> Vec<usize> {
        (0..self.masks.len())
            .filter(|&k| self.masks[k].visible_count() == 0)
            .collect()
    }

    /// Whether the construction metadata says mask `k` hides `loc`, independent
    /// of the mask pixels. `None` for custom sets without such metadata.
    pub fn claims_cover(&self, k: usize, loc: PatchLocation) -> Option<bool> {
        if let Some(a) = &self.assignment {
            let p = &a.partition;
            let (q0, r0) = p.block_of(loc.top, loc.left);
            let (q1, r1) = p.block_of(loc.bottom() - 1, loc.right() - 1);
            let hit = (q0..=q1).any(|q| (r0..=r1).any(|r| a.mask_of(q, r) == k));
            return Some(!hit);
        }
        self.bands.as_ref().map(|b| {
            let (lo, hi) = match b.axis {
                Axis::Column => (loc.left, loc.right()),
                Axis::Row => (loc.top, loc.bottom()),
            };
            b.positions[k] <= lo && hi <= b.positions[k] + b.extent
        })
    }

    /// Swaps rows and columns of every mask and of the metadata.
    pub fn transpose(&self) -> Self {
        let assignment = self.assignment.as_ref().map(|a| {
            let p = a.partition;
            let t = p.transpose();
            let mut mask_of_block = Vec::with_capacity(a.mask_of_block.len());
            for q in 0..t.rows() {
                for r in 0..t.cols() {
                    mask_of_block.push(a.mask_of(r, q));
                }
            }
            BlockAssignment {
                partition: t,
                mask_of_block,
            }
        });
        let bands = self.bands.as_ref().map(|b| Bands {
            axis: match b.axis {
                Axis::Column => Axis::Row,
                Axis::Row => Axis::Column,
            },
            ..b.clone()
        });
        Self {
            masks: self.masks.iter().map(MaskGrid::transpose).collect(),
            kind: self.kind,
            scheme: match self.scheme {
                Scheme::Column => Scheme::Row,
                Scheme::Row => Scheme::Column,
                Scheme::DetectionColumn => Scheme::DetectionRow,
                Scheme::DetectionRow => Scheme::DetectionColumn,
                other => other,
            },
            threat: self.threat.transposed(),
            declared_strength: self.declared_strength,
            assignment,
            bands,
        }
    }

    /// Recomputes the structural guarantee instead of trusting metadata:
    /// block uniqueness and `T <= declared` for recovery, coverage for detection.
    pub fn verify(&self) -> Result<()> {
        match self.kind {
            MaskSetKind::Recovery => {
                if self.assignment.is_some() && !verify_block_uniqueness(self) {
                    return Err(Error::Verification(format!(
                        "{} mask set: some block is not visible in exactly one mask",
                        self.scheme
                    )));
                }
                let declared = self.declared_strength.unwrap_or(usize::MAX);
                let (t, loc) = strength_witness(self, &self.threat);
                if t > declared {
                    return Err(Error::Verification(format!(
                        "{} mask set: strength {t} exceeds declared {declared} at {loc:?}",
                        self.scheme
                    )));
                }
                Ok(())
            }
            MaskSetKind::Detection => {
                if let Some(loc) = uncovered_location(self, &self.threat) {
                    return Err(Error::Verification(format!(
                        "{} mask set: no mask covers location {loc:?}",
                        self.scheme
                    )));
                }
                Ok(())
            }
        }
    }
}

fn check_mask_dims(masks: &[MaskGrid], tm: &ThreatModel) -> Result<()> {
    for m in masks {
        if m.height() != tm.image_height || m.width() != tm.image_width {
            return Err(Error::dims(
                format!("{}x{}", tm.image_height, tm.image_width),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
    }
    Ok(())
}

fn recovery_from_assignment(
    partition: &BlockPartition,
    k: usize,
    mask_of_block: Vec<usize>,
    declared_strength: usize,
    scheme: Scheme,
) -> Result<MaskSet> {
    let cols = partition.cols();
    let masks = (0..k)
        .map(|mask| {
            MaskGrid::from_fn(partition.image_height, partition.image_width, |i, j| {
                let (q, r) = partition.block_of(i, j);
                mask_of_block[q * cols + r] == mask
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = MaskSet {
        masks,
        kind: MaskSetKind::Recovery,
        scheme,
        threat: partition.threat(),
        declared_strength: Some(declared_strength),
        assignment: Some(BlockAssignment {
            partition: *partition,
            mask_of_block,
        }),
        bands: None,
    };
    let empty = set.empty_masks();
    if !empty.is_empty() {
        warn!(scheme = %scheme, ?empty, "masks with no visible block");
    }
    Ok(set)
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2 masks, got {k}")));
    }
    Ok(())
}

/// Block column `r` is visible in mask `r mod K`. `T = 2`.
pub fn build_column_masks(partition: &BlockPartition, k: usize) -> Result<MaskSet> {
    check_k(k)?;
    let assignment = (0..partition.rows())
        .flat_map(|_| (0..partition.cols()).map(move |r| r % k))
        .collect();
    recovery_from_assignment(partition, k, assignment, 2, Scheme::Column)
}

/// Block row `q` is visible in mask `q mod K`. `T = 2`.
pub fn build_row_masks(partition: &BlockPartition, k: usize) -> Result<MaskSet> {
    check_k(k)?;
    let cols = partition.cols();
    let assignment = (0..partition.rows())
        .flat_map(|q| std::iter::repeat_n(q % k, cols))
        .collect();
    recovery_from_assignment(partition, k, assignment, 2, Scheme::Row)
}

/// Mask indices for the 3-mask layout: even block rows start with a single
/// block followed by pairs, odd rows are pairs from the first block, and a
/// running counter (mod K) continues across rows. In any 2x2 block window one
/// of the two rows holds a pair, so a patch meets at most three masks.
pub fn three_mask_assignment(rows: usize, cols: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * cols);
    let mut counter = 0usize;
    for q in 0..rows {
        let mut r = 0;
        while r < cols {
            let group = if q % 2 == 0 && r == 0 { 1 } else { 2 };
            let n = group.min(cols - r);
            out.extend(std::iter::repeat_n(counter % k, n));
            counter += 1;
            r += n;
        }
    }
    out
}

pub fn build_3mask(partition: &BlockPartition, k: usize) -> Result<MaskSet> {
    check_k(k)?;
    if k < 7 {
        warn!(k, "3-mask needs K >= 7 to certify a single patch");
    }
    let assignment = three_mask_assignment(partition.rows(), partition.cols(), k);
    let set = recovery_from_assignment(partition, k, assignment, 3, Scheme::ThreeMask)?;
    let (t, loc) = strength_witness(&set, &set.threat);
    if t > 3 {
        return Err(Error::Verification(format!(
            "3-mask on {}x{} image with {}x{} blocks, K={k}: strength {t} at {loc:?}",
            partition.image_height,
            partition.image_width,
            partition.block_height,
            partition.block_width
        )));
    }
    Ok(set)
}

/// 3x3 tiling of the nine masks for `K = 9`, row-major cyclic otherwise.
pub fn four_mask_assignment(rows: usize, cols: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * cols);
    for q in 0..rows {
        for r in 0..cols {
            out.push(if k == 9 {
                (q % 3) * 3 + r % 3
            } else {
                (q * cols + r) % k
            });
        }
    }
    out
}

pub fn build_4mask(partition: &BlockPartition, k: usize) -> Result<MaskSet> {
    check_k(k)?;
    if k < 9 {
        warn!(k, "4-mask needs K >= 9 to certify a single patch");
    }
    let assignment = four_mask_assignment(partition.rows(), partition.cols(), k);
    let set = recovery_from_assignment(partition, k, assignment, 4, Scheme::FourMask)?;
    let (t, loc) = strength_witness(&set, &set.threat);
    if t > 4 {
        return Err(Error::Verification(format!(
            "internal error: 4-mask strength {t} at {loc:?}"
        )));
    }
    Ok(set)
}

/// Recovery set for a built-in recovery scheme with blocks the size of `tm`'s patch.
pub fn build_recovery(scheme: Scheme, tm: &ThreatModel, k: usize) -> Result<MaskSet> {
    let p = BlockPartition::for_threat(tm)?;
    match scheme {
        Scheme::Column => build_column_masks(&p, k),
        Scheme::Row => build_row_masks(&p, k),
        Scheme::ThreeMask => build_3mask(&p, k),
        Scheme::FourMask => build_4mask(&p, k),
        other => Err(Error::InvalidArgument(format!(
            "{other} is not a recovery scheme"
        ))),
    }
}

/// Band start positions `0, s, 2s, ...`, the last one clamped flush with the
/// far edge.
pub fn band_positions(length: usize, extent: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        out.push(pos.min(length - extent));
        if pos + extent >= length {
            break;
        }
        pos += stride;
    }
    out
}

/// Column bands of width `mask_width` with an explicit stride. The covering
/// guarantee only holds for `stride <= mask_width - patch_width + 1`.
pub fn build_detection_column_masks_with_stride(
    tm: &ThreatModel,
    mask_width: usize,
    stride: usize,
) -> Result<MaskSet> {
    tm.validate()?;
    if mask_width < tm.patch_width || mask_width > tm.image_width {
        return Err(Error::InvalidGeometry(format!(
            "detection mask width {mask_width} must lie in [{}, {}]",
            tm.patch_width, tm.image_width
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let positions = band_positions(tm.image_width, mask_width, stride);
    let masks = positions
        .iter()
        .map(|&pos| {
            MaskGrid::from_fn(tm.image_height, tm.image_width, |_, j| {
                !(pos..pos + mask_width).contains(&j)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let threat = ThreatModel {
        num_patches: 1,
        ..*tm
    };
    Ok(MaskSet {
        masks,
        kind: MaskSetKind::Detection,
        scheme: Scheme::DetectionColumn,
        threat,
        declared_strength: None,
        assignment: None,
        bands: Some(Bands {
            axis: Axis::Column,
            extent: mask_width,
            stride,
            positions,
        }),
    })
}

/// Column bands of width `W'' = mask_width` at stride `W'' - W' + 1`, giving
/// `ceil((W - W'') / s) + 1` masks.
pub fn build_detection_column_masks(tm: &ThreatModel, mask_width: usize) -> Result<MaskSet> {
    let stride = mask_width.saturating_sub(tm.patch_width) + 1;
    let set = build_detection_column_masks_with_stride(tm, mask_width, stride)?;
    set.verify()?;
    Ok(set)
}

pub fn build_detection_row_masks_with_stride(
    tm: &ThreatModel,
    mask_height: usize,
    stride: usize,
) -> Result<MaskSet> {
    Ok(build_detection_column_masks_with_stride(&tm.transposed(), mask_height, stride)?.transpose())
}

pub fn build_detection_row_masks(tm: &ThreatModel, mask_height: usize) -> Result<MaskSet> {
    let stride = mask_height.saturating_sub(tm.patch_height) + 1;
    let set = build_detection_row_masks_with_stride(tm, mask_height, stride)?;
    set.verify()?;
    Ok(set)
}

/// Prefix sums of visible pixels, `(H + 1) x (W + 1)`.
struct VisibleCounts {
    width: usize,
    sums: Vec<u32>,
}

impl VisibleCounts {
    fn new(mask: &MaskGrid) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let stride = w + 1;
        let mut sums = vec![0u32; (h + 1) * stride];
        for i in 0..h {
            for j in 0..w {
                sums[(i + 1) * stride + j + 1] = u32::from(mask.is_visible(i, j))
                    + sums[i * stride + j + 1]
                    + sums[(i + 1) * stride + j]
                    - sums[i * stride + j];
            }
        }
        Self { width: stride, sums }
    }

    fn visible_in(&self, loc: &PatchLocation) -> u32 {
        let s = self.width;
        let (t, l, b, r) = (loc.top, loc.left, loc.bottom(), loc.right());
        self.sums[b * s + r] + self.sums[t * s + l] - self.sums[t * s + r] - self.sums[b * s + l]
    }
}

fn locations_for(ms: &MaskSet, tm: &ThreatModel) -> Vec<PatchLocation> {
    assert!(
        ms.masks.iter().all(|m| m.height() == tm.image_height && m.width() == tm.image_width),
        "mask set does not match the threat model's image size"
    );
    enumerate_locations(tm).expect("valid threat model")
}

/// Exhaustive strength plus a location attaining it (`None` when no location
/// touches any mask).
pub fn strength_witness(ms: &MaskSet, tm: &ThreatModel) -> (usize, Option<PatchLocation>) {
    let counts: Vec<VisibleCounts> = ms.masks.iter().map(VisibleCounts::new).collect();
    let affected: Vec<usize> = locations_for(ms, tm)
        .par_iter()
        .map(|loc| counts.iter().filter(|c| c.visible_in(loc) > 0).count())
        .collect();
    let locs = locations_for(ms, tm);
    // earliest location attaining the maximum
    let mut best = (0, None);
    for (loc, &t) in locs.iter().zip(&affected) {
        if t > best.0 {
            best = (t, Some(*loc));
        }
    }
    best
}

/// `T(M)`: the maximum over all placements of the number of masks that leave
/// some patch pixel visible.
pub fn compute_strength(ms: &MaskSet, tm: &ThreatModel) -> usize {
    strength_witness(ms, tm).0
}

/// First placement (row-major) hidden by no mask.
pub fn uncovered_location(ms: &MaskSet, tm: &ThreatModel) -> Option<PatchLocation> {
    let counts: Vec<VisibleCounts> = ms.masks.iter().map(VisibleCounts::new).collect();
    locations_for(ms, tm)
        .into_par_iter()
        .find_first(|loc| counts.iter().all(|c| c.visible_in(loc) > 0))
}

/// Every placement is hidden by at least one mask.
pub fn verify_detection_coverage(ms: &MaskSet, tm: &ThreatModel) -> bool {
    uncovered_location(ms, tm).is_none()
}

/// Every block is fully visible in its assigned mask and fully hidden in all others.
pub fn verify_block_uniqueness(ms: &MaskSet) -> bool {
    let Some(a) = &ms.assignment else {
        return false;
    };
    let p = &a.partition;
    if a.mask_of_block.len() != p.block_count() {
        return false;
    }
    for q in 0..p.rows() {
        for r in 0..p.cols() {
            let owner = a.mask_of(q, r);
            if owner >= ms.masks.len() {
                return false;
            }
            let rect = p.block_rect(q, r);
            for (k, m) in ms.masks.iter().enumerate() {
                let want = k == owner;
                for i in rect.top..rect.bottom() {
                    for j in rect.left..rect.right() {
                        if m.is_visible(i, j) != want {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSetManifest {
    builder: Scheme,
    builder_version: u32,
    kind: MaskSetKind,
    k: usize,
    t: Option<usize>,
    patch_height: usize,
    patch_width: usize,
    image_height: usize,
    image_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block_assignment: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bands: Option<BandsManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BandsManifest {
    axis: Axis,
    extent: usize,
    stride: usize,
    positions: Vec<usize>,
}

pub fn mask_file_name(k: usize) -> String {
    format!("mask_{k:03}.pgm")
}

/// Writes `mask_000.pgm ... mask_{K-1}.pgm` and `maskset.json` into `dir`.
pub fn save_maskset(dir: &Path, ms: &MaskSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, m) in ms.masks.iter().enumerate() {
        io::write_mask(&dir.join(mask_file_name(k)), m)?;
    }
    let manifest = MaskSetManifest {
        builder: ms.scheme,
        builder_version: BUILDER_VERSION,
        kind: ms.kind,
        k: ms.masks.len(),
        t: ms.declared_strength,
        patch_height: ms.threat.patch_height,
        patch_width: ms.threat.patch_width,
        image_height: ms.threat.image_height,
        image_width: ms.threat.image_width,
        block_assignment: ms.assignment.as_ref().map(|a| {
            a.mask_of_block
                .chunks(a.partition.cols())
                .map(<[usize]>::to_vec)
                .collect()
        }),
        bands: ms.bands.as_ref().map(|b| BandsManifest {
            axis: b.axis,
            extent: b.extent,
            stride: b.stride,
            positions: b.positions.clone(),
        }),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    io::write_atomic(&dir.join("maskset.json"), &json)
}

/// Loads a mask set directory. Structure is not re-verified; call
/// [`MaskSet::verify`] before relying on it.
pub fn load_maskset(dir: &Path) -> Result<MaskSet> {
    let manifest_path = dir.join("maskset.json");
    let manifest: MaskSetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let threat = ThreatModel::new(
        manifest.image_height,
        manifest.image_width,
        manifest.patch_height,
        manifest.patch_width,
    )?;
    let masks = (0..manifest.k)
        .map(|k| io::read_mask(&dir.join(mask_file_name(k))))
        .collect::<Result<Vec<_>>>()?;
    check_mask_dims(&masks, &threat)?;
    let assignment = match manifest.block_assignment {
        Some(rows) => {
            let partition = BlockPartition::for_threat(&threat)?;
            if rows.len() != partition.rows() || rows.iter().any(|r| r.len() != partition.cols()) {
                return Err(Error::format(&manifest_path, "block_assignment shape mismatch"));
            }
            Some(BlockAssignment {
                partition,
                mask_of_block: rows.into_iter().flatten().collect(),
            })
        }
        None => None,
    };
    let bands = match manifest.bands {
        Some(b) => {
            if b.positions.len() != masks.len() {
                return Err(Error::format(&manifest_path, "bands/positions length mismatch"));
            }
            Some(Bands {
                axis: b.axis,
                extent: b.extent,
                stride: b.stride,
                positions: b.positions,
            })
        }
        None => None,
    };
    if manifest.kind == MaskSetKind::Recovery && manifest.t.is_none() {
        return Err(Error::format(&manifest_path, "recovery set without strength t"));
    }
    Ok(MaskSet {
        masks,
        kind: manifest.kind,
        scheme: manifest.builder,
        threat,
        declared_strength: manifest.t,
        assignment,
        bands,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::covers;

    /// Independent strength oracle: per-pixel `covers` over every placement.
    fn naive_strength(ms: &MaskSet, tm: &ThreatModel) -> usize {
        enumerate_locations(tm)
            .unwrap()
            .into_iter()
            .map(|loc| {
                ms.masks()
                    .iter()
                    .filter(|m| !covers(m, loc).unwrap())
                    .count()
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn column_masks_w10() {
        let p = BlockPartition::new(6, 10, 2, 2).unwrap();
        let ms = build_column_masks(&p, 5).unwrap();
        assert_eq!(ms.len(), 5);
        for k in 0..5 {
            for j in 0..10 {
                assert_eq!(ms.masks()[k].is_visible(0, j), j / 2 == k);
            }
        }
        assert_eq!(compute_strength(&ms, ms.threat()), 2);
        assert_eq!(naive_strength(&ms, ms.threat()), 2);
        assert_eq!(ms.threat().location_count(), 9 * 5);
    }

    #[test]
    fn column_masks_single_column() {
        let p = BlockPartition::new(4, 4, 4, 4).unwrap();
        let ms = build_column_masks(&p, 5).unwrap();
        assert_eq!(ms.masks()[0].visible_count(), 16);
        assert_eq!(ms.empty_masks(), vec![1, 2, 3, 4]);
        assert_eq!(compute_strength(&ms, ms.threat()), 1);
        assert!(build_column_masks(&p, 1).is_err());
    }

    #[test]
    fn column_masks_w20_wraps() {
        let p = BlockPartition::new(4, 20, 2, 2).unwrap();
        let ms = build_column_masks(&p, 5).unwrap();
        let a = ms.block_assignment().unwrap();
        for r in 0..10 {
            assert_eq!(a.mask_of(0, r), r % 5);
        }
        assert_eq!(compute_strength(&ms, ms.threat()), 2);
    }

    #[test]
    fn row_masks() {
        let p = BlockPartition::new(10, 7, 2, 3).unwrap();
        let ms = build_row_masks(&p, 5).unwrap();
        assert_eq!(compute_strength(&ms, ms.threat()), 2);

        let p = BlockPartition::new(6, 4, 2, 2).unwrap();
        let ms = build_row_masks(&p, 5).unwrap();
        assert_eq!(ms.empty_masks(), vec![3, 4]);
        for q in 0..3 {
            assert!(ms.masks()[q].is_visible(2 * q, 0));
        }
    }

    #[test]
    fn row_is_transposed_column() {
        let p = BlockPartition::new(9, 13, 2, 3).unwrap();
        let rows = build_row_masks(&p, 5).unwrap();
        let cols = build_column_masks(&p.transpose(), 5).unwrap().transpose();
        assert_eq!(rows, cols);
    }

    #[test]
    fn three_mask_pattern() {
        let a = three_mask_assignment(6, 6, 7);
        // row 0: 0 | 1 1 | 2 2 | 3 ; row 1: 4 4 | 5 5 | 6 6 ; row 2 wraps to 0
        assert_eq!(&a[0..6], &[0, 1, 1, 2, 2, 3]);
        assert_eq!(&a[6..12], &[4, 4, 5, 5, 6, 6]);
        assert_eq!(&a[12..18], &[0, 1, 1, 2, 2, 3]);
        for q in 0..5 {
            for r in 0..5 {
                let mut w = vec![a[q * 6 + r], a[q * 6 + r + 1], a[(q + 1) * 6 + r], a[(q + 1) * 6 + r + 1]];
                w.sort();
                w.dedup();
                assert!(w.len() <= 3, "window at ({q},{r}) has {w:?}");
            }
        }
        let p = BlockPartition::new(12, 12, 2, 2).unwrap();
        let ms = build_3mask(&p, 7).unwrap();
        assert_eq!(compute_strength(&ms, ms.threat()), 3);
        assert_eq!(naive_strength(&ms, ms.threat()), 3);
    }

    #[test]
    fn three_mask_small_grids() {
        let p = BlockPartition::new(3, 3, 3, 3).unwrap();
        let ms = build_3mask(&p, 7).unwrap();
        assert_eq!(ms.block_assignment().unwrap().mask_of_block, vec![0]);
        assert_eq!(compute_strength(&ms, ms.threat()), 1);

        let p = BlockPartition::new(8, 16, 2, 2).unwrap();
        let ms = build_3mask(&p, 7).unwrap();
        assert_eq!(compute_strength(&ms, ms.threat()), 3);
    }

    #[test]
    fn four_mask_tiling() {
        let a = four_mask_assignment(6, 6, 9);
        for q in 0..4 {
            for r in 0..4 {
                let mut w: Vec<usize> = (0..3)
                    .flat_map(|dq| (0..3).map(move |dr| (dq, dr)))
                    .map(|(dq, dr)| a[(q + dq) * 6 + r + dr])
                    .collect();
                w.sort();
                assert_eq!(w, (0..9).collect::<Vec<_>>());
            }
        }
        assert_eq!(four_mask_assignment(2, 2, 9), vec![0, 1, 3, 4]);
        let p = BlockPartition::new(4, 4, 2, 2).unwrap();
        let ms = build_4mask(&p, 9).unwrap();
        assert_eq!(compute_strength(&ms, ms.threat()), 4);
        let p = BlockPartition::new(4, 4, 2, 1).unwrap();
        let ms = build_4mask(&p, 9).unwrap();
        // one-pixel-wide blocks cannot be straddled horizontally
        assert_eq!(compute_strength(&ms, ms.threat()), 2);
    }

    #[test]
    fn detection_columns() {
        let tm = ThreatModel::new(4, 10, 2, 3).unwrap();
        let full = build_detection_column_masks(&tm, 3).unwrap();
        assert_eq!(full.len(), 8);
        assert_eq!(full.bands().unwrap().positions, (0..8).collect::<Vec<_>>());
        assert!(verify_detection_coverage(&full, &tm));

        let strided = build_detection_column_masks(&tm, 5).unwrap();
        assert_eq!(strided.bands().unwrap().positions, vec![0, 3, 5]);
        assert!(verify_detection_coverage(&strided, &tm));

        let one = build_detection_column_masks(&ThreatModel::new(3, 3, 3, 3).unwrap(), 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.masks()[0].visible_count(), 0);

        assert!(build_detection_column_masks(&tm, 2).is_err());
        assert!(build_detection_column_masks(&tm, 11).is_err());
    }

    #[test]
    fn detection_mask_count_formula() {
        for w in 3..20 {
            for pw in 1..=w {
                for mw in pw..=w {
                    let tm = ThreatModel::new(2, w, 1, pw).unwrap();
                    let ms = build_detection_column_masks(&tm, mw).unwrap();
                    let s = mw - pw + 1;
                    assert_eq!(ms.len(), (w - mw).div_ceil(s) + 1, "w={w} pw={pw} mw={mw}");
                }
            }
        }
    }

    #[test]
    fn stride_one_too_large_leaves_gap() {
        let tm = ThreatModel::new(4, 12, 2, 3).unwrap();
        let ms = build_detection_column_masks_with_stride(&tm, 4, 4 - 3 + 2).unwrap();
        assert!(!verify_detection_coverage(&ms, &tm));
        // gap starts right after the first band's last fully-hidden start
        assert_eq!(uncovered_location(&ms, &tm).unwrap().left, 2);
    }

    #[test]
    fn detection_rows_transpose() {
        let tm = ThreatModel::new(10, 4, 3, 2).unwrap();
        let ms = build_detection_row_masks(&tm, 5).unwrap();
        assert_eq!(ms.bands().unwrap().positions, vec![0, 3, 5]);
        assert_eq!(ms.scheme(), Scheme::DetectionRow);
        assert!(verify_detection_coverage(&ms, &tm));
        assert!(ms.masks()[1].is_visible(0, 0));
        assert!(!ms.masks()[1].is_visible(3, 0));
    }

    #[test]
    fn all_masked_single() {
        let tm = ThreatModel::new(5, 5, 2, 2).unwrap();
        let ms = MaskSet::custom_detection(vec![MaskGrid::all_masked(5, 5).unwrap()], tm).unwrap();
        assert!(verify_detection_coverage(&ms, &tm));
        assert_eq!(compute_strength(&ms, &tm), 0);
    }

    #[test]
    fn block_uniqueness() {
        let p = BlockPartition::new(7, 9, 2, 2).unwrap();
        for ms in [
            build_column_masks(&p, 5).unwrap(),
            build_row_masks(&p, 5).unwrap(),
            build_3mask(&p, 7).unwrap(),
            build_4mask(&p, 9).unwrap(),
        ] {
            assert!(verify_block_uniqueness(&ms), "{}", ms.scheme());
        }
        let mut ms = build_column_masks(&p, 5).unwrap();
        ms.mask_mut(1).set_visible(0, 0, true);
        assert!(!verify_block_uniqueness(&ms));
        assert!(ms.verify().is_err());

        let a = ms.block_assignment().unwrap().clone();
        let empty = MaskSet::custom_recovery(vec![], a, 2).unwrap();
        assert!(!verify_block_uniqueness(&empty));
    }

    #[test]
    fn claims_cover_matches_pixels_for_builders() {
        let tm = ThreatModel::new(11, 13, 3, 2).unwrap();
        let sets = [
            build_recovery(Scheme::Column, &tm, 5).unwrap(),
            build_recovery(Scheme::ThreeMask, &tm, 7).unwrap(),
            build_detection_column_masks(&tm, 4).unwrap(),
            build_detection_row_masks(&tm, 5).unwrap(),
        ];
        for ms in &sets {
            for loc in enumerate_locations(&tm).unwrap() {
                for k in 0..ms.len() {
                    assert_eq!(ms.claims_cover(k, loc), Some(covers(&ms.masks()[k], loc).unwrap()));
                }
            }
        }
    }

    #[test]
    fn maskset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let tm = ThreatModel::new(9, 11, 2, 3).unwrap();
        for ms in [
            build_recovery(Scheme::ThreeMask, &tm, 7).unwrap(),
            build_detection_row_masks(&tm, 3).unwrap(),
        ] {
            let sub = dir.path().join(ms.scheme().name());
            save_maskset(&sub, &ms).unwrap();
            assert!(sub.join("mask_000.pgm").exists());
            assert_eq!(load_maskset(&sub).unwrap(), ms);
        }
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("3mask/maskset.json")).unwrap()).unwrap();
        assert_eq!(json["k"], 7);
        assert_eq!(json["t"], 3);
        assert_eq!(json["builder"], "3mask");
        assert_eq!(json["kind"], "recovery");
    }
}
