//! Demasking (`g`) and segmentation (`f`) backends, and the segmentation set
//! `S[k] = f(g(x ⊙ M[k]))`.
//!
//! A demasker must be a function of the visible pixels and the mask only.
//! Masked buffers are zero-filled by [`apply_mask`], but a backend that reads
//! that fill as content breaks every certificate built on top of it.

mod process;
pub mod stub;
mod toy;

pub use process::{
    Handshake, Op, ProcessBackend, ProcessConfig, Request, Response, Status, PROTOCOL_VERSION,
};
pub use toy::{
    ConstantSegmenter, NearestFillDemasker, SolidFillDemasker, ToyOracleSegmenter, ToyRule,
};

use crate::error::{Error, Result};
use crate::grid::{apply_mask, ImageGrid, MaskedImage, SegMap};
use crate::maskgen::MaskSet;

pub trait DemaskingBackend: Send + Sync {
    fn demask(&self, input: &MaskedImage) -> Result<ImageGrid>;

    /// Demasks several inputs; results are in input order.
    fn demask_batch(&self, inputs: &[MaskedImage]) -> Result<Vec<ImageGrid>> {
        inputs
            .iter()
            .enumerate()
            .map(|(k, m)| self.demask(m).map_err(|e| tag_mask(e, k)))
            .collect()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String;
}

pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, image: &ImageGrid) -> Result<SegMap>;

    fn segment_batch(&self, images: &[ImageGrid]) -> Result<Vec<SegMap>> {
        images
            .iter()
            .enumerate()
            .map(|(k, x)| self.segment(x).map_err(|e| tag_mask(e, k)))
            .collect()
    }

    fn num_classes(&self) -> u32;

    fn is_deterministic(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String;
}

fn tag_mask(e: Error, k: usize) -> Error {
    match e {
        Error::Backend { mask_index: None, message } => Error::Backend {
            mask_index: Some(k),
            message,
        },
        e @ (Error::Backend { .. }
        | Error::Protocol { .. }
        | Error::Timeout { .. }
        | Error::BackendDimension { .. }) => e,
        other => Error::Backend {
            mask_index: Some(k),
            message: other.to_string(),
        },
    }
}

/// Segmentations of the demasked images, aligned with the mask set order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSet {
    entries: Vec<SegMap>,
}

impl SegSet {
    pub fn new(entries: Vec<SegMap>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidArgument("segmentation set is empty".into()));
        };
        for s in &entries[1..] {
            first.ensure_same_dims(s)?;
            if s.num_classes() != first.num_classes() {
                return Err(Error::InvalidArgument(format!(
                    "segmentation set mixes {} and {} classes",
                    first.num_classes(),
                    s.num_classes()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SegMap] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn height(&self) -> usize {
        self.entries[0].height()
    }

    pub fn width(&self) -> usize {
        self.entries[0].width()
    }

    pub fn num_classes(&self) -> u32 {
        self.entries[0].num_classes()
    }
}

/// `S[k] = f(g(x ⊙ M[k]))` for every mask, in mask order.
pub fn build_segmentation_set(
    image: &ImageGrid,
    ms: &MaskSet,
    demasker: &dyn DemaskingBackend,
    segmenter: &dyn SegmentationBackend,
) -> Result<SegSet> {
    let masked = ms
        .masks()
        .iter()
        .map(|m| apply_mask(image, m))
        .collect::<Result<Vec<_>>>()?;
    let demasked = demasker.demask_batch(&masked)?;
    if demasked.len() != masked.len() {
        return Err(Error::Backend {
            mask_index: None,
            message: format!("demasker returned {} images for {} masks", demasked.len(), masked.len()),
        });
    }
    for (k, d) in demasked.iter().enumerate() {
        if !d.same_shape(image) {
            return Err(Error::Backend {
                mask_index: Some(k),
                message: format!("demasked image is {}, expected {}", d.shape_string(), image.shape_string()),
            });
        }
    }
    let segs = segmenter.segment_batch(&demasked)?;
    if segs.len() != demasked.len() {
        return Err(Error::Backend {
            mask_index: None,
            message: format!("segmenter returned {} maps for {} images", segs.len(), demasked.len()),
        });
    }
    for (k, s) in segs.iter().enumerate() {
        if s.height() != image.height() || s.width() != image.width() {
            return Err(Error::Backend {
                mask_index: Some(k),
                message: format!(
                    "segmentation is {}x{}, expected {}x{}",
                    s.height(),
                    s.width(),
                    image.height(),
                    image.width()
                ),
            });
        }
        if s.num_classes() != segmenter.num_classes() {
            return Err(Error::Backend {
                mask_index: Some(k),
                message: format!(
                    "segmentation has {} classes, backend advertises {}",
                    s.num_classes(),
                    segmenter.num_classes()
                ),
            });
        }
    }
    SegSet::new(segs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{apply_patch, covers, enumerate_locations, ThreatModel};
    use crate::maskgen::{build_detection_column_masks, build_recovery, Scheme};

    fn two_region(h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, 3, |_, j, c| {
            let red = j < w / 2;
            match (red, c) {
                (true, 0) | (false, 1) => 0.9,
                _ => 0.1,
            }
        })
        .unwrap()
    }

    #[test]
    fn identity_and_constant() {
        let x = two_region(8, 8);
        let tm = ThreatModel::new(8, 8, 2, 2).unwrap();
        let ms = build_recovery(Scheme::Column, &tm, 5).unwrap();
        let s = build_segmentation_set(
            &x,
            &ms,
            &SolidFillDemasker::new(0.0),
            &ConstantSegmenter::new(4, 3),
        )
        .unwrap();
        assert_eq!(s.len(), 5);
        for e in s.entries() {
            assert_eq!(e, &SegMap::filled(8, 8, 4, 3).unwrap());
        }
    }

    #[test]
    fn toy_pipeline_recovers_two_regions() {
        let x = two_region(16, 16);
        let truth = SegMap::from_fn(16, 16, 3, |_, j| u16::from(j >= 8)).unwrap();
        let tm = ThreatModel::new(16, 16, 2, 2).unwrap();
        let ms = build_recovery(Scheme::FourMask, &tm, 9).unwrap();
        let f = ToyOracleSegmenter::dominant_channel(3);
        let s = build_segmentation_set(&x, &ms, &NearestFillDemasker::new(), &f).unwrap();
        // nearest fill stays on the correct side everywhere except within a
        // block of the boundary
        for e in s.entries() {
            for i in 0..16 {
                for j in (0..5).chain(11..16) {
                    assert_eq!(e.get(i, j), truth.get(i, j));
                }
            }
        }
    }

    #[test]
    fn covered_masks_give_identical_segmentations() {
        let x = two_region(12, 12);
        let tm = ThreatModel::new(12, 12, 3, 3).unwrap();
        let ms = build_detection_column_masks(&tm, 3).unwrap();
        let g = NearestFillDemasker::new();
        let f = ToyOracleSegmenter::dominant_channel(3);
        let clean = build_segmentation_set(&x, &ms, &g, &f).unwrap();
        let content = ImageGrid::filled(12, 12, 3, 1.0).unwrap();
        for loc in enumerate_locations(&tm).unwrap() {
            let xp = apply_patch(&x, &content, loc).unwrap();
            let attacked = build_segmentation_set(&xp, &ms, &g, &f).unwrap();
            for k in 0..ms.len() {
                if covers(&ms.masks()[k], loc).unwrap() {
                    assert_eq!(clean.entries()[k], attacked.entries()[k]);
                }
            }
        }
    }

    struct Failing;
    impl DemaskingBackend for Failing {
        fn demask(&self, input: &MaskedImage) -> Result<ImageGrid> {
            if input.mask().is_visible(0, 0) {
                Ok(input.image().clone())
            } else {
                Err(Error::Backend {
                    mask_index: None,
                    message: "boom".into(),
                })
            }
        }
        fn fingerprint(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn backend_failure_carries_mask_index() {
        let x = two_region(4, 8);
        let tm = ThreatModel::new(4, 8, 2, 2).unwrap();
        let ms = build_recovery(Scheme::Column, &tm, 5).unwrap();
        let err = build_segmentation_set(&x, &ms, &Failing, &ConstantSegmenter::new(2, 0)).unwrap_err();
        assert!(matches!(err, Error::Backend { mask_index: Some(1), .. }), "{err}");
    }

    #[test]
    fn segset_rejects_mixed_shapes() {
        assert!(SegSet::new(vec![]).is_err());
        let a = SegMap::filled(2, 2, 3, 0).unwrap();
        let b = SegMap::filled(2, 3, 3, 0).unwrap();
        let c = SegMap::filled(2, 2, 4, 0).unwrap();
        assert!(SegSet::new(vec![a.clone(), b]).is_err());
        assert!(SegSet::new(vec![a, c]).is_err());
    }
}
