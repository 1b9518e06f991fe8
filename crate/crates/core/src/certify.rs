//! Pixel-wise certification.
//!
//! Recovery: the output is the per-pixel majority vote over the segmentation
//! set (ties to the smaller class index). A pixel is certified when all `K`
//! votes agree and `K >= 2NT + 1`: `N` patches can change at most `N*T`
//! votes, which leaves a strict majority untouched.
//!
//! Detection: the output is the plain model prediction `f(x)`. A pixel is
//! verified when `f(x)` agrees with every demasked segmentation; since some
//! mask hides any patch, a patched input that still verifies at a pixel
//! verified on the clean input must predict the same label there.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{build_segmentation_set, DemaskingBackend, SegSet, SegmentationBackend};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, SegMap};
use crate::io;
use crate::maskgen::{MaskSet, MaskSetKind, Scheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertMode {
    Recovery,
    Detection,
}

/// Provenance written to `cert.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertMeta {
    pub mode: CertMode,
    pub k: usize,
    pub t: Option<usize>,
    pub n: usize,
    pub scheme: Scheme,
    pub patch_height: usize,
    pub patch_width: usize,
    pub demasker: String,
    pub segmenter: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifiedOutput {
    segmentation: SegMap,
    certified: Vec<bool>,
    mode: CertMode,
    meta: Option<CertMeta>,
}

impl CertifiedOutput {
    pub fn new(segmentation: SegMap, certified: Vec<bool>, mode: CertMode) -> Result<Self> {
        if certified.len() != segmentation.labels().len() {
            return Err(Error::dims(
                format!("{} cert cells", segmentation.labels().len()),
                format!("{} cert cells", certified.len()),
            ));
        }
        Ok(Self {
            segmentation,
            certified,
            mode,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: CertMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn segmentation(&self) -> &SegMap {
        &self.segmentation
    }

    pub fn cert_map(&self) -> &[bool] {
        &self.certified
    }

    pub fn is_certified(&self, row: usize, col: usize) -> bool {
        self.certified[row * self.segmentation.width() + col]
    }

    pub fn mode(&self) -> CertMode {
        self.mode
    }

    pub fn meta(&self) -> Option<&CertMeta> {
        self.meta.as_ref()
    }

    pub fn certified_count(&self) -> usize {
        self.certified.iter().filter(|&&c| c).count()
    }

    pub fn certified_fraction(&self) -> f64 {
        self.certified_count() as f64 / self.certified.len() as f64
    }

    /// Label map where uncertified pixels carry the extra label `num_classes`.
    pub fn certification_labels(&self) -> Result<SegMap> {
        let uncertified = self.segmentation.num_classes();
        let labels = self
            .segmentation
            .labels()
            .iter()
            .zip(&self.certified)
            .map(|(&l, &c)| if c { l } else { uncertified as u16 })
            .collect();
        SegMap::new(
            self.segmentation.height(),
            self.segmentation.width(),
            uncertified + 1,
            labels,
        )
    }

    /// Writes `segmentation.{pgm|seg}`, `cert.pgm` and `cert.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let seg = &self.segmentation;
        io::write_segmap(
            &dir.join(format!("segmentation.{}", io::segmap_extension(seg.num_classes()))),
            seg,
        )?;
        io::write_atomic(
            &dir.join("cert.pgm"),
            &io::encode_cert_map(seg.height(), seg.width(), &self.certified),
        )?;
        let report = CertReport {
            meta: self.meta.clone(),
            mode: self.mode,
            height: seg.height(),
            width: seg.width(),
            num_classes: seg.num_classes(),
            certified_pixels: self.certified_count(),
            certified_fraction: self.certified_fraction(),
        };
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        io::write_atomic(&dir.join("cert.json"), &json)
    }
}

#[derive(Serialize)]
struct CertReport {
    mode: CertMode,
    #[serde(flatten)]
    meta: Option<CertMeta>,
    height: usize,
    width: usize,
    num_classes: u32,
    certified_pixels: usize,
    certified_fraction: f64,
}

/// Minimum number of masks for certified recovery against `num_patches`
/// patches of a strength-`strength` mask set.
pub fn required_masks(strength: usize, num_patches: usize) -> usize {
    2 * num_patches * strength + 1
}

/// `Ok` iff `K >= 2NT + 1`.
pub fn check_recovery_condition(k: usize, strength: usize, num_patches: usize) -> Result<()> {
    if k == 0 || strength == 0 || num_patches == 0 {
        return Err(Error::InvalidArgument(format!(
            "K, T and N must be >= 1 (K={k}, T={strength}, N={num_patches})"
        )));
    }
    let required = required_masks(strength, num_patches);
    if k < required {
        return Err(Error::InsufficientMasks {
            k,
            strength,
            num_patches,
            required,
        });
    }
    Ok(())
}

/// Majority vote with ties to the smaller class; certified where unanimous.
pub fn recovery_vote(segset: &SegSet) -> Result<CertifiedOutput> {
    if segset.is_empty() {
        return Err(Error::InvalidArgument("empty segmentation set".into()));
    }
    let columns: Vec<&[u16]> = segset.entries().iter().map(SegMap::labels).collect();
    let n = columns[0].len();
    let mut labels = Vec::with_capacity(n);
    let mut certified = Vec::with_capacity(n);
    let mut votes: Vec<u16> = Vec::with_capacity(columns.len());
    for px in 0..n {
        let first = columns[0][px];
        if columns[1..].iter().all(|c| c[px] == first) {
            labels.push(first);
            certified.push(true);
            continue;
        }
        votes.clear();
        votes.extend(columns.iter().map(|c| c[px]));
        votes.sort_unstable();
        let (mut best, mut best_count) = (votes[0], 0);
        let mut run_start = 0;
        for i in 1..=votes.len() {
            if i == votes.len() || votes[i] != votes[run_start] {
                // ascending scan with strict > keeps the smallest label on ties
                if i - run_start > best_count {
                    best = votes[run_start];
                    best_count = i - run_start;
                }
                run_start = i;
            }
        }
        labels.push(best);
        certified.push(false);
    }
    CertifiedOutput::new(
        SegMap::new(segset.height(), segset.width(), segset.num_classes(), labels)?,
        certified,
        CertMode::Recovery,
    )
}

/// `f(x)` unchanged, verified where it agrees with every `S[k]`.
pub fn detection_verify(base: &SegMap, segset: &SegSet) -> Result<CertifiedOutput> {
    if segset.is_empty() {
        return Err(Error::InvalidArgument("empty segmentation set".into()));
    }
    base.ensure_same_dims(&segset.entries()[0])?;
    if base.num_classes() != segset.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "base has {} classes, segmentation set has {}",
            base.num_classes(),
            segset.num_classes()
        )));
    }
    let certified = base
        .labels()
        .iter()
        .enumerate()
        .map(|(px, &l)| segset.entries().iter().all(|s| s.labels()[px] == l))
        .collect();
    CertifiedOutput::new(base.clone(), certified, CertMode::Detection)
}

/// Recovery certification with a mask set verified once up front.
pub struct RecoveryCertifier<'a> {
    masks: &'a MaskSet,
    demasker: &'a dyn DemaskingBackend,
    segmenter: &'a dyn SegmentationBackend,
    num_patches: usize,
    strength: usize,
}

impl<'a> RecoveryCertifier<'a> {
    /// Refuses detection sets, sets whose measured strength exceeds the
    /// declared one, and `K < 2NT + 1`.
    pub fn new(
        masks: &'a MaskSet,
        demasker: &'a dyn DemaskingBackend,
        segmenter: &'a dyn SegmentationBackend,
        num_patches: usize,
    ) -> Result<Self> {
        if masks.kind() != MaskSetKind::Recovery {
            return Err(Error::InvalidArgument(
                "recovery certification needs a recovery mask set".into(),
            ));
        }
        masks.verify()?;
        let strength = masks.declared_strength().expect("recovery set declares T");
        check_recovery_condition(masks.len(), strength, num_patches)?;
        Ok(Self {
            masks,
            demasker,
            segmenter,
            num_patches,
            strength,
        })
    }

    pub fn segmentation_set(&self, image: &ImageGrid) -> Result<SegSet> {
        build_segmentation_set(image, self.masks, self.demasker, self.segmenter)
    }

    pub fn certify(&self, image: &ImageGrid) -> Result<CertifiedOutput> {
        let out = recovery_vote(&self.segmentation_set(image)?)?;
        Ok(out.with_meta(self.meta()))
    }

    pub fn meta(&self) -> CertMeta {
        let tm = self.masks.threat();
        CertMeta {
            mode: CertMode::Recovery,
            k: self.masks.len(),
            t: Some(self.strength),
            n: self.num_patches,
            scheme: self.masks.scheme(),
            patch_height: tm.patch_height,
            patch_width: tm.patch_width,
            demasker: self.demasker.fingerprint(),
            segmenter: self.segmenter.fingerprint(),
        }
    }
}

/// The smoothed model `h` as a segmenter in its own right.
impl SegmentationBackend for RecoveryCertifier<'_> {
    fn segment(&self, image: &ImageGrid) -> Result<SegMap> {
        Ok(recovery_vote(&self.segmentation_set(image)?)?.segmentation)
    }

    fn num_classes(&self) -> u32 {
        self.segmenter.num_classes()
    }

    fn is_deterministic(&self) -> bool {
        self.demasker.is_deterministic() && self.segmenter.is_deterministic()
    }

    fn fingerprint(&self) -> String {
        format!(
            "majority-vote({}, {}, K={})",
            self.demasker.fingerprint(),
            self.segmenter.fingerprint(),
            self.masks.len()
        )
    }
}

pub struct DetectionCertifier<'a> {
    masks: &'a MaskSet,
    demasker: &'a dyn DemaskingBackend,
    segmenter: &'a dyn SegmentationBackend,
}

impl<'a> DetectionCertifier<'a> {
    /// Refuses recovery sets, sets that leave some placement uncovered, and
    /// nondeterministic backends unless `allow_nondeterministic`.
    pub fn new(
        masks: &'a MaskSet,
        demasker: &'a dyn DemaskingBackend,
        segmenter: &'a dyn SegmentationBackend,
        allow_nondeterministic: bool,
    ) -> Result<Self> {
        if masks.kind() != MaskSetKind::Detection {
            return Err(Error::InvalidArgument(
                "detection certification needs a detection mask set".into(),
            ));
        }
        masks.verify()?;
        if !allow_nondeterministic {
            for (what, det) in [
                ("demasker", demasker.is_deterministic()),
                ("segmenter", segmenter.is_deterministic()),
            ] {
                if !det {
                    return Err(Error::Nondeterministic(format!(
                        "{what} is not deterministic; detection guarantees require fixed functions"
                    )));
                }
            }
        }
        Ok(Self {
            masks,
            demasker,
            segmenter,
        })
    }

    pub fn certify(&self, image: &ImageGrid) -> Result<CertifiedOutput> {
        let base = self.segmenter.segment(image)?;
        if base.height() != image.height() || base.width() != image.width() {
            return Err(Error::Backend {
                mask_index: None,
                message: "segmentation of the unmasked image has the wrong size".into(),
            });
        }
        let segset = build_segmentation_set(image, self.masks, self.demasker, self.segmenter)?;
        Ok(detection_verify(&base, &segset)?.with_meta(self.meta()))
    }

    pub fn meta(&self) -> CertMeta {
        let tm = self.masks.threat();
        CertMeta {
            mode: CertMode::Detection,
            k: self.masks.len(),
            t: None,
            n: 1,
            scheme: self.masks.scheme(),
            patch_height: tm.patch_height,
            patch_width: tm.patch_width,
            demasker: self.demasker.fingerprint(),
            segmenter: self.segmenter.fingerprint(),
        }
    }
}

/// Certified recovery against `num_patches` simultaneous patches. With
/// `num_patches = 2` on a possibly attacked input this is the instance-wise
/// (test-time) guarantee: the clean image is one patch away.
pub fn certify_recovery(
    image: &ImageGrid,
    masks: &MaskSet,
    demasker: &dyn DemaskingBackend,
    segmenter: &dyn SegmentationBackend,
    num_patches: usize,
) -> Result<CertifiedOutput> {
    RecoveryCertifier::new(masks, demasker, segmenter, num_patches)?.certify(image)
}

pub fn certify_detection(
    image: &ImageGrid,
    masks: &MaskSet,
    demasker: &dyn DemaskingBackend,
    segmenter: &dyn SegmentationBackend,
    allow_nondeterministic: bool,
) -> Result<CertifiedOutput> {
    DetectionCertifier::new(masks, demasker, segmenter, allow_nondeterministic)?.certify(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ConstantSegmenter, NearestFillDemasker, ToyOracleSegmenter};
    use crate::grid::ThreatModel;
    use crate::maskgen::{build_detection_column_masks, build_recovery};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_of(votes: &[&[u16]], classes: u32) -> SegSet {
        // each inner slice is one pixel's K votes; build K maps of 1 x P
        let k = votes[0].len();
        let maps = (0..k)
            .map(|m| SegMap::new(1, votes.len(), classes, votes.iter().map(|v| v[m]).collect()).unwrap())
            .collect();
        SegSet::new(maps).unwrap()
    }

    /// Tally with a counts array; argmax keeps the first (smallest) class.
    fn oracle_vote(votes: &[u16], classes: usize) -> (u16, bool) {
        let mut counts = vec![0usize; classes];
        for &v in votes {
            counts[v as usize] += 1;
        }
        let mut best = 0;
        for c in 1..classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        (best as u16, counts[best] == votes.len())
    }

    #[test]
    fn recovery_conditions() {
        assert!(check_recovery_condition(5, 2, 1).is_ok());
        assert!(matches!(
            check_recovery_condition(4, 2, 1),
            Err(Error::InsufficientMasks { required: 5, .. })
        ));
        assert!(check_recovery_condition(9, 2, 2).is_ok());
        assert!(check_recovery_condition(8, 2, 2).is_err());
        assert!(check_recovery_condition(7, 3, 1).is_ok());
        assert!(check_recovery_condition(9, 4, 1).is_ok());
        assert!(check_recovery_condition(8, 4, 1).is_err());
        assert!(check_recovery_condition(5, 0, 1).is_err());
    }

    #[test]
    fn vote_examples() {
        let out = recovery_vote(&set_of(&[&[3, 3, 3, 3, 3], &[1, 1, 2, 2, 0]], 4)).unwrap();
        assert_eq!(out.segmentation().labels(), &[3, 1]);
        assert_eq!(out.cert_map(), &[true, false]);
    }

    #[test]
    fn vote_matches_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<Vec<u16>> = (0..2000)
            .map(|_| (0..5).map(|_| rng.random_range(0..4u16)).collect())
            .collect();
        let refs: Vec<&[u16]> = pixels.iter().map(Vec::as_slice).collect();
        let out = recovery_vote(&set_of(&refs, 4)).unwrap();
        for (px, votes) in pixels.iter().enumerate() {
            let (label, unanimous) = oracle_vote(votes, 4);
            assert_eq!(out.segmentation().labels()[px], label);
            assert_eq!(out.cert_map()[px], unanimous);
            // permutation invariance
            let mut rev = votes.clone();
            rev.reverse();
            assert_eq!(oracle_vote(&rev, 4).0, label);
        }
    }

    #[test]
    fn detection_verify_cases() {
        let base = SegMap::from_fn(3, 3, 4, |i, j| ((i + j) % 4) as u16).unwrap();
        let same = SegSet::new(vec![base.clone(); 4]).unwrap();
        let out = detection_verify(&base, &same).unwrap();
        assert!(out.cert_map().iter().all(|&c| c));
        assert_eq!(out.segmentation(), &base);

        let mut labels = base.labels().to_vec();
        labels[4] = (labels[4] + 1) % 4;
        let flipped = SegMap::new(3, 3, 4, labels).unwrap();
        let set = SegSet::new(vec![base.clone(), flipped, base.clone()]).unwrap();
        let out = detection_verify(&base, &set).unwrap();
        assert_eq!(out.certified_count(), 8);
        assert!(!out.is_certified(1, 1));

        let wrong = SegSet::new(vec![SegMap::filled(3, 4, 4, 0).unwrap()]).unwrap();
        assert!(detection_verify(&base, &wrong).is_err());
    }

    #[test]
    fn detection_verify_random_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let rand_map = |rng: &mut ChaCha8Rng| {
                SegMap::from_fn(4, 5, 3, |_, _| rng.random_range(0..3u16)).unwrap()
            };
            let base = rand_map(&mut rng);
            let entries: Vec<SegMap> = (0..4).map(|_| rand_map(&mut rng)).collect();
            let full = detection_verify(&base, &SegSet::new(entries.clone()).unwrap()).unwrap();
            let fewer = detection_verify(&base, &SegSet::new(entries[..3].to_vec()).unwrap()).unwrap();
            for px in 0..20 {
                let expected = entries.iter().all(|e| e.labels()[px] == base.labels()[px]);
                assert_eq!(full.cert_map()[px], expected);
                assert!(!full.cert_map()[px] || fewer.cert_map()[px]);
            }
        }
    }

    #[test]
    fn certifiers_refuse_bad_inputs() {
        let tm = ThreatModel::new(12, 12, 3, 3).unwrap();
        let g = NearestFillDemasker::new();
        let f = ToyOracleSegmenter::dominant_channel(3);
        let x = ImageGrid::filled(12, 12, 3, 0.3).unwrap();
        let col4 = build_recovery(Scheme::Column, &tm, 4).unwrap();
        assert!(matches!(
            certify_recovery(&x, &col4, &g, &f, 1),
            Err(Error::InsufficientMasks { .. })
        ));
        let col5 = build_recovery(Scheme::Column, &tm, 5).unwrap();
        assert!(certify_recovery(&x, &col5, &g, &f, 2).is_err());
        let det = build_detection_column_masks(&tm, 3).unwrap();
        assert!(certify_recovery(&x, &det, &g, &f, 1).is_err());
        assert!(certify_detection(&x, &col5, &g, &f, false).is_err());

        let mut holed = det.clone();
        *holed.mask_mut(4) = crate::grid::MaskGrid::all_visible(12, 12).unwrap();
        assert!(matches!(
            certify_detection(&x, &holed, &g, &f, false),
            Err(Error::Verification(_))
        ));
    }

    struct Flaky;
    impl SegmentationBackend for Flaky {
        fn segment(&self, image: &ImageGrid) -> Result<SegMap> {
            SegMap::filled(image.height(), image.width(), 2, 0)
        }
        fn num_classes(&self) -> u32 {
            2
        }
        fn is_deterministic(&self) -> bool {
            false
        }
        fn fingerprint(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn nondeterministic_needs_override() {
        let tm = ThreatModel::new(6, 6, 2, 2).unwrap();
        let det = build_detection_column_masks(&tm, 2).unwrap();
        let x = ImageGrid::filled(6, 6, 1, 0.3).unwrap();
        let g = NearestFillDemasker::new();
        assert!(matches!(
            certify_detection(&x, &det, &g, &Flaky, false),
            Err(Error::Nondeterministic(_))
        ));
        assert!(certify_detection(&x, &det, &g, &Flaky, true).is_ok());
    }

    #[test]
    fn trivial_scene_fully_certified() {
        let tm = ThreatModel::new(20, 20, 4, 4).unwrap();
        let ms = build_recovery(Scheme::Column, &tm, 5).unwrap();
        let x = ImageGrid::filled(20, 20, 3, 0.5).unwrap();
        let out = certify_recovery(&x, &ms, &NearestFillDemasker::new(), &ConstantSegmenter::new(3, 2), 1)
            .unwrap();
        assert_eq!(out.certified_count(), 400);
        let meta = out.meta().unwrap();
        assert_eq!((meta.k, meta.t, meta.n), (5, Some(2), 1));
    }

    #[test]
    fn save_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let seg = SegMap::from_fn(2, 3, 4, |i, j| (i + j) as u16).unwrap();
        let out = CertifiedOutput::new(seg.clone(), vec![true, false, true, true, false, false], CertMode::Detection)
            .unwrap();
        out.save(dir.path()).unwrap();
        assert_eq!(io::read_segmap(&dir.path().join("segmentation.pgm"), Some(4)).unwrap(), seg);
        let (_, _, cert) = io::read_cert_map(&dir.path().join("cert.pgm")).unwrap();
        assert_eq!(cert, out.cert_map());
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("cert.json")).unwrap()).unwrap();
        assert_eq!(json["mode"], "detection");
        assert_eq!(json["certified_pixels"], 3);
        let labels = out.certification_labels().unwrap();
        assert_eq!(labels.labels(), &[0, 4, 2, 1, 4, 4]);
    }
}
