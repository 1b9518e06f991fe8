//! Segmentation quality and certification metrics.
//!
//! Counts are integers end to end. Per-image results merge associatively into
//! a [`DatasetAggregate`]; floating-point division happens only when a metric
//! is read out, iterating images in name order, so merge order never changes
//! a result bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::certify::CertifiedOutput;
use crate::error::{Error, Result};
use crate::grid::SegMap;

pub const DEFAULT_BIG_CLASS_THRESHOLD: f64 = 0.20;

/// 1 where `pred` and `gt` agree.
pub fn accuracy_map(pred: &SegMap, gt: &SegMap) -> Result<Vec<bool>> {
    pred.ensure_same_dims(gt)?;
    Ok(pred.labels().iter().zip(gt.labels()).map(|(a, b)| a == b).collect())
}

pub fn global_accuracy(pred: &SegMap, gt: &SegMap) -> Result<f64> {
    let map = accuracy_map(pred, gt)?;
    Ok(map.iter().filter(|&&c| c).count() as f64 / map.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "cTP")]
    pub ctp: u64,
}

impl ClassStats {
    /// Ground-truth area.
    pub fn p(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.p())
    }

    pub fn certified_recall(&self) -> Option<f64> {
        ratio(self.ctp, self.p())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn iou(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_ + self.fp)
    }

    fn add(&mut self, other: &ClassStats) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.ctp += other.ctp;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Ground-truth label of a pixel, `None` when ignored.
fn gt_class(label: u16, num_classes: u32, ignore: Option<u16>) -> Result<Option<usize>> {
    if Some(label) == ignore {
        return Ok(None);
    }
    if u32::from(label) >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "ground-truth label {label} out of range for {num_classes} classes"
        )));
    }
    Ok(Some(label as usize))
}

fn pred_class(label: u16, num_classes: u32) -> Result<usize> {
    if u32::from(label) >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "predicted label {label} out of range for {num_classes} classes"
        )));
    }
    Ok(label as usize)
}

/// Per-class TP/FN/FP; `ctp` stays zero. Pixels whose ground truth equals
/// `ignore` are skipped.
pub fn confusion_counts(
    pred: &SegMap,
    gt: &SegMap,
    num_classes: u32,
    ignore: Option<u16>,
) -> Result<Vec<ClassStats>> {
    pred.ensure_same_dims(gt)?;
    let mut stats = vec![ClassStats::default(); num_classes as usize];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let Some(g) = gt_class(g, num_classes, ignore)? else {
            continue;
        };
        let p = pred_class(p, num_classes)?;
        if p == g {
            stats[g].tp += 1;
        } else {
            stats[g].fn_ += 1;
            stats[p].fp += 1;
        }
    }
    Ok(stats)
}

/// Per-class count of pixels that are certified and correctly labeled.
pub fn certified_true_positives(
    cert: &CertifiedOutput,
    gt: &SegMap,
    num_classes: u32,
    ignore: Option<u16>,
) -> Result<Vec<u64>> {
    let seg = cert.segmentation();
    seg.ensure_same_dims(gt)?;
    let mut ctp = vec![0u64; num_classes as usize];
    for ((&p, &g), &c) in seg.labels().iter().zip(gt.labels()).zip(cert.cert_map()) {
        let Some(g) = gt_class(g, num_classes, ignore)? else {
            continue;
        };
        if c && pred_class(p, num_classes)? == g {
            ctp[g] += 1;
        }
    }
    Ok(ctp)
}

/// Confusion counts of the certified output's own segmentation, with `ctp`
/// filled in.
pub fn certified_recall(
    cert: &CertifiedOutput,
    gt: &SegMap,
    num_classes: u32,
    ignore: Option<u16>,
) -> Result<Vec<ClassStats>> {
    let mut stats = confusion_counts(cert.segmentation(), gt, num_classes, ignore)?;
    let ctp = certified_true_positives(cert, gt, num_classes, ignore)?;
    for (s, c) in stats.iter_mut().zip(ctp) {
        s.ctp = c;
    }
    Ok(stats)
}

/// Fraction of non-ignored pixels that are certified and correct; `None`
/// when every pixel is ignored.
pub fn percent_certified_correct(
    cert: &CertifiedOutput,
    gt: &SegMap,
    ignore: Option<u16>,
) -> Result<Option<f64>> {
    let seg = cert.segmentation();
    seg.ensure_same_dims(gt)?;
    let (mut good, mut valid) = (0u64, 0u64);
    for ((&p, &g), &c) in seg.labels().iter().zip(gt.labels()).zip(cert.cert_map()) {
        if Some(g) == ignore {
            continue;
        }
        valid += 1;
        good += u64::from(c && p == g);
    }
    Ok(ratio(good, valid))
}

/// Integer summary of one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEval {
    pub stats: Vec<ClassStats>,
    /// Certified-and-correct pixel count, when a cert map was supplied.
    pub certified_correct: Option<u64>,
    /// Non-ignored pixel count.
    pub valid_pixels: u64,
    /// Ground-truth pixel count per class (non-ignored).
    pub class_pixels: Vec<u64>,
}

impl ImageEval {
    /// Scores `pred` against `gt`; `cert` (if any) supplies `cTP` and %C.
    /// Recovery callers pass the vote output as `pred`, detection callers
    /// the plain model output.
    pub fn new(
        pred: &SegMap,
        cert: Option<&CertifiedOutput>,
        gt: &SegMap,
        num_classes: u32,
        ignore: Option<u16>,
    ) -> Result<Self> {
        let mut stats = confusion_counts(pred, gt, num_classes, ignore)?;
        let class_pixels = stats.iter().map(ClassStats::p).collect::<Vec<_>>();
        let valid_pixels = class_pixels.iter().sum();
        let certified_correct = match cert {
            None => None,
            Some(c) => {
                for (s, t) in stats.iter_mut().zip(certified_true_positives(c, gt, num_classes, ignore)?) {
                    s.ctp = t;
                }
                Some(stats.iter().map(|s| s.ctp).sum())
            }
        };
        Ok(Self {
            stats,
            certified_correct,
            valid_pixels,
            class_pixels,
        })
    }

    pub fn percent_certified(&self) -> Option<f64> {
        ratio(self.certified_correct?, self.valid_pixels)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetAggregate {
    num_classes: u32,
    images: BTreeMap<String, ImageEval>,
}

impl DatasetAggregate {
    pub fn new(num_classes: u32) -> Self {
        Self {
            num_classes,
            images: BTreeMap::new(),
        }
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn images(&self) -> &BTreeMap<String, ImageEval> {
        &self.images
    }

    pub fn add(&mut self, name: impl Into<String>, eval: ImageEval) -> Result<()> {
        let name = name.into();
        if eval.stats.len() != self.num_classes as usize {
            return Err(Error::InvalidArgument(format!(
                "image {name} scored with {} classes, aggregate has {}",
                eval.stats.len(),
                self.num_classes
            )));
        }
        if self.images.insert(name.clone(), eval).is_some() {
            return Err(Error::InvalidArgument(format!("image {name} added twice")));
        }
        Ok(())
    }

    pub fn merge(mut self, other: DatasetAggregate) -> Result<Self> {
        if self.num_classes != other.num_classes {
            return Err(Error::InvalidArgument("merging aggregates with different class counts".into()));
        }
        for (name, eval) in other.images {
            self.add(name, eval)?;
        }
        Ok(self)
    }

    /// Per-class stats summed over the dataset.
    pub fn totals(&self) -> Vec<ClassStats> {
        let mut totals = vec![ClassStats::default(); self.num_classes as usize];
        for eval in self.images.values() {
            for (t, s) in totals.iter_mut().zip(&eval.stats) {
                t.add(s);
            }
        }
        totals
    }

    /// Classes with nonzero dataset-total ground-truth area.
    pub fn evaluable_classes(&self) -> Vec<usize> {
        self.totals()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.p() > 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// True when the aggregate is non-empty and every image has a certificate.
    pub fn is_certified(&self) -> bool {
        !self.images.is_empty() && self.images.values().all(|e| e.certified_correct.is_some())
    }

    /// Unweighted mean of per-image %C over images that carry a cert map.
    pub fn percent_certified(&self) -> Option<f64> {
        let values: Vec<f64> = self.images.values().filter_map(ImageEval::percent_certified).collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Per class, mean pixel fraction over images where it appears in the
    /// ground truth; `None` for classes that never appear.
    pub fn presence(&self) -> Vec<Option<f64>> {
        (0..self.num_classes as usize)
            .map(|c| {
                let fractions: Vec<f64> = self
                    .images
                    .values()
                    .filter(|e| e.class_pixels[c] > 0)
                    .map(|e| e.class_pixels[c] as f64 / e.valid_pixels as f64)
                    .collect();
                (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes with `TP + FN + FP > 0`.
pub fn miou(agg: &DatasetAggregate) -> Result<f64> {
    let ious: Vec<f64> = agg.totals().iter().filter_map(ClassStats::iou).collect();
    if ious.is_empty() {
        return Err(Error::InvalidArgument("no class has any labeled or predicted pixel".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// `(mR, cmR)` from dataset-pooled per-class recall over `subset`; classes
/// with zero total area are dropped from the mean.
pub fn mean_recall(agg: &DatasetAggregate, subset: &[usize]) -> Result<(f64, f64)> {
    let totals = agg.totals();
    let mut used = 0usize;
    let (mut r, mut cr) = (0.0, 0.0);
    for &c in subset {
        let s = totals.get(c).ok_or_else(|| {
            Error::InvalidArgument(format!("class {c} out of range for {} classes", totals.len()))
        })?;
        if let (Some(a), Some(b)) = (s.recall(), s.certified_recall()) {
            r += a;
            cr += b;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no evaluable class in subset".into()));
    }
    Ok((r / used as f64, cr / used as f64))
}

/// Classes whose mean presence fraction is strictly above `threshold`.
pub fn select_big_classes(presence: &[Option<f64>], threshold: f64) -> Vec<usize> {
    presence
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_some_and(|f| f > threshold))
        .map(|(c, _)| c)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    #[serde(flatten)]
    pub stats: ClassStats,
    #[serde(rename = "P")]
    pub p: u64,
    #[serde(rename = "R")]
    pub recall: Option<f64>,
    #[serde(rename = "cR")]
    pub certified_recall: Option<f64>,
    #[serde(rename = "IoU")]
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub images: usize,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
    #[serde(rename = "mR")]
    pub mean_recall: Option<f64>,
    #[serde(rename = "cmR")]
    pub certified_mean_recall: Option<f64>,
    #[serde(rename = "%C")]
    pub percent_certified: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigClassReport {
    pub threshold: f64,
    pub classes: Vec<usize>,
    #[serde(rename = "mR")]
    pub mean_recall: Option<f64>,
    #[serde(rename = "cmR")]
    pub certified_mean_recall: Option<f64>,
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: u32,
    pub ignore_label: Option<u16>,
    pub per_class: Vec<ClassReport>,
    pub dataset: DatasetReport,
    pub big_classes: BigClassReport,
}

impl EvalReport {
    /// Certified fields are `None` unless every image carries a certificate.
    pub fn from_aggregate(agg: &DatasetAggregate, big_threshold: f64, ignore: Option<u16>) -> Self {
        let certified = agg.is_certified();
        let per_class = agg
            .totals()
            .into_iter()
            .enumerate()
            .map(|(class, stats)| ClassReport {
                class,
                p: stats.p(),
                recall: stats.recall(),
                certified_recall: stats.certified_recall().filter(|_| certified),
                iou: stats.iou(),
                stats,
            })
            .collect();
        let all = agg.evaluable_classes();
        let (mr, cmr) = mean_recall(agg, &all).ok().unzip();
        let big = select_big_classes(&agg.presence(), big_threshold);
        let (big_mr, big_cmr) = mean_recall(agg, &big).ok().unzip();
        Self {
            num_classes: agg.num_classes(),
            ignore_label: ignore,
            per_class,
            dataset: DatasetReport {
                images: agg.image_count(),
                miou: miou(agg).ok(),
                mean_recall: mr,
                certified_mean_recall: cmr.filter(|_| certified),
                percent_certified: agg.percent_certified(),
            },
            big_classes: BigClassReport {
                threshold: big_threshold,
                classes: big,
                mean_recall: big_mr,
                certified_mean_recall: big_cmr.filter(|_| certified),
            },
        }
    }
}
