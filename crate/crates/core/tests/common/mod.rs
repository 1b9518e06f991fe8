//! Independent brute-force oracles shared by the integration suites. Nothing
//! here calls the library's own counting code.

#![allow(dead_code)]

use patchcert::grid::{MaskGrid, SegMap, ThreatModel};
use patchcert::maskgen::MaskSet;

/// Max over placements of the number of masks showing at least one patch pixel.
pub fn naive_strength(ms: &MaskSet, tm: &ThreatModel) -> usize {
    let mut worst = 0;
    for top in 0..=tm.image_height - tm.patch_height {
        for left in 0..=tm.image_width - tm.patch_width {
            let affected = ms
                .masks()
                .iter()
                .filter(|m| patch_visible(m, top, left, tm.patch_height, tm.patch_width))
                .count();
            worst = worst.max(affected);
        }
    }
    worst
}

pub fn patch_visible(m: &MaskGrid, top: usize, left: usize, ph: usize, pw: usize) -> bool {
    (top..top + ph).any(|i| (left..left + pw).any(|j| m.is_visible(i, j)))
}

/// Placements not fully hidden by any mask.
pub fn naive_gaps(ms: &MaskSet, tm: &ThreatModel) -> Vec<(usize, usize)> {
    let mut gaps = Vec::new();
    for top in 0..=tm.image_height - tm.patch_height {
        for left in 0..=tm.image_width - tm.patch_width {
            if ms
                .masks()
                .iter()
                .all(|m| patch_visible(m, top, left, tm.patch_height, tm.patch_width))
            {
                gaps.push((top, left));
            }
        }
    }
    gaps
}

/// Per-class counts recomputed by scanning every pixel once per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NaiveClass {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub ctp: u64,
}

pub struct NaiveImage<'a> {
    pub pred: &'a SegMap,
    pub gt: &'a SegMap,
    pub cert: &'a [bool],
}

pub fn naive_class_counts(images: &[NaiveImage], classes: usize, ignore: Option<u16>) -> Vec<NaiveClass> {
    let mut out = vec![NaiveClass::default(); classes];
    for (c, slot) in out.iter_mut().enumerate() {
        for img in images {
            for i in 0..img.gt.height() {
                for j in 0..img.gt.width() {
                    let g = img.gt.get(i, j);
                    if Some(g) == ignore {
                        continue;
                    }
                    let p = img.pred.get(i, j);
                    let certified = img.cert[i * img.gt.width() + j];
                    let (g, p) = (g as usize, p as usize);
                    if g == c && p == c {
                        slot.tp += 1;
                        if certified {
                            slot.ctp += 1;
                        }
                    } else if g == c {
                        slot.fn_ += 1;
                    } else if p == c {
                        slot.fp += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn naive_accuracy(pred: &SegMap, gt: &SegMap) -> f64 {
    let mut hits = 0;
    for i in 0..gt.height() {
        for j in 0..gt.width() {
            if pred.get(i, j) == gt.get(i, j) {
                hits += 1;
            }
        }
    }
    hits as f64 / (gt.height() * gt.width()) as f64
}

/// Mean of per-image certified-and-correct fractions over non-ignored pixels.
pub fn naive_percent_c(images: &[NaiveImage], ignore: Option<u16>) -> Option<f64> {
    let mut fractions = Vec::new();
    for img in images {
        let (mut good, mut valid) = (0u64, 0u64);
        for i in 0..img.gt.height() {
            for j in 0..img.gt.width() {
                let g = img.gt.get(i, j);
                if Some(g) == ignore {
                    continue;
                }
                valid += 1;
                if img.cert[i * img.gt.width() + j] && img.pred.get(i, j) == g {
                    good += 1;
                }
            }
        }
        if valid > 0 {
            fractions.push(good as f64 / valid as f64);
        }
    }
    if fractions.is_empty() {
        None
    } else {
        Some(fractions.iter().sum::<f64>() / fractions.len() as f64)
    }
}

pub fn naive_means(counts: &[NaiveClass]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let (mut iou, mut n_iou) = (0.0, 0);
    let (mut r, mut cr, mut n_r) = (0.0, 0.0, 0);
    for c in counts {
        let union = c.tp + c.fn_ + c.fp;
        if union > 0 {
            iou += c.tp as f64 / union as f64;
            n_iou += 1;
        }
        let p = c.tp + c.fn_;
        if p > 0 {
            r += c.tp as f64 / p as f64;
            cr += c.ctp as f64 / p as f64;
            n_r += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    (mean(iou, n_iou), mean(r, n_r), mean(cr, n_r))
}
