//! Pixel confusion counts and the evaluation metrics derived from them.
//!
//! The headline score is the foreground IoU: a pixel matches when predicted
//! and true class are equal and both non-background, divided by the number
//! of pixels where either map is non-background. When neither map contains
//! any foreground the score is defined as 1.0.
//!
//! Per-class ratios use the following 0/0 rule: a class absent from both
//! prediction and truth scores 1.0, a class present in either but with an
//! empty denominator scores 0.0. mIoU averages the terrace and wall IoUs only.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::data::MaskMap;
use crate::error::{Result, ShapeError};
use crate::nets::NUM_CLASSES;

/// A predicted class map; same layout and value set as a ground-truth mask.
pub type SegMap = MaskMap;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "terrace", "wall"];

/// Rows are the true class, columns the predicted class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

fn check_dims(pred: &SegMap, truth: &MaskMap) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(ShapeError::Incompatible {
            op: "confusion",
            left: vec![pred.height(), pred.width()],
            right: vec![truth.height(), truth.width()],
        }
        .into());
    }
    Ok(())
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_maps(pred: &SegMap, truth: &MaskMap) -> Result<Self> {
        check_dims(pred, truth)?;
        let mut m = Self::new();
        m.accumulate(pred.data(), truth.data());
        Ok(m)
    }

    /// Add counts from flat label slices of equal length.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) {
        assert_eq!(pred.len(), truth.len());
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize][p as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    /// Predicted as `class` but truly something else.
    pub fn fp(&self, class: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&t| t != class)
            .map(|t| self.counts[t][class])
            .sum()
    }

    /// Truly `class` but predicted as something else.
    pub fn fn_(&self, class: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&p| p != class)
            .map(|p| self.counts[class][p])
            .sum()
    }

    pub fn foreground_iou(&self) -> f64 {
        let matched: u64 = (1..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        let union = self.total() - self.counts[0][0];
        if union == 0 {
            1.0
        } else {
            matched as f64 / union as f64
        }
    }

    /// Hard-count Dice loss `1 − 2TP / (2TP + FN + FP)` for one class; 0.0
    /// when the class is absent from both maps.
    pub fn dice_loss(&self, class: usize) -> f64 {
        let (tp, fp, fneg) = (self.tp(class), self.fp(class), self.fn_(class));
        let den = 2 * tp + fp + fneg;
        if den == 0 {
            0.0
        } else {
            1.0 - (2 * tp) as f64 / den as f64
        }
    }

    fn ratio(&self, class: usize, num: u64, den: u64) -> f64 {
        if den > 0 {
            return num as f64 / den as f64;
        }
        let present = self.tp(class) + self.fp(class) + self.fn_(class) > 0;
        if present {
            0.0
        } else {
            1.0
        }
    }

    pub fn precision(&self, class: usize) -> f64 {
        self.ratio(class, self.tp(class), self.tp(class) + self.fp(class))
    }

    pub fn recall(&self, class: usize) -> f64 {
        self.ratio(class, self.tp(class), self.tp(class) + self.fn_(class))
    }

    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.tp(class);
        self.ratio(class, 2 * tp, 2 * tp + self.fp(class) + self.fn_(class))
    }

    pub fn iou(&self, class: usize) -> f64 {
        let tp = self.tp(class);
        self.ratio(class, tp, tp + self.fp(class) + self.fn_(class))
    }

    pub fn report(&self) -> MetricsReport {
        let per = |f: fn(&Self, usize) -> f64| -> [f64; NUM_CLASSES] {
            std::array::from_fn(|c| f(self, c))
        };
        let iou = per(Self::iou);
        MetricsReport {
            precision: per(Self::precision),
            recall: per(Self::recall),
            f1: per(Self::f1),
            iou,
            foreground_iou: self.foreground_iou(),
            miou: miou(iou[1], iou[2]),
            pixels: self.total(),
            confusion: *self,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        for (row, other) in self.counts.iter_mut().zip(rhs.counts) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::new(), Add::add)
    }
}

/// Mean of the two foreground-class IoUs.
pub fn miou(terrace_iou: f64, wall_iou: f64) -> f64 {
    0.5 * (terrace_iou + wall_iou)
}

/// Per-class IoU implied by an F1 score: `F1 / (2 − F1)`.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

pub fn confusion(pred: &SegMap, truth: &MaskMap) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_maps(pred, truth)
}

/// Foreground IoU by direct pixel scan.
pub fn foreground_iou(pred: &SegMap, truth: &MaskMap) -> Result<f64> {
    check_dims(pred, truth)?;
    let (mut matched, mut union) = (0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if p == t && p > 0 {
            matched += 1;
        }
        if p > 0 || t > 0 {
            union += 1;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        matched as f64 / union as f64
    })
}

pub fn full_report(pred: &SegMap, truth: &MaskMap) -> Result<MetricsReport> {
    Ok(ConfusionMatrix::from_maps(pred, truth)?.report())
}

/// How to combine several patches into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Pool pixel counts over all patches, then compute ratios.
    #[default]
    Micro,
    /// Compute ratios per patch, then average.
    PerPatch,
}

pub fn evaluate<'a>(
    pairs: impl IntoIterator<Item = (&'a SegMap, &'a MaskMap)>,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    let mats = pairs
        .into_iter()
        .map(|(p, t)| ConfusionMatrix::from_maps(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(match aggregation {
        Aggregation::Micro => mats.iter().copied().sum::<ConfusionMatrix>().report(),
        Aggregation::PerPatch => {
            MetricsReport::mean_of(&mats.iter().map(ConfusionMatrix::report).collect::<Vec<_>>())
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub iou: [f64; NUM_CLASSES],
    pub foreground_iou: f64,
    pub miou: f64,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Unweighted mean of per-patch ratios; counts are pooled.
    pub fn mean_of(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let per = |f: &dyn Fn(&MetricsReport, usize) -> f64| -> [f64; NUM_CLASSES] {
            std::array::from_fn(|c| avg(&|r| f(r, c)))
        };
        MetricsReport {
            precision: per(&|r, c| r.precision[c]),
            recall: per(&|r, c| r.recall[c]),
            f1: per(&|r, c| r.f1[c]),
            iou: per(&|r, c| r.iou[c]),
            foreground_iou: avg(&|r| r.foreground_iou),
            miou: avg(&|r| r.miou),
            pixels: reports.iter().map(|r| r.pixels).sum(),
            confusion: reports.iter().map(|r| r.confusion).sum(),
        }
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "foreground_iou={}", self.foreground_iou);
        let _ = writeln!(s, "miou={}", self.miou);
        for c in 1..NUM_CLASSES {
            let name = CLASS_NAMES[c];
            let _ = writeln!(s, "{name}_precision={}", self.precision[c]);
            let _ = writeln!(s, "{name}_recall={}", self.recall[c]);
            let _ = writeln!(s, "{name}_f1={}", self.f1[c]);
            let _ = writeln!(s, "{name}_iou={}", self.iou[c]);
        }
        let _ = writeln!(s, "pixels={}", self.pixels);
        let flat: Vec<String> = self
            .confusion
            .counts
            .iter()
            .flatten()
            .map(u64::to_string)
            .collect();
        let _ = writeln!(s, "confusion={}", flat.join(","));
        s
    }

    /// Aligned table with the same columns as the usual segmentation
    /// benchmark layout: per-class precision/recall/F1, then IoU and mIoU.
    pub fn to_table(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "",
            "terrace-P",
            "terrace-R",
            "terrace-F1",
            "wall-P",
            "wall-R",
            "wall-F1",
            "IoU",
            "mIoU"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>9.3} {:>9.3} {:>10.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            label,
            self.precision[1],
            self.recall[1],
            self.f1[1],
            self.precision[2],
            self.recall[2],
            self.f1[2],
            self.foreground_iou,
            self.miou
        );
        s
    }
}

/// Parse `key=value` lines, skipping blanks; later keys win.
pub fn parse_kv(text: &str) -> std::collections::BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> MaskMap {
        MaskMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_are_diagonal() {
        let m = map(2, 3, &[0, 1, 2, 2, 1, 0]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c.counts, [[2, 0, 0], [0, 2, 0], [0, 0, 2]]);
        let r = c.report();
        assert_eq!(r.foreground_iou, 1.0);
        assert_eq!(r.miou, 1.0);
        assert!(r
            .precision
            .iter()
            .chain(&r.recall)
            .chain(&r.f1)
            .all(|&v| v == 1.0));
    }

    #[test]
    fn all_background_against_all_wall() {
        let c = confusion(&map(2, 2, &[0; 4]), &map(2, 2, &[2; 4])).unwrap();
        let mut want = [[0u64; 3]; 3];
        want[2][0] = 4;
        assert_eq!(c.counts, want);
        assert_eq!(c.foreground_iou(), 0.0);
    }

    #[test]
    fn hand_enumerated_foreground_iou() {
        let p = map(2, 2, &[1, 0, 2, 0]);
        let t = map(2, 2, &[1, 0, 0, 2]);
        assert!((foreground_iou(&p, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((confusion(&p, &t).unwrap().foreground_iou() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn swapped_foreground_scores_zero() {
        let t = map(1, 4, &[1, 2, 0, 1]);
        let p = map(1, 4, &[2, 1, 0, 2]);
        assert_eq!(foreground_iou(&p, &t).unwrap(), 0.0);
    }

    #[test]
    fn empty_foreground_convention() {
        let z = map(2, 2, &[0; 4]);
        assert_eq!(foreground_iou(&z, &z).unwrap(), 1.0);
        let r = full_report(&z, &z).unwrap();
        assert_eq!(r.iou[1], 1.0);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn zero_denominator_with_class_present() {
        // terrace never predicted but present in truth
        let r = full_report(&map(1, 3, &[0, 0, 2]), &map(1, 3, &[1, 0, 2])).unwrap();
        assert_eq!(r.precision[1], 0.0);
        assert_eq!(r.recall[1], 0.0);
        assert_eq!(r.f1[1], 0.0);
        // wall predicted but absent from truth
        let r = full_report(&map(1, 3, &[2, 0, 0]), &map(1, 3, &[0, 0, 0])).unwrap();
        assert_eq!(r.recall[2], 0.0);
        assert_eq!(r.precision[1], 1.0);
    }

    #[test]
    fn hard_dice_hand_counted() {
        let mut c = ConfusionMatrix::new();
        c.accumulate(&[1, 1, 0, 1, 0, 2], &[1, 1, 1, 0, 0, 2]);
        assert_eq!((c.tp(1), c.fp(1), c.fn_(1)), (2, 1, 1));
        assert!((c.dice_loss(1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(confusion(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0])).is_err());
        assert!(foreground_iou(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0])).is_err());
    }

    #[test]
    fn kv_round_trips_through_parser() {
        let r = full_report(&map(1, 4, &[1, 2, 0, 1]), &map(1, 4, &[1, 2, 2, 0])).unwrap();
        let kv = parse_kv(&r.to_kv());
        assert_eq!(
            kv["foreground_iou"].parse::<f64>().unwrap(),
            r.foreground_iou
        );
        assert_eq!(kv["wall_recall"].parse::<f64>().unwrap(), r.recall[2]);
        assert_eq!(kv["pixels"], "4");
        assert!(r.to_table("fusion").contains("fusion"));
    }

    #[test]
    fn per_patch_vs_micro() {
        let a = (map(1, 2, &[1, 1]), map(1, 2, &[1, 1]));
        let b = (map(1, 2, &[0, 0]), map(1, 2, &[2, 0]));
        let micro = evaluate([(&a.0, &a.1), (&b.0, &b.1)], Aggregation::Micro).unwrap();
        let per = evaluate([(&a.0, &a.1), (&b.0, &b.1)], Aggregation::PerPatch).unwrap();
        assert!((micro.foreground_iou - 2.0 / 3.0).abs() < 1e-15);
        assert!((per.foreground_iou - 0.5).abs() < 1e-15);
    }
}
