//! Pixel-wise confusion counts and the F1 / mIoU scores derived from them.
//! Landslide (label 1) is the positive class; scores are percentages.

use std::io::Write;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use ndarray::{ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same counts with the roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts over two binary masks of identical shape (any nonzero value is positive).
pub fn confusion_counts<D: Dimension>(pred: ArrayView<'_, u8, D>, gt: ArrayView<'_, u8, D>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape()));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred).and(&gt).for_each(|&p, &g| match (p != 0, g != 0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// `100 · 2tp / (2tp + fp + fn)`, or 0 when the denominator vanishes.
pub fn f1_score(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        100.0 * (2 * c.tp) as f64 / den as f64
    }
}

fn class_iou(hit: u64, fp: u64, fn_: u64) -> f64 {
    let den = hit + fp + fn_;
    if den == 0 {
        1.0
    } else {
        hit as f64 / den as f64
    }
}

/// `(iou_background, iou_landslide)` as fractions; an absent class scores 1.
pub fn per_class_iou(c: &ConfusionCounts) -> (f64, f64) {
    (class_iou(c.tn, c.fn_, c.fp), class_iou(c.tp, c.fp, c.fn_))
}

pub fn miou(c: &ConfusionCounts) -> f64 {
    let (bg, ls) = per_class_iou(c);
    100.0 * 0.5 * (bg + ls)
}

/// How per-image results are combined into one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Scores from counts summed over every image.
    #[default]
    Micro,
    /// Mean of per-image scores.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub miou: f64,
    pub per_class_iou: (f64, f64),
    pub param_count: u64,
}

impl EvalReport {
    pub fn from_counts(counts: ConfusionCounts, param_count: u64) -> Self {
        let (bg, ls) = per_class_iou(&counts);
        EvalReport {
            counts,
            f1: f1_score(&counts),
            miou: miou(&counts),
            per_class_iou: (bg, ls),
            param_count,
        }
    }

    /// Combines per-image counts; counts are always summed, scores follow `averaging`.
    pub fn from_images(per_image: &[ConfusionCounts], param_count: u64, averaging: Averaging) -> Self {
        let total: ConfusionCounts = per_image.iter().copied().sum();
        let mut r = Self::from_counts(total, param_count);
        if averaging == Averaging::Macro && !per_image.is_empty() {
            let n = per_image.len() as f64;
            r.f1 = per_image.iter().map(f1_score).sum::<f64>() / n;
            r.miou = per_image.iter().map(miou).sum::<f64>() / n;
            let (bg, ls) = per_image.iter().map(per_class_iou).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            r.per_class_iou = (bg / n, ls / n);
        }
        r
    }

    /// Arithmetic mean of F1, mIoU and per-class IoU over `reports`; counts are summed.
    pub fn mean_of(reports: &[EvalReport]) -> Option<Self> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        Some(EvalReport {
            counts: reports.iter().map(|r| r.counts).sum(),
            f1: reports.iter().map(|r| r.f1).sum::<f64>() / nf,
            miou: reports.iter().map(|r| r.miou).sum::<f64>() / nf,
            per_class_iou: (
                reports.iter().map(|r| r.per_class_iou.0).sum::<f64>() / nf,
                reports.iter().map(|r| r.per_class_iou.1).sum::<f64>() / nf,
            ),
            param_count: reports[0].param_count,
        })
    }

    /// Two lines, `F1: xx.xx` and `mIoU: xx.xx`.
    pub fn to_text(&self) -> String {
        format!("F1: {:.2}\nmIoU: {:.2}\n", self.f1, self.miou)
    }
}

/// Column order of report CSV files.
pub const REPORT_COLUMNS: [&str; 11] = ["split", "fold", "f1", "miou", "iou_bg", "iou_ls", "tp", "fp", "fn", "tn", "params"];

/// One CSV row: which split produced the report and, for cross-validation, the fold.
#[derive(Debug, Clone)]
pub struct ReportRow<'a> {
    pub split: &'a str,
    pub fold: Option<usize>,
    pub report: &'a EvalReport,
}

pub fn write_report_csv<W: Write>(out: W, rows: &[ReportRow<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for row in rows {
        let r = row.report;
        let c = r.counts;
        w.write_record([
            row.split.to_string(),
            row.fold.map(|f| f.to_string()).unwrap_or_default(),
            format!("{:.4}", r.f1),
            format!("{:.4}", r.miou),
            format!("{:.4}", 100.0 * r.per_class_iou.0),
            format!("{:.4}", 100.0 * r.per_class_iou.1),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            r.param_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}
