//! Pixel-level segmentation metrics: confusion counts, sensitivity,
//! specificity, F1, accuracy, IoU and ROC AUC.
//!
//! Ratios whose denominator is zero evaluate to 1: with nothing to find (or
//! nothing to reject) the ideal is met vacuously.

use std::fmt::Write as _;

use crate::error::{ensure, Result};
use crate::imgproc::{ImageGrid, MaskGrid};
use crate::par;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

/// Threshold-dependent metrics derived from counts alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub iou: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn check_pred(pred: &ImageGrid, gt: &MaskGrid) -> Result<()> {
    ensure!(
        pred.dims() == gt.dims(),
        DimensionMismatch,
        "prediction is {:?}, mask is {:?}",
        pred.dims(),
        gt.dims()
    );
    Ok(())
}

/// Counts with `pred >= threshold` taken as foreground.
pub fn confusion(pred: &ImageGrid, gt: &MaskGrid, threshold: f64) -> Result<ConfusionCounts> {
    check_pred(pred, gt)?;
    ensure!(threshold > 0.0 && threshold < 1.0, InvalidParameter, "threshold {threshold} outside (0, 1)");
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= threshold, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    ClassificationMetrics {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

/// One ROC vertex: everything scoring `>= threshold` is called foreground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn roc_from_scores(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    ensure!(pos > 0.0 && neg > 0.0, DegenerateMask, "ROC needs both classes in the ground truth");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        curve.push(RocPoint { threshold: s, fpr: fp / neg, tpr: tp / pos });
    }
    Ok(curve)
}

fn trapezoid(curve: &[RocPoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// ROC polyline over every distinct score, from (0,0) to (1,1).
pub fn roc_curve(pred: &ImageGrid, gt: &MaskGrid) -> Result<Vec<RocPoint>> {
    check_pred(pred, gt)?;
    roc_from_scores(pred.data(), gt.data())
}

/// Trapezoidal area under the ROC curve; ties contribute half.
pub fn roc_auc(pred: &ImageGrid, gt: &MaskGrid) -> Result<f64> {
    Ok(trapezoid(&roc_curve(pred, gt)?))
}

pub fn evaluate(pred: &ImageGrid, gt: &MaskGrid, threshold: f64) -> Result<MetricsReport> {
    let counts = confusion(pred, gt, threshold)?;
    let m = classification_metrics(&counts);
    let auc = roc_auc(pred, gt)?;
    Ok(MetricsReport {
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        f1: m.f1,
        accuracy: m.accuracy,
        auc,
        iou: m.iou,
        threshold,
        counts,
    })
}

/// Per-image reports plus the two set-level aggregations.
#[derive(Clone, Debug, PartialEq)]
pub struct SetReport {
    pub per_image: Vec<MetricsReport>,
    /// Mean of per-image metrics; counts are summed.
    pub macro_avg: MetricsReport,
    /// Metrics of the pooled counts; AUC over the pooled pixels.
    pub micro: MetricsReport,
}

pub fn macro_average(reports: &[MetricsReport]) -> Result<MetricsReport> {
    ensure!(!reports.is_empty(), InvalidParameter, "nothing to aggregate");
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        sensitivity: mean(|r| r.sensitivity),
        specificity: mean(|r| r.specificity),
        f1: mean(|r| r.f1),
        accuracy: mean(|r| r.accuracy),
        auc: mean(|r| r.auc),
        iou: mean(|r| r.iou),
        threshold: reports[0].threshold,
        counts: reports.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts),
    })
}

pub fn evaluate_set(preds: &[ImageGrid], gts: &[MaskGrid], threshold: f64) -> Result<SetReport> {
    ensure!(
        preds.len() == gts.len() && !preds.is_empty(),
        DimensionMismatch,
        "{} predictions for {} masks",
        preds.len(),
        gts.len()
    );
    let per_image = par::map_range(preds.len(), |i| evaluate(&preds[i], &gts[i], threshold))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let macro_avg = macro_average(&per_image)?;
    let counts = macro_avg.counts;
    let m = classification_metrics(&counts);
    let scores: Vec<f64> = preds.iter().flat_map(|p| p.data().iter().copied()).collect();
    let labels: Vec<u8> = gts.iter().flat_map(|g| g.data().iter().copied()).collect();
    let auc = trapezoid(&roc_from_scores(&scores, &labels)?);
    let micro = MetricsReport {
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        f1: m.f1,
        accuracy: m.accuracy,
        auc,
        iou: m.iou,
        threshold,
        counts,
    };
    Ok(SetReport { per_image, macro_avg, micro })
}

pub const REPORT_HEADER: &str = "name,sensitivity,specificity,f1,accuracy,auc,iou,tp,fp,tn,fn,threshold";

pub fn report_csv_row(name: &str, r: &MetricsReport) -> String {
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
        r.sensitivity,
        r.specificity,
        r.f1,
        r.accuracy,
        r.auc,
        r.iou,
        r.counts.tp,
        r.counts.fp,
        r.counts.tn,
        r.counts.fn_,
        r.threshold
    )
}

pub fn set_report_csv(names: &[String], set: &SetReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for (name, r) in names.iter().zip(&set.per_image) {
        out.push_str(&report_csv_row(name, r));
        out.push('\n');
    }
    out.push_str(&report_csv_row("macro", &set.macro_avg));
    out.push('\n');
    out.push_str(&report_csv_row("micro", &set.micro));
    out.push('\n');
    out
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

pub const TABLE_HEADER: &str = "| Method | Sen. | Spe. | F1 | Acc. | AUC | IoU |";

/// Markdown results-table row with four decimals per metric.
pub fn table_row(method: &str, r: &MetricsReport) -> String {
    format!(
        "| {method} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        r.sensitivity, r.specificity, r.f1, r.accuracy, r.auc, r.iou
    )
}
