//! Model evaluation over a sample set and the boundary-loss ablation.

use crate::config::ExperimentConfig;
use crate::error::{ensure, Result};
use crate::imgproc::{preprocess, AugmentConfig, ImageGrid, MaskGrid};
use crate::metrics::{evaluate_set, MetricsReport, SetReport};
use crate::par;
use crate::train::{fit, Dataset, Sample, Trainer};
use crate::vit::{forward, ModelParams, ViTConfig};

/// Preprocesses each image and runs the forward pass.
pub fn predict_all(
    images: &[ImageGrid],
    params: &ModelParams,
    vit: &ViTConfig,
    augment: &AugmentConfig,
) -> Result<Vec<ImageGrid>> {
    par::map_slice(images, |img| forward(&preprocess(img, augment)?, params, vit)).into_iter().collect()
}

pub fn evaluate_model(
    samples: &[Sample],
    params: &ModelParams,
    vit: &ViTConfig,
    augment: &AugmentConfig,
    threshold: f64,
) -> Result<(SetReport, Vec<ImageGrid>)> {
    let images: Vec<ImageGrid> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<MaskGrid> = samples.iter().map(|s| s.mask.clone()).collect();
    let preds = predict_all(&images, params, vit, augment)?;
    Ok((evaluate_set(&preds, &masks, threshold)?, preds))
}

pub const BASELINE_LABEL: &str = "baseline";
pub const BOUNDARY_LABEL: &str = "BAVT";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// `None` for median rows.
    pub seed: Option<u64>,
    /// Per-image mean over the test split.
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub lambda: f64,
    /// Baseline then boundary-aware row for each seed, in seed order.
    pub rows: Vec<AblationRow>,
    /// Per-configuration medians; present when more than one seed ran.
    pub medians: Vec<AblationRow>,
    /// Largest absolute difference between the first-batch gradients of the
    /// two configurations, per seed.
    pub first_step_gradient_gap: Vec<f64>,
}

/// Max absolute difference between the first-batch gradients of a run with
/// boundary weight `lambda` and one without, from identical initialisation.
pub fn first_step_gradient_gap(data: &Dataset, exp: &ExperimentConfig, lambda: f64) -> Result<f64> {
    let grads = |l: f64| -> Result<ModelParams> {
        let mut loss = exp.loss.clone();
        loss.lambda = l;
        let t = Trainer::new(data, exp.vit.clone(), exp.train.clone(), loss, exp.augment.clone())?;
        let batch = t.epoch_batches(0).swap_remove(0);
        Ok(t.batch_gradients(0, &batch)?.1)
    };
    let with = grads(lambda)?;
    let without = grads(0.0)?;
    let gap = with
        .tensors()
        .iter()
        .zip(without.tensors())
        .flat_map(|((_, a), (_, b))| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    Ok(gap)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_row(label: &str, rows: &[&AblationRow]) -> AblationRow {
    let m = |f: fn(&MetricsReport) -> f64| median(rows.iter().map(|r| f(&r.report)).collect());
    let first = rows[0].report;
    AblationRow {
        label: format!("{label}-median"),
        seed: None,
        report: MetricsReport {
            sensitivity: m(|r| r.sensitivity),
            specificity: m(|r| r.specificity),
            f1: m(|r| r.f1),
            accuracy: m(|r| r.accuracy),
            auc: m(|r| r.auc),
            iou: m(|r| r.iou),
            threshold: first.threshold,
            counts: Default::default(),
        },
    }
}

/// Trains with `lambda` and with zero boundary weight under each seed,
/// evaluates both on `test` and collects the comparison.
pub fn run_ablation(
    data: &Dataset,
    test: &[Sample],
    exp: &ExperimentConfig,
    lambda: f64,
    seeds: &[u64],
    threshold: f64,
) -> Result<AblationReport> {
    ensure!(lambda > 0.0, InvalidParameter, "ablation needs a positive boundary weight, got {lambda}");
    ensure!(!seeds.is_empty(), InvalidParameter, "no seeds given");
    ensure!(!test.is_empty(), InvalidParameter, "test split is empty");
    let mut rows = Vec::with_capacity(2 * seeds.len());
    let mut gaps = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut e = exp.clone();
        e.train.seed = seed;
        e.train.checkpoint_dir = None;
        gaps.push(first_step_gradient_gap(data, &e, lambda)?);
        for (label, l) in [(BASELINE_LABEL, 0.0), (BOUNDARY_LABEL, lambda)] {
            let mut loss = e.loss.clone();
            loss.lambda = l;
            let out = fit(data, &e.vit, &e.train, &loss, &e.augment)?;
            let (set, _) = evaluate_model(test, &out.best_params, &e.vit, &out.augment, threshold)?;
            rows.push(AblationRow { label: label.to_string(), seed: Some(seed), report: set.macro_avg });
        }
    }
    let medians = if seeds.len() > 1 {
        [BASELINE_LABEL, BOUNDARY_LABEL]
            .iter()
            .map(|label| median_row(label, &rows.iter().filter(|r| r.label == *label).collect::<Vec<_>>()))
            .collect()
    } else {
        Vec::new()
    };
    Ok(AblationReport { lambda, rows, medians, first_step_gradient_gap: gaps })
}

pub const ABLATION_HEADER: &str = "method,seed,sensitivity,specificity,f1,accuracy,auc,iou";

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in report.rows.iter().chain(&report.medians) {
        let m = &r.report;
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{seed},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.label, m.sensitivity, m.specificity, m.f1, m.accuracy, m.auc, m.iou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
