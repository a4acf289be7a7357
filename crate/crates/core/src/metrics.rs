//! Dataset-level evaluation metrics: mIoU, RMSE, mean angular error, maximal
//! F-measure (beta^2 = 0.3) and optimal-dataset-scale F-measure with
//! dilation-based boundary tolerance. All metrics accumulate over the whole
//! dataset before the final reduction.

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::task::MetricKind;

pub const IGNORE_LABEL: i64 = 255;
/// Saliency-literature convention for the F-measure weighting.
pub const F_BETA_SQ: f64 = 0.3;
/// 255 evenly spaced thresholds over (0, 1).
pub const NUM_THRESHOLDS: usize = 255;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    pub higher_is_better: bool,
    pub n_images: usize,
}

impl MetricResult {
    pub fn new(kind: MetricKind, value: f64, n_images: usize) -> MetricResult {
        MetricResult {
            name: kind.as_str().to_string(),
            value,
            higher_is_better: kind.higher_is_better(),
            n_images,
        }
    }
}

fn thresholds() -> impl Iterator<Item = f64> {
    (1..=NUM_THRESHOLDS).map(|i| i as f64 / (NUM_THRESHOLDS + 1) as f64)
}

/// Mean IoU over the classes present in the labels, from a dataset-level
/// confusion matrix. `preds`/`labels` are flat per-pixel class ids per image.
pub fn miou(preds: &[ArrayD<i64>], labels: &[ArrayD<i64>], num_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(IcmError::Argument("pred/label count mismatch".into()));
    }
    let mut confusion = vec![0u64; num_classes * num_classes];
    let mut any_valid = false;
    for (p, l) in preds.iter().zip(labels) {
        if p.shape() != l.shape() {
            return Err(IcmError::Shape("pred/label shape mismatch".into()));
        }
        for (&pv, &lv) in p.iter().zip(l.iter()) {
            if lv == IGNORE_LABEL {
                continue;
            }
            if lv < 0 || lv as usize >= num_classes || pv < 0 || pv as usize >= num_classes {
                return Err(IcmError::Argument(format!(
                    "class id out of range: pred {pv}, label {lv}"
                )));
            }
            confusion[lv as usize * num_classes + pv as usize] += 1;
            any_valid = true;
        }
    }
    if !any_valid {
        return Err(IcmError::EmptyLabel("no valid pixels for miou".into()));
    }
    let mut iou_sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let gt: u64 = (0..num_classes).map(|j| confusion[c * num_classes + j]).sum();
        if gt == 0 {
            continue;
        }
        let pred: u64 = (0..num_classes).map(|i| confusion[i * num_classes + c]).sum();
        let tp = confusion[c * num_classes + c];
        let union = gt + pred - tp;
        iou_sum += tp as f64 / union as f64;
        present += 1;
    }
    Ok(iou_sum / present as f64)
}

/// RMSE over valid pixels (mask > 0.5), pooled across the dataset.
pub fn rmse(
    preds: &[ArrayD<f64>],
    labels: &[ArrayD<f64>],
    masks: &[ArrayD<f64>],
) -> Result<f64> {
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for ((p, l), m) in preds.iter().zip(labels).zip(masks) {
        if p.shape() != l.shape() || p.shape() != m.shape() {
            return Err(IcmError::Shape("rmse shape mismatch".into()));
        }
        for ((&pv, &lv), &mv) in p.iter().zip(l.iter()).zip(m.iter()) {
            if mv > 0.5 {
                sq_sum += (pv - lv) * (pv - lv);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(IcmError::EmptyLabel("no valid pixels for rmse".into()));
    }
    Ok((sq_sum / count as f64).sqrt())
}

/// Mean angular error in degrees between predicted and labelled normal
/// fields, each (3, H, W). Both are normalized internally; pixels whose label
/// or prediction is a zero vector are excluded.
pub fn mean_angular_error(preds: &[ArrayD<f64>], labels: &[ArrayD<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        if p.shape() != l.shape() || p.shape()[0] != 3 || p.ndim() != 3 {
            return Err(IcmError::Shape("normal fields must be (3, H, W)".into()));
        }
        let (h, w) = (p.shape()[1], p.shape()[2]);
        for y in 0..h {
            for x in 0..w {
                let pv = [p[[0, y, x]], p[[1, y, x]], p[[2, y, x]]];
                let lv = [l[[0, y, x]], l[[1, y, x]], l[[2, y, x]]];
                let pn = (pv[0] * pv[0] + pv[1] * pv[1] + pv[2] * pv[2]).sqrt();
                let ln = (lv[0] * lv[0] + lv[1] * lv[1] + lv[2] * lv[2]).sqrt();
                if pn == 0.0 || ln == 0.0 {
                    continue;
                }
                let dot = (pv[0] * lv[0] + pv[1] * lv[1] + pv[2] * lv[2]) / (pn * ln);
                sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(IcmError::EmptyLabel("no valid pixels for mean angular error".into()));
    }
    Ok(sum / count as f64)
}

fn f_measure(tp: u64, fp: u64, fn_: u64, beta_sq: f64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

/// Max over 255 thresholds of F_beta computed from dataset-aggregated
/// precision/recall. Probabilities in [0, 1], labels in {0, 1}.
pub fn max_f_measure(preds: &[ArrayD<f64>], labels: &[ArrayD<f64>]) -> Result<f64> {
    for (p, l) in preds.iter().zip(labels) {
        if p.shape() != l.shape() {
            return Err(IcmError::Shape("maxf shape mismatch".into()));
        }
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(IcmError::Argument("maxf probabilities must be in [0,1]".into()));
        }
    }
    let total_pos: u64 = labels
        .iter()
        .map(|l| l.iter().filter(|&&v| v > 0.5).count() as u64)
        .sum();
    if total_pos == 0 {
        return Err(IcmError::EmptyLabel("no positive labels for maxf".into()));
    }
    let mut best = 0.0f64;
    for t in thresholds() {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (p, l) in preds.iter().zip(labels) {
            for (&pv, &lv) in p.iter().zip(l.iter()) {
                let pred = pv >= t;
                let pos = lv > 0.5;
                match (pred, pos) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        best = best.max(f_measure(tp, fp, fn_, F_BETA_SQ));
    }
    Ok(best)
}

/// Binary dilation with a (2r+1)x(2r+1) square structuring element.
fn dilate(mask: &ArrayD<bool>, radius: usize) -> ArrayD<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                continue;
            }
            'probe: for dy in -(radius as isize)..=radius as isize {
                for dx in -(radius as isize)..=radius as isize {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0
                        && nx >= 0
                        && (ny as usize) < h
                        && (nx as usize) < w
                        && mask[[ny as usize, nx as usize]]
                    {
                        out[[y, x]] = true;
                        break 'probe;
                    }
                }
            }
        }
    }
    out
}

fn binarize(p: ArrayViewD<f64>, t: f64) -> ArrayD<bool> {
    p.mapv(|v| v >= t)
}

/// Optimal-dataset-scale F-measure: for each global threshold, binarize,
/// match within `tolerance_px` via dilation, aggregate TP/FP/FN over the
/// dataset, then take the best F1.
pub fn ods_f_measure(
    preds: &[ArrayD<f64>],
    labels: &[ArrayD<f64>],
    tolerance_px: usize,
) -> Result<f64> {
    for (p, l) in preds.iter().zip(labels) {
        if p.shape() != l.shape() || p.ndim() != 2 {
            return Err(IcmError::Shape("odsf expects matching (H, W) maps".into()));
        }
    }
    let total_pos: u64 = labels
        .iter()
        .map(|l| l.iter().filter(|&&v| v > 0.5).count() as u64)
        .sum();
    if total_pos == 0 {
        return Err(IcmError::EmptyLabel("no boundary pixels in dataset".into()));
    }
    let gt_masks: Vec<ArrayD<bool>> = labels.iter().map(|l| l.mapv(|v| v > 0.5)).collect();
    let gt_dilated: Vec<ArrayD<bool>> =
        gt_masks.iter().map(|m| dilate(m, tolerance_px)).collect();
    let mut best = 0.0f64;
    for t in thresholds() {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for ((p, gt), gt_d) in preds.iter().zip(&gt_masks).zip(&gt_dilated) {
            let pm = binarize(p.view(), t);
            let pm_dilated = dilate(&pm, tolerance_px);
            // predicted boundary pixel counts as TP if near any label pixel;
            // label pixel is missed if no prediction lands near it
            for ((&pv, &gd), (&gv, &pd)) in
                pm.iter().zip(gt_d.iter()).zip(gt.iter().zip(pm_dilated.iter()))
            {
                if pv && gd {
                    tp += 1;
                } else if pv {
                    fp += 1;
                }
                if gv && !pd {
                    fn_ += 1;
                }
            }
        }
        best = best.max(f_measure(tp, fp, fn_, 1.0));
    }
    Ok(best)
}
