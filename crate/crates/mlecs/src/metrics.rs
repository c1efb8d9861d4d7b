//! Classification metrics and their round-level summaries.

use crate::{Error, Result};

/// Macro-averaged F1. Per class, `F1 = 2tp / (2tp + fp + fn)`; classes with
/// no true and no predicted instances are undefined and excluded from the
/// mean (the usual convention for small test splits where a class may be
/// absent entirely).
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    debug_assert_eq!(preds.len(), labels.len());
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut defined = 0u64;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        defined += 1;
    }
    if defined == 0 {
        0.0
    } else {
        sum / defined as f64
    }
}

/// `(average, best, worst)` of per-device metrics.
pub fn aggregate_metrics(per_device: &[f64]) -> Result<(f64, f64, f64)> {
    if per_device.is_empty() {
        return Err(Error::Empty { what: "per-device metrics" });
    }
    let avg = per_device.iter().sum::<f64>() / per_device.len() as f64;
    let best = per_device.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = per_device.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((avg, best, worst))
}
