//! Evaluation metrics over sets of radio maps, in normalized units and
//! double precision. Sums run in fixed sample-then-pixel order.

use serde::{Deserialize, Serialize};

use crate::data::RadioMap;
use crate::error::{Error, Result};

fn check_pairs(preds: &[RadioMap], truths: &[RadioMap]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if (p.height(), p.width()) != (t.height(), t.width()) {
            return Err(Error::Shape(format!(
                "sample {i}: prediction {}x{}, truth {}x{}",
                p.height(),
                p.width(),
                t.height(),
                t.width()
            )));
        }
    }
    Ok(())
}

fn check_rois(truths: &[RadioMap], rois: &[&[bool]]) -> Result<usize> {
    if rois.len() != truths.len() {
        return Err(Error::Shape(format!("{} masks for {} maps", rois.len(), truths.len())));
    }
    let mut n_roi = 0;
    for (i, (t, roi)) in truths.iter().zip(rois).enumerate() {
        if roi.len() != t.values().len() {
            return Err(Error::Shape(format!("sample {i}: mask of {} cells for {} pixels", roi.len(), t.values().len())));
        }
        n_roi += roi.iter().filter(|&&f| f).count();
    }
    if n_roi == 0 {
        return Err(Error::Metric("no RoI pixels".into()));
    }
    Ok(n_roi)
}

fn sq_err<'a>(p: &'a RadioMap, t: &'a RadioMap) -> impl Iterator<Item = f64> + 'a {
    p.values().iter().zip(t.values()).map(|(&a, &b)| {
        let d = a as f64 - b as f64;
        d * d
    })
}

/// Root of the squared error pooled over every pixel of every sample.
pub fn metric_rmse(preds: &[RadioMap], truths: &[RadioMap]) -> Result<f64> {
    check_pairs(preds, truths)?;
    let (mut acc, mut n) = (0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        acc += sq_err(p, t).sum::<f64>();
        n += p.values().len();
    }
    Ok((acc / n as f64).sqrt())
}

/// Mean over samples of each sample's own RMSE.
pub fn metric_rmse_per_sample(preds: &[RadioMap], truths: &[RadioMap]) -> Result<f64> {
    check_pairs(preds, truths)?;
    let total: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (sq_err(p, t).sum::<f64>() / p.values().len() as f64).sqrt())
        .sum();
    Ok(total / preds.len() as f64)
}

/// RMSE restricted to RoI pixels, pooled across samples.
pub fn metric_channel_error(preds: &[RadioMap], truths: &[RadioMap], rois: &[&[bool]]) -> Result<f64> {
    check_pairs(preds, truths)?;
    let n_roi = check_rois(truths, rois)?;
    let mut acc = 0.0;
    for ((p, t), roi) in preds.iter().zip(truths).zip(rois) {
        acc += sq_err(p, t).zip(roi.iter()).filter(|(_, &free)| free).map(|(e, _)| e).sum::<f64>();
    }
    Ok((acc / n_roi as f64).sqrt())
}

/// Fraction of RoI pixels where prediction and truth fall on different sides
/// of `thres`; a value equal to `thres` counts as covered.
pub fn metric_coverage_error(preds: &[RadioMap], truths: &[RadioMap], rois: &[&[bool]], thres: f64) -> Result<f64> {
    check_pairs(preds, truths)?;
    let n_roi = check_rois(truths, rois)?;
    let mut wrong = 0usize;
    for ((p, t), roi) in preds.iter().zip(truths).zip(rois) {
        for ((&a, &b), &free) in p.values().iter().zip(t.values()).zip(roi.iter()) {
            if free && ((a as f64 >= thres) != (b as f64 >= thres)) {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / n_roi as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub ch_pred_err: f64,
    pub cov_pred_err: f64,
    pub n_samples: usize,
    pub n_roi_pixels: usize,
    pub threshold: f64,
    /// `"pooled"` or `"per-sample"`.
    pub rmse_mode: String,
}

pub fn metrics_report(
    preds: &[RadioMap],
    truths: &[RadioMap],
    rois: &[&[bool]],
    threshold: f64,
    per_sample_rmse: bool,
) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("coverage threshold {threshold} outside (0, 1)")));
    }
    let rmse = if per_sample_rmse {
        metric_rmse_per_sample(preds, truths)?
    } else {
        metric_rmse(preds, truths)?
    };
    Ok(MetricsReport {
        rmse,
        ch_pred_err: metric_channel_error(preds, truths, rois)?,
        cov_pred_err: metric_coverage_error(preds, truths, rois, threshold)?,
        n_samples: preds.len(),
        n_roi_pixels: check_rois(truths, rois)?,
        threshold,
        rmse_mode: if per_sample_rmse { "per-sample" } else { "pooled" }.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f32]) -> RadioMap {
        let side = (values.len() as f64).sqrt() as usize;
        RadioMap::new(side, side, values.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_coverage() {
        let p = [map(&[0.9, 0.7, 0.85, 0.5])];
        let t = [map(&[0.85, 0.75, 0.7, 0.9])];
        assert_eq!(metric_coverage_error(&p, &t, &[&[true; 4]], 0.8).unwrap(), 0.5);
    }

    #[test]
    fn threshold_boundary_counts_as_covered() {
        let e = |a: f32, b: f32| metric_coverage_error(&[map(&[a])], &[map(&[b])], &[&[true]], 0.8).unwrap();
        assert_eq!(e(0.8, 0.8), 0.0);
        assert_eq!(e(0.8, 0.79), 1.0);
        assert_eq!(e(0.81, 0.8), 0.0);
    }

    #[test]
    fn offset_inside_roi_only() {
        let t = [map(&[0.5, 0.4, 0.3, 0.0])];
        let p = [map(&[0.6, 0.5, 0.4, 0.0])];
        let ch = metric_channel_error(&p, &t, &[&[true, true, true, false]]).unwrap();
        assert!((ch - 0.1).abs() < 1e-7);
    }

    #[test]
    fn uniform_offset_rmse() {
        let t = [map(&[0.25; 16]), map(&[0.5; 16])];
        let p = [map(&[0.35; 16]), map(&[0.6; 16])];
        assert!((metric_rmse(&p, &t).unwrap() - 0.1).abs() < 1e-7);
        assert_eq!(metric_rmse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn pooled_and_per_sample_differ() {
        let t = [map(&[0.0; 4]), map(&[0.0; 4])];
        let p = [map(&[0.2, 0.0, 0.0, 0.0]), map(&[0.0; 4])];
        let pooled = metric_rmse(&p, &t).unwrap();
        let per = metric_rmse_per_sample(&p, &t).unwrap();
        assert!((pooled - (0.04f64 / 8.0).sqrt()).abs() < 1e-7);
        assert!((per - 0.05).abs() < 1e-7);
    }

    #[test]
    fn preconditions() {
        let m = map(&[0.5; 4]);
        assert!(metric_rmse(&[], &[]).is_err());
        assert!(metric_rmse(&[m.clone()], &[m.clone(), m.clone()]).is_err());
        assert!(metric_rmse(&[m.clone()], &[map(&[0.0])]).is_err());
        let buildings: &[bool] = &[false; 4];
        assert!(matches!(
            metric_channel_error(&[m.clone()], &[m.clone()], &[buildings]),
            Err(Error::Metric(_))
        ));
        assert!(metric_coverage_error(&[m.clone()], &[m.clone()], &[buildings], 0.8).is_err());
        assert!(metric_channel_error(&[m.clone()], &[m.clone()], &[&[true; 3]]).is_err());
        assert!(metrics_report(&[m.clone()], &[m.clone()], &[&[true; 4]], 1.0, false).is_err());
    }
}
