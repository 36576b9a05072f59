//! Loss, optimizer, learning-rate schedule, the training loop and the
//! evaluation metrics.

mod adam;
mod metrics;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use metrics::{
    metric_channel_error, metric_coverage_error, metric_rmse, metric_rmse_per_sample, metrics_report, MetricsReport,
};
pub use schedule::lr_at_epoch;

use crate::data::{assemble_batch, GeoMap, RadioMap, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Coverage threshold used at evaluation.
    pub threshold: f64,
    /// Average the loss over RoI pixels only.
    pub roi_loss: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr_start: 1e-4,
            lr_end: 1e-5,
            seed: 0,
            threshold: 0.8,
            roi_loss: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

fn target_batch<T: Scalar>(maps: &[&RadioMap]) -> Result<Tensor<T>> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let data = maps.iter().flat_map(|m| m.values().iter().map(|&v| T::from_f64(v as f64))).collect();
    Tensor::from_vec(&[maps.len(), 1, h, w], data)
}

fn roi_weights<T: Scalar>(geos: &[GeoMap]) -> Rc<[T]> {
    geos.iter()
        .flat_map(|g| g.roi().iter().map(|&f| if f { T::one() } else { T::zero() }))
        .collect()
}

/// Runs the full schedule, calling `on_step` after every update. Sample order
/// is reshuffled each epoch from a stream keyed by `cfg.seed`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    for s in samples {
        model.cfg.check_input(s.geo.height(), s.geo.width())?;
    }
    let mut rng = Rng64::keyed(cfg.seed, "train.shuffle");
    let mut state = AdamState::new();
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trace.len() >= m) {
                break 'epochs;
            }
            let geos: Vec<GeoMap> = chunk.iter().map(|&i| samples[i].geo.clone()).collect();
            let maps: Vec<&RadioMap> = chunk.iter().map(|&i| &samples[i].map).collect();
            let mut g = Graph::new();
            let pv = g.params(&model.params);
            let x = g.constant(assemble_batch(&geos)?);
            let y = forward(&mut g, &pv, &model.cfg, model.kind, x)?;
            let target = g.constant(target_batch(&maps)?);
            let loss = if cfg.roi_loss {
                g.mse_weighted(y, target, roi_weights(&geos))?
            } else {
                g.mse(y, target)?
            };
            let loss_value = g.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Backward(format!("non-finite loss at step {}", trace.len())));
            }
            let grads = g.backward(loss)?.into_param_grads();
            adam_step(&mut model.params, &grads, &mut state, lr)?;
            let rec = StepRecord {
                step: trace.len(),
                epoch,
                lr,
                loss: loss_value,
            };
            on_step(&rec);
            trace.push(rec);
        }
    }
    Ok(trace)
}

pub fn loss_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{:e},{:e}", r.step, r.epoch, r.lr, r.loss);
    }
    out
}

pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Model outputs for `geos` as radio maps, `batch` at a time.
pub fn predict_maps<T: Scalar>(model: &Model<T>, geos: &[GeoMap], batch: usize) -> Result<Vec<RadioMap>> {
    let mut out = Vec::with_capacity(geos.len());
    for chunk in geos.chunks(batch.max(1)) {
        let y = model.predict(&assemble_batch(chunk)?)?;
        let [n, _, h, w] = y.dims4();
        for i in 0..n {
            let plane = &y.data()[i * h * w..(i + 1) * h * w];
            out.push(RadioMap::new(h, w, plane.iter().map(|v| v.as_f64() as f32).collect())?);
        }
    }
    Ok(out)
}

/// Metrics of `preds` against the samples' ground truth.
pub fn evaluate_predictions(
    preds: &[RadioMap],
    samples: &[Sample],
    threshold: f64,
    per_sample_rmse: bool,
) -> Result<MetricsReport> {
    let truths: Vec<RadioMap> = samples.iter().map(|s| s.map.clone()).collect();
    let rois: Vec<&[bool]> = samples.iter().map(|s| s.geo.roi()).collect();
    metrics_report(preds, &truths, &rois, threshold, per_sample_rmse)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    threshold: f64,
    per_sample_rmse: bool,
) -> Result<MetricsReport> {
    for s in samples {
        model.cfg.check_input(s.geo.height(), s.geo.width())?;
    }
    let geos: Vec<GeoMap> = samples.iter().map(|s| s.geo.clone()).collect();
    let preds = predict_maps(model, &geos, 8)?;
    evaluate_predictions(&preds, samples, threshold, per_sample_rmse)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GenerateOptions;
    use crate::model::{ModelConfig, ModelKind};

    fn mini_samples(n: usize, seed: u64) -> Vec<Sample> {
        let opts = GenerateOptions::new(n, 16, seed);
        (0..n).map(|i| opts.sample(i).unwrap()).collect()
    }

    #[test]
    fn mse_gradient_is_scaled_residual() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf("p", Tensor::from_vec(&[4], vec![0.1, 0.5, 0.9, 0.2]).unwrap());
        let t = g.constant(Tensor::from_vec(&[4], vec![0.0, 0.5, 1.0, 0.4]).unwrap());
        let l = g.mse(p, t).unwrap();
        let grads = g.backward(l).unwrap();
        let expect = [0.05, 0.0, -0.05, -0.1];
        for (a, b) in grads.get(p).unwrap().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let samples = mini_samples(3, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr_start: 1e-3,
            lr_end: 1e-4,
            seed: 17,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::<f32>::new(ModelConfig::desk_mini(), ModelKind::Rmt, 17).unwrap();
            let trace = train(&mut m, &samples, &cfg, |_| {}).unwrap();
            (trace, m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(loss_csv(&a).lines().next(), Some("step,epoch,lr,loss"));
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let samples = mini_samples(2, 9);
        let truths: Vec<RadioMap> = samples.iter().map(|s| s.map.clone()).collect();
        let r = evaluate_predictions(&truths, &samples, 0.8, false).unwrap();
        assert_eq!((r.rmse, r.ch_pred_err, r.cov_pred_err), (0.0, 0.0, 0.0));

        let half: Vec<RadioMap> = truths.iter().map(|_| RadioMap::constant(16, 16, 0.5)).collect();
        let r = evaluate_predictions(&half, &samples, 0.8, false).unwrap();
        let (mut all, mut roi, mut n_roi, mut cov) = (0.0f64, 0.0f64, 0usize, 0usize);
        for s in &samples {
            for (&v, &free) in s.map.values().iter().zip(s.geo.roi()) {
                let d = (v as f64 - 0.5).powi(2);
                all += d;
                if free {
                    roi += d;
                    n_roi += 1;
                    cov += usize::from(v as f64 >= 0.8);
                }
            }
        }
        assert!((r.rmse - (all / 512.0).sqrt()).abs() < 1e-12);
        assert!((r.ch_pred_err - (roi / n_roi as f64).sqrt()).abs() < 1e-12);
        assert!((r.cov_pred_err - cov as f64 / n_roi as f64).abs() < 1e-12);
        assert_eq!(r.n_roi_pixels, n_roi);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr_end: 1e-3, ..TrainConfig::default() },
            TrainConfig { threshold: 1.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let mut m = Model::<f32>::new(ModelConfig::desk_mini(), ModelKind::Rmt, 0).unwrap();
        assert!(train(&mut m, &[], &TrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
