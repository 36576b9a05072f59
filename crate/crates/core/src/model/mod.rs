//! The multi-axis attention radio-map network and its convolutional
//! baseline.

mod attention;
mod config;
mod net;
mod partition;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use attention::{attention_specs, mhsa, AttentionVars};
pub use config::{ModelConfig, PROFILES};
pub use net::{
    decoder_forward, encoder_forward, forward, param_count, param_specs, stage_forward, stem_forward, DecoderOutput,
    FeaturePyramid, ModelKind,
};
pub use partition::{partition, partition_index, unpartition, Partition};

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamSet, ParamSpec, Scalar, Tensor};

/// JSON sidecar stored next to a checkpoint: what was trained and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub kind: ModelKind,
    pub config: ModelConfig,
    #[serde(default)]
    pub train: Option<crate::train::TrainConfig>,
    /// Effective command-line settings.
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

/// `model.rmtc` -> `model.rmtc.json`.
pub fn card_path(checkpoint: impl AsRef<Path>) -> PathBuf {
    let mut s = checkpoint.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_card(checkpoint: impl AsRef<Path>, card: &ModelCard) -> Result<()> {
    let path = card_path(checkpoint);
    let mut text = serde_json::to_string_pretty(card)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// The card next to `checkpoint`, if there is one.
pub fn read_card(checkpoint: impl AsRef<Path>) -> Result<Option<ModelCard>> {
    let path = card_path(checkpoint);
    match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub kind: ModelKind,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters; each tensor draws from its own stream keyed by
    /// `seed` and the parameter name.
    pub fn new(cfg: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamSet::initialize(&param_specs(&cfg, kind), seed)?;
        Ok(Self { cfg, kind, params })
    }

    pub fn from_params(cfg: ModelConfig, kind: ModelKind, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_against(&param_specs(&cfg, kind))?;
        Ok(Self { cfg, kind, params })
    }

    pub fn load(cfg: ModelConfig, kind: ModelKind, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(cfg, kind, load_checkpoint(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.params, path)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.cfg, self.kind)
    }

    /// Forward pass without gradients: `[B, 2, H, W] -> [B, 1, H, W]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pv = g.params(&self.params);
        let x = g.constant(input.clone());
        let y = forward(&mut g, &pv, &self.cfg, self.kind, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng64::new(seed);
        Tensor::from_fn(&[batch, 2, cfg.height, cfg.width], |_| rng.next_f64())
    }

    fn dims(g: &Graph<f32>, v: crate::tensor::Var) -> Vec<usize> {
        g.shape(v)[1..].to_vec()
    }

    #[test]
    fn desk_shape_ladder() {
        let cfg = ModelConfig::desk();
        for kind in [ModelKind::Rmt, ModelKind::Baseline] {
            let model = Model::<f32>::new(cfg.clone(), kind, 1).unwrap();
            let mut g = Graph::new();
            let pv = g.params(&model.params);
            let x = g.constant(Tensor::zeros(&[1, 2, 64, 64]));
            let pyr = encoder_forward(&mut g, &pv, &cfg, kind, x).unwrap();
            let enc: Vec<_> = pyr.levels.iter().map(|&v| dims(&g, v)).collect();
            assert_eq!(enc, [[16, 32, 32], [16, 16, 16], [32, 8, 8], [64, 4, 4], [128, 2, 2]]);
            let dec = decoder_forward(&mut g, &pv, &cfg, &pyr, x).unwrap();
            let ys: Vec<_> = dec.levels.iter().map(|&v| dims(&g, v)).collect();
            assert_eq!(ys, [[128, 4, 4], [64, 8, 8], [32, 16, 16], [16, 32, 32]]);
            assert_eq!(g.shape(dec.output), [1, 1, 64, 64]);
        }
    }

    #[test]
    fn stage_four_of_desk() {
        let cfg = ModelConfig::desk();
        let model = Model::<f32>::new(cfg.clone(), ModelKind::Rmt, 2).unwrap();
        let mut g = Graph::new();
        let pv = g.params(&model.params);
        let x = g.constant(Tensor::full(&[1, 64, 4, 4], 0.1));
        let y = stage_forward(&mut g, &pv, &cfg, ModelKind::Rmt, 4, x).unwrap();
        assert_eq!(g.shape(y), [1, 128, 2, 2]);
        assert!(stage_forward(&mut g, &pv, &cfg, ModelKind::Rmt, 5, x).is_err());
    }

    #[test]
    fn zero_parameters_give_half() {
        let cfg = ModelConfig::desk_mini();
        let mut model = Model::<f64>::new(cfg.clone(), ModelKind::Rmt, 3).unwrap();
        model.params = model.params.map(|_| 0.0);
        let input = random_input(&cfg, 2, 4);
        let mut g = Graph::new();
        let pv = g.params(&model.params);
        let x = g.constant(input.clone());
        let pyr = encoder_forward(&mut g, &pv, &cfg, ModelKind::Rmt, x).unwrap();
        for &level in &pyr.levels {
            assert!(g.value(level).data().iter().all(|&v| v == 0.0));
        }
        let out = model.predict(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stem_of_zero_params_is_zero() {
        let cfg = ModelConfig::desk();
        let model = Model::<f32>::new(cfg.clone(), ModelKind::Rmt, 0).unwrap();
        let params = model.params.map(|_| 0.0);
        let mut g = Graph::new();
        let pv = g.params(&params);
        let x = g.constant(Tensor::full(&[1, 2, 64, 64], 1.0));
        let y = stem_forward(&mut g, &pv, &cfg, x).unwrap();
        assert_eq!(g.shape(y), [1, 16, 32, 32]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let cfg = ModelConfig::desk_mini();
        for kind in [ModelKind::Rmt, ModelKind::Baseline] {
            let model = Model::<f64>::new(cfg.clone(), kind, 9).unwrap();
            let out = model.predict(&random_input(&cfg, 3, 1)).unwrap();
            assert_eq!(out.shape(), [3, 1, 16, 16]);
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_extent_is_a_shape_error() {
        let model = Model::<f32>::new(ModelConfig::desk(), ModelKind::Rmt, 0).unwrap();
        let err = model.predict(&Tensor::zeros(&[1, 2, 32, 32])).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn baseline_parameter_parity() {
        for cfg in [ModelConfig::desk(), ModelConfig::desk_mini(), ModelConfig::paper()] {
            let rmt = param_count(&cfg, ModelKind::Rmt) as f64;
            let base = param_count(&cfg, ModelKind::Baseline) as f64;
            assert!((base / rmt - 1.0).abs() <= 0.2, "{}: {base} vs {rmt}", cfg.profile);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::desk_mini();
        let model = Model::<f32>::new(cfg.clone(), ModelKind::Rmt, 5).unwrap();
        let input = random_input(&cfg, 1, 2).cast::<f32>();
        assert_eq!(model.predict(&input).unwrap(), model.predict(&input).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rmtc");
        let model = Model::<f32>::new(ModelConfig::desk_mini(), ModelKind::Baseline, 8).unwrap();
        model.save(&path).unwrap();
        let back = Model::<f32>::load(ModelConfig::desk_mini(), ModelKind::Baseline, &path).unwrap();
        assert_eq!(back.params, model.params);
        assert!(Model::<f32>::load(ModelConfig::desk_mini(), ModelKind::Rmt, &path).is_err());
    }

    #[test]
    fn desk_mini_stage_grad_check() {
        let cfg = ModelConfig::desk_mini();
        let model = Model::<f64>::new(cfg.clone(), ModelKind::Rmt, 6).unwrap();
        let stage: ParamSet<f64> = {
            let mut s = ParamSet::new();
            for (name, t) in model.params.iter().filter(|(n, _)| n.starts_with("stage2.")) {
                s.insert(name, t.clone()).unwrap();
            }
            s
        };
        let mut rng = Rng64::new(1);
        let x = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.next_f64() - 0.5);
        let report = grad_check(
            |g, pv| {
                let xv = g.constant(x.clone());
                let y = stage_forward(g, pv, &cfg, ModelKind::Rmt, 2, xv)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &stage,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "{:?}", report.worst());
    }
}
