//! Parameter layout and forward passes for the attention model and the
//! convolutional baseline. Both share the stem, the downsampling convs, the
//! residual conv unit and the decoder; they differ only in the token-mixing
//! sublayers of each encoder block.

use serde::{Deserialize, Serialize};

use super::attention::{attention_specs, mhsa, AttentionVars};
use super::config::ModelConfig;
use super::partition::{partition, unpartition, Partition};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSpec, ParamVars, Scalar, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rmt,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rmt => "rmt",
            ModelKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmt" => Ok(ModelKind::Rmt),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model '{other}' (expected rmt or baseline)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec::kaiming(format!("{name}.w"), &[cout, cin, k, k], cin * k * k));
    out.push(ParamSpec::zeros(format!("{name}.b"), &[cout]));
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec::ones(format!("{name}.g"), &[c]));
    out.push(ParamSpec::zeros(format!("{name}.b"), &[c]));
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

/// Every trainable tensor, in a deterministic order.
pub fn param_specs(cfg: &ModelConfig, kind: ModelKind) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let c0 = cfg.stem_channels;
    conv_specs(&mut s, "stem.conv1", 2, c0, 3);
    conv_specs(&mut s, "stem.conv2", c0, c0, 3);
    for n in 1..=cfg.stages() {
        let (cin, c) = (cfg.level_channels(n - 1), cfg.level_channels(n));
        conv_specs(&mut s, &format!("stage{n}.down"), cin, c, 3);
        for b in 0..cfg.depth {
            let p = block_prefix(n, b);
            norm_specs(&mut s, &format!("{p}.conv.norm"), c);
            conv_specs(&mut s, &format!("{p}.conv.conv1"), c, c, 3);
            conv_specs(&mut s, &format!("{p}.conv.conv2"), c, c, 3);
            match kind {
                ModelKind::Rmt => {
                    for axis in ["block", "grid"] {
                        norm_specs(&mut s, &format!("{p}.{axis}_attn.norm"), c);
                        s.extend(attention_specs(&format!("{p}.{axis}_attn"), c));
                        let hidden = c * cfg.mlp_expansion;
                        norm_specs(&mut s, &format!("{p}.{axis}_mlp.norm"), c);
                        conv_specs(&mut s, &format!("{p}.{axis}_mlp.fc1"), c, hidden, 1);
                        conv_specs(&mut s, &format!("{p}.{axis}_mlp.fc2"), hidden, c, 1);
                    }
                }
                ModelKind::Baseline => {
                    for mix in ["mix1", "mix2"] {
                        norm_specs(&mut s, &format!("{p}.{mix}.norm"), c);
                        conv_specs(&mut s, &format!("{p}.{mix}.conv"), c, c, 3);
                    }
                }
            }
        }
    }
    let n = cfg.stages();
    let top = cfg.level_channels(n);
    let up = |s: &mut Vec<ParamSpec>, level: usize, cin: usize, cout: usize| {
        s.push(ParamSpec::kaiming(format!("dec.up{level}.w"), &[cin, cout, 2, 2], cin));
        s.push(ParamSpec::zeros(format!("dec.up{level}.b"), &[cout]));
    };
    up(&mut s, n, top, top);
    for level in (1..n).rev() {
        let c = cfg.level_channels(level);
        up(&mut s, level, c + cfg.level_channels(level + 1), c);
    }
    let head_in = 2 + cfg.level_channels(1);
    if cfg.head_channels > 0 {
        conv_specs(&mut s, "head.refine", head_in, cfg.head_channels, 3);
        conv_specs(&mut s, "head.out", cfg.head_channels, 1, 3);
    } else {
        conv_specs(&mut s, "head.out", head_in, 1, 3);
    }
    s
}

pub fn param_count(cfg: &ModelConfig, kind: ModelKind) -> usize {
    param_specs(cfg, kind).iter().map(ParamSpec::numel).sum()
}

/// Encoder outputs `[X_0, .., X_N]`; `X_0` is the stem.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Decoder outputs `[Y_N, .., Y_1]` and the sigmoid map.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub levels: Vec<Var>,
    pub output: Var,
}

struct Net<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a ParamVars,
    cfg: &'a ModelConfig,
}

impl<T: Scalar> Net<'_, T> {
    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        let pad = self.g.shape(w)[2] / 2;
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p.get(&format!("{name}.g"))?;
        let beta = self.p.get(&format!("{name}.b"))?;
        self.g.layer_norm_channels(x, gamma, beta, T::from_f64(LN_EPS))
    }

    fn conv_unit(&mut self, p: &str, x: Var) -> Result<Var> {
        let y = self.norm(&format!("{p}.norm"), x)?;
        let y = self.conv(&format!("{p}.conv1"), y, 1)?;
        let y = self.g.gelu(y);
        let y = self.conv(&format!("{p}.conv2"), y, 1)?;
        self.g.add(x, y)
    }

    fn attention(&mut self, p: &str, x: Var, kind: Partition) -> Result<Var> {
        let shape: [usize; 4] = self.g.shape(x).try_into().map_err(|_| Error::Shape("attention input rank".into()))?;
        let y = self.norm(&format!("{p}.norm"), x)?;
        let tokens = partition(self.g, y, self.cfg.window, kind)?;
        let w = AttentionVars::lookup(self.p, p)?;
        let mixed = mhsa(self.g, &w, tokens, self.cfg.head_dim)?;
        let y = unpartition(self.g, mixed, shape, self.cfg.window, kind)?;
        self.g.add(x, y)
    }

    fn mlp(&mut self, p: &str, x: Var) -> Result<Var> {
        let y = self.norm(&format!("{p}.norm"), x)?;
        let y = self.conv(&format!("{p}.fc1"), y, 1)?;
        let y = self.g.gelu(y);
        let y = self.conv(&format!("{p}.fc2"), y, 1)?;
        self.g.add(x, y)
    }

    fn mix(&mut self, p: &str, x: Var) -> Result<Var> {
        let y = self.norm(&format!("{p}.norm"), x)?;
        let y = self.conv(&format!("{p}.conv"), y, 1)?;
        let y = self.g.gelu(y);
        self.g.add(x, y)
    }

    fn stem(&mut self, input: Var) -> Result<Var> {
        let y = self.conv("stem.conv1", input, 2)?;
        let y = self.g.gelu(y);
        self.conv("stem.conv2", y, 1)
    }

    fn stage(&mut self, kind: ModelKind, n: usize, x: Var) -> Result<Var> {
        let mut x = self.conv(&format!("stage{n}.down"), x, 2)?;
        for b in 0..self.cfg.depth {
            let p = block_prefix(n, b);
            x = self.conv_unit(&format!("{p}.conv"), x)?;
            match kind {
                ModelKind::Rmt => {
                    x = self.attention(&format!("{p}.block_attn"), x, Partition::Block)?;
                    x = self.mlp(&format!("{p}.block_mlp"), x)?;
                    x = self.attention(&format!("{p}.grid_attn"), x, Partition::Grid)?;
                    x = self.mlp(&format!("{p}.grid_mlp"), x)?;
                }
                ModelKind::Baseline => {
                    x = self.mix(&format!("{p}.mix1"), x)?;
                    x = self.mix(&format!("{p}.mix2"), x)?;
                }
            }
        }
        Ok(x)
    }

    fn up(&mut self, level: usize, x: Var) -> Result<Var> {
        let w = self.p.get(&format!("dec.up{level}.w"))?;
        let b = self.p.get(&format!("dec.up{level}.b"))?;
        let y = self.g.conv_transpose2d(x, w, b)?;
        Ok(self.g.gelu(y))
    }

    fn decoder(&mut self, pyr: &FeaturePyramid, input: Var) -> Result<DecoderOutput> {
        let n = self.cfg.stages();
        if pyr.levels.len() != n + 1 {
            return Err(Error::Shape(format!(
                "decoder expects {} pyramid levels, got {}",
                n + 1,
                pyr.levels.len()
            )));
        }
        let mut y = self.up(n, pyr.levels[n])?;
        let mut levels = vec![y];
        for level in (1..n).rev() {
            let cat = self.g.concat_channels(pyr.levels[level], y)?;
            y = self.up(level, cat)?;
            levels.push(y);
        }
        let up = self.g.upsample_nearest2x(y)?;
        let cat = self.g.concat_channels(input, up)?;
        let mut h = cat;
        if self.cfg.head_channels > 0 {
            h = self.conv("head.refine", h, 1)?;
            h = self.g.gelu(h);
        }
        let logits = self.conv("head.out", h, 1)?;
        Ok(DecoderOutput {
            levels,
            output: self.g.sigmoid(logits),
        })
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, cfg: &ModelConfig, input: Var) -> Result<()> {
    cfg.validate()?;
    match *g.shape(input) {
        [_, 2, h, w] => cfg.check_input(h, w),
        ref s => Err(Error::Shape(format!("model input must be [B, 2, H, W], got {s:?}"))),
    }
}

/// Stem only: `[B, 2, H, W] -> [B, C0, H/2, W/2]`.
pub fn stem_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, input: Var) -> Result<Var> {
    check_input(g, cfg, input)?;
    Net { g, p, cfg }.stem(input)
}

/// Encoder stage `n` (1-based) applied to `X_{n-1}`.
pub fn stage_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    kind: ModelKind,
    n: usize,
    x: Var,
) -> Result<Var> {
    if n == 0 || n > cfg.stages() {
        return Err(Error::Config(format!("stage {n} outside 1..={}", cfg.stages())));
    }
    Net { g, p, cfg }.stage(kind, n, x)
}

pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    kind: ModelKind,
    input: Var,
) -> Result<FeaturePyramid> {
    check_input(g, cfg, input)?;
    let mut net = Net { g, p, cfg };
    let mut levels = vec![net.stem(input)?];
    for n in 1..=cfg.stages() {
        let x = net.stage(kind, n, levels[n - 1])?;
        levels.push(x);
    }
    Ok(FeaturePyramid { levels })
}

pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    pyr: &FeaturePyramid,
    input: Var,
) -> Result<DecoderOutput> {
    check_input(g, cfg, input)?;
    Net { g, p, cfg }.decoder(pyr, input)
}

/// Full network: `[B, 2, H, W]` to a sigmoid map `[B, 1, H, W]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    kind: ModelKind,
    input: Var,
) -> Result<Var> {
    let pyr = encoder_forward(g, p, cfg, kind, input)?;
    Ok(decoder_forward(g, p, cfg, &pyr, input)?.output)
}
