use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network dimensions. Stage `n` (1-based) emits `stage_channels[n-1]`
/// channels at `H / 2^(n+1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: String,
    pub height: usize,
    pub width: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub window: usize,
    pub head_dim: usize,
    pub mlp_expansion: usize,
    /// Blocks per encoder stage.
    pub depth: usize,
    /// Width of the full-resolution refinement conv in the output head; 0
    /// maps the concatenated input straight to one channel. The desk
    /// profiles use 32.
    #[serde(default)]
    pub head_channels: usize,
}

pub const PROFILES: [&str; 3] = ["paper", "desk", "desk-mini"];

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            height: 256,
            width: 256,
            stem_channels: 128,
            stage_channels: vec![128, 256, 512, 1024],
            window: 8,
            head_dim: 32,
            mlp_expansion: 4,
            depth: 1,
            head_channels: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            height: 64,
            width: 64,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128],
            window: 2,
            head_dim: 8,
            mlp_expansion: 4,
            depth: 1,
            head_channels: 32,
        }
    }

    pub fn desk_mini() -> Self {
        Self {
            profile: "desk-mini".into(),
            height: 16,
            width: 16,
            stem_channels: 4,
            stage_channels: vec![4, 8],
            window: 2,
            head_dim: 4,
            mlp_expansion: 4,
            depth: 1,
            head_channels: 32,
        }
    }

    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "desk-mini" => Ok(Self::desk_mini()),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected one of {})",
                PROFILES.join(", ")
            ))),
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Channels of pyramid level `n`; level 0 is the stem.
    pub fn level_channels(&self, n: usize) -> usize {
        if n == 0 {
            self.stem_channels
        } else {
            self.stage_channels[n - 1]
        }
    }

    /// `(H, W)` of pyramid level `n`.
    pub fn level_extent(&self, n: usize) -> (usize, usize) {
        (self.height >> (n + 1), self.width >> (n + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("profile {}: {msg}", self.profile)));
        if self.stage_channels.is_empty() {
            return bad("no encoder stages".into());
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("zero channel width".into());
        }
        if self.window == 0 || self.head_dim == 0 || self.mlp_expansion == 0 || self.depth == 0 {
            return bad("window, head_dim, mlp_expansion and depth must be positive".into());
        }
        let n = self.stages();
        if n >= usize::BITS as usize - 1 {
            return bad(format!("{n} stages"));
        }
        let unit = 1usize << (n + 1);
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0 {
            return bad(format!(
                "input {}x{} not divisible by 2^{} = {unit}",
                self.height,
                self.width,
                n + 1
            ));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c % self.head_dim != 0 {
                return bad(format!("stage {} width {c} not divisible by head_dim {}", i + 1, self.head_dim));
            }
            let (h, w) = self.level_extent(i + 1);
            if h % self.window != 0 || w % self.window != 0 {
                return bad(format!("stage {} extent {h}x{w} not divisible by window {}", i + 1, self.window));
            }
        }
        Ok(())
    }

    /// Checks that an input of `h x w` fits this configuration.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "profile {} expects {}x{} inputs, got {h}x{w}",
                self.profile, self.height, self.width
            )));
        }
        Ok(())
    }
}
