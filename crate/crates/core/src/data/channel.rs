//! Log-distance pathloss with wall penetration and spatially correlated
//! shadow fading.

use serde::{Deserialize, Serialize};

use super::geo::{los_wall_count, GeoMap};
use crate::error::{Error, Result};
use crate::rng::Rng64;

/// Received power (dBm) mapped to 0 by [`normalize_dbm`].
pub const MAX_LOSS_DB: f64 = 254.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthChannelParams {
    /// Pathloss exponent coefficient.
    pub alpha: f64,
    /// Offset, dB.
    pub beta: f64,
    /// Shadow-fading standard deviation, dB.
    pub sigma_sf: f64,
    /// Penetration loss per building cell crossed, dB.
    pub wall_loss_db: f64,
    /// Distances are clamped below at this value, meters.
    pub d0_m: f64,
    /// Half-width of the box filter that correlates the shadow fading, cells.
    pub sf_smooth: usize,
    /// Transmit power, dBm.
    pub tx_power_dbm: f64,
}

impl Default for SynthChannelParams {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            beta: 32.4,
            sigma_sf: 6.0,
            wall_loss_db: 10.0,
            d0_m: 1.0,
            sf_smooth: 2,
            tx_power_dbm: 0.0,
        }
    }
}

impl SynthChannelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.sigma_sf, self.wall_loss_db, self.d0_m, self.tx_power_dbm]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("channel parameters must be finite".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.sigma_sf < 0.0 {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma_sf)));
        }
        if self.wall_loss_db < 0.0 {
            return Err(Error::Config(format!("wall loss must be >= 0, got {}", self.wall_loss_db)));
        }
        if self.d0_m <= 0.0 {
            return Err(Error::Config(format!("d0 must be > 0, got {}", self.d0_m)));
        }
        Ok(())
    }
}

/// Maps received power in dBm onto `[0, 1]`: -254 dBm to 0, 0 dBm to 1.
pub fn normalize_dbm(p_rx_dbm: f64) -> f64 {
    ((p_rx_dbm + MAX_LOSS_DB) / MAX_LOSS_DB).clamp(0.0, 1.0)
}

pub fn denormalize_dbm(v: f64) -> f64 {
    MAX_LOSS_DB * v - MAX_LOSS_DB
}

/// Normalized received-power grid; exactly zero outside the RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RadioMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "radio map {height}x{width} given {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("radio map value {v} is not finite")));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.width + c]
    }

    /// Zeroes every cell outside the RoI of `geo`.
    pub fn masked(mut self, geo: &GeoMap) -> Self {
        for (v, &free) in self.values.iter_mut().zip(geo.roi()) {
            if !free {
                *v = 0.0;
            }
        }
        self
    }
}

/// Zero-mean field of standard deviation `sigma` (dB): i.i.d. normals,
/// box-filtered with half-width `smooth`, then rescaled.
pub fn shadow_fading_field(height: usize, width: usize, sigma: f64, smooth: usize, seed: u64) -> Vec<f64> {
    let n = height * width;
    if sigma == 0.0 || n < 2 {
        return vec![0.0; n];
    }
    let mut rng = Rng64::keyed(seed, "shadow");
    let mut white = Vec::with_capacity(n + 1);
    while white.len() < n {
        let (a, b) = rng.normal_pair();
        white.push(a);
        white.push(b);
    }
    white.truncate(n);

    let s = smooth as isize;
    let mut field = vec![0.0; n];
    for r in 0..height as isize {
        for c in 0..width as isize {
            let (mut acc, mut cnt) = (0.0, 0usize);
            for rr in (r - s).max(0)..=(r + s).min(height as isize - 1) {
                for cc in (c - s).max(0)..=(c + s).min(width as isize - 1) {
                    acc += white[rr as usize * width + cc as usize];
                    cnt += 1;
                }
            }
            field[r as usize * width + c as usize] = acc / cnt as f64;
        }
    }

    let mean = field.iter().sum::<f64>() / n as f64;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; n];
    }
    field.iter().map(|v| (v - mean) / std * sigma).collect()
}

/// Ground-truth radio map for `geo`: log-distance pathloss, plus wall
/// penetration along the Bresenham line to the transmitter, plus shadow
/// fading, converted to received power and normalized.
pub fn synth_radio_map(geo: &GeoMap, p: &SynthChannelParams, seed: u64) -> Result<RadioMap> {
    p.validate()?;
    let (h, w) = (geo.height(), geo.width());
    let sf = shadow_fading_field(h, w, p.sigma_sf, p.sf_smooth, seed);
    let tx = geo.tx();
    let mut values = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            if !geo.is_roi((r, c)) {
                continue;
            }
            let dr = r as f64 - tx.0 as f64;
            let dc = c as f64 - tx.1 as f64;
            let d = (geo.cell_size_m() * libm::sqrt(dr * dr + dc * dc)).max(p.d0_m);
            let walls = los_wall_count(geo, tx, (r, c))? as f64;
            let loss = 10.0 * p.alpha * libm::log10(d) + p.beta + p.wall_loss_db * walls + sf[r * w + c];
            values[r * w + c] = normalize_dbm(p.tx_power_dbm - loss) as f32;
        }
    }
    RadioMap::new(h, w, values)
}
