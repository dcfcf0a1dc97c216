//! Structural energy sieve: a fixed Laplacian high-pass response pooled
//! over the most energetic channels.
//!
//! For a feature map `z` with `C` channels the per-channel energy is
//! `e_c = log(mean_{h,w} |Lap * z|_c + eps)` and the score is the mean of
//! the `K` largest `e_c`. Natural images concentrate power at low spatial
//! frequencies, so white-noise inputs score high and flat inputs score low.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{depthwise_conv2d, Kernel2D, Padding, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesConfig {
    pub top_k: usize,
    pub epsilon: f64,
    /// Fixed channel set chosen from ID statistics. `None` selects the
    /// top-K channels per sample.
    #[serde(default)]
    pub global_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub padding: PaddingMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Replicate,
    Periodic,
}

impl From<PaddingMode> for Padding {
    fn from(m: PaddingMode) -> Self {
        match m {
            PaddingMode::Replicate => Padding::Replicate,
            PaddingMode::Periodic => Padding::Periodic,
        }
    }
}

/// `max(1, ceil(0.1 * C))`.
pub fn default_top_k(channels: usize) -> usize {
    channels.div_ceil(10).max(1)
}

impl SesConfig {
    pub fn for_channels(channels: usize) -> Self {
        Self {
            top_k: default_top_k(channels),
            epsilon: DEFAULT_EPSILON,
            global_channels: None,
            padding: PaddingMode::Replicate,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > channels {
            return Err(Error::Config(format!(
                "top_k {} outside 1..={channels}",
                self.top_k
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if let Some(chs) = &self.global_channels {
            if chs.len() != self.top_k || chs.iter().any(|&c| c >= channels) {
                return Err(Error::Config(format!(
                    "global channel set {chs:?} inconsistent with top_k {} and {channels} channels",
                    self.top_k
                )));
            }
        }
        Ok(())
    }
}

/// `|Lap * z|` element-wise.
pub fn laplacian_response(z: &Tensor, padding: Padding) -> Result<Tensor> {
    let conv = depthwise_conv2d(z, &Kernel2D::laplacian(), padding)?;
    let shape = conv.shape().to_vec();
    let data = conv.into_data().into_iter().map(f32::abs).collect();
    Tensor::new(shape, data)
}

/// `log(spatial mean + eps)` per channel.
pub fn channel_energy(h: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    let (c, hh, ww) = h.chw()?;
    let hw = hh * ww;
    Ok((0..c)
        .map(|ch| {
            let sum: f64 = h.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .sum();
            (sum / hw as f64 + epsilon).ln()
        })
        .collect())
}

/// Indices of the `k` largest energies, ties broken by lower index.
pub fn top_k_channels(energies: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..energies.len()).collect();
    idx.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Pools precomputed channel energies into the sieve score.
pub fn pool_energies(energies: &[f64], cfg: &SesConfig) -> Result<f64> {
    cfg.validate(energies.len())?;
    let chosen = match &cfg.global_channels {
        Some(chs) => chs.clone(),
        None => top_k_channels(energies, cfg.top_k),
    };
    Ok(chosen.iter().map(|&c| energies[c]).sum::<f64>() / chosen.len() as f64)
}

pub fn ses_energies(z: &Tensor, cfg: &SesConfig) -> Result<Vec<f64>> {
    let h = laplacian_response(z, cfg.padding.into())?;
    channel_energy(&h, cfg.epsilon)
}

pub fn ses_score(z: &Tensor, cfg: &SesConfig) -> Result<f64> {
    pool_energies(&ses_energies(z, cfg)?, cfg)
}

/// Ratio of the strongest channel's `exp(e_c)` to the channel mean of
/// `exp(e_c)`. Always `>= 1`.
pub fn spectral_contrast_gain(z: &Tensor, cfg: &SesConfig) -> Result<f64> {
    let e = ses_energies(z, cfg)?;
    Ok(contrast_gain_from_energies(&e))
}

pub fn contrast_gain_from_energies(e: &[f64]) -> f64 {
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Shift by the max so large energies cannot overflow.
    let mean = e.iter().map(|&v| (v - max).exp()).sum::<f64>() / e.len() as f64;
    1.0 / mean
}

/// FLOPs charged to the sieve: the 9-tap depth-wise pass (multiply + add
/// per tap), the absolute value, and the spatial accumulation.
pub fn overhead_flops(c: usize, h: usize, w: usize) -> u64 {
    let chw = (c * h * w) as u64;
    2 * 9 * chw + 2 * chw + 2 * c as u64
}

/// Compares the mean squared periodic Laplacian response against the
/// spectrum weighted by the squared Laplacian eigenvalue
/// `lambda(u,v) = (2 - 2cos(2πu/H)) + (2 - 2cos(2πv/W))`. The two are equal
/// for the discrete operator, so the ratio is 1 up to rounding. A channel
/// with no non-DC energy returns 1.
pub fn frequency_weighting_ratio(channel: &Tensor) -> Result<f64> {
    let (c, h, w) = channel.chw()?;
    if c != 1 || h < 8 || w < 8 {
        return Err(Error::Size(format!(
            "frequency_weighting_ratio needs a single H×W channel with H,W >= 8, got {:?}",
            channel.shape()
        )));
    }
    let plane = Tensor::new(vec![1, h, w], channel.data().to_vec())?;
    let conv = depthwise_conv2d(&plane, &Kernel2D::laplacian(), Padding::Periodic)?;
    let response: f64 = conv
        .data()
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        / (h * w) as f64;
    let weighted = weighted_spectral_energy(channel.data(), h, w)?;
    if weighted <= f64::EPSILON * 1e3 && response <= f64::EPSILON * 1e3 {
        return Ok(1.0);
    }
    Ok(response / weighted)
}

/// `(1/(HW)^2) Σ lambda(u,v)^2 |X(u,v)|^2`, the spectral side of the
/// Laplacian energy identity.
pub fn weighted_spectral_energy(plane: &[f32], h: usize, w: usize) -> Result<f64> {
    use std::f64::consts::PI;
    let power = crate::tensor::spectrum_power_f64(plane, h, w)?;
    let mut acc = 0.0;
    for u in 0..h {
        let lu = 2.0 - 2.0 * (2.0 * PI * u as f64 / h as f64).cos();
        for v in 0..w {
            let lv = 2.0 - 2.0 * (2.0 * PI * v as f64 / w as f64).cos();
            let lambda = lu + lv;
            acc += lambda * lambda * power[u * w + v];
        }
    }
    let n = (h * w) as f64;
    Ok(acc / (n * n))
}
