use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

/// `|DFT(channel)|²` at every discrete frequency `(u, v)`, laid out `H×W`.
///
/// This is a direct `O((HW)²)` transform meant as a reference, not a fast
/// path. The forward transform is unnormalized, so the mean of the output
/// equals the sum of squared inputs.
pub fn power_spectrum(channel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = channel.chw()?;
    if c != 1 {
        return Err(Error::Size(format!(
            "power_spectrum takes a single channel, got {c}"
        )));
    }
    let power = dft_power(channel.data(), h, w)?;
    Tensor::new(vec![h, w], power.into_iter().map(|p| p as f32).collect())
}

pub fn dft_power(plane: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < 2 || w < 2 {
        return Err(Error::Size(format!("spectrum needs H,W >= 2, got {h}×{w}")));
    }
    let twiddle = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    };
    let th = twiddle(h);
    let tw = twiddle(w);
    let mut out = vec![0.0f64; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for y in 0..h {
                let (cy, sy) = th[(u * y) % h];
                for x in 0..w {
                    let (cx, sx) = tw[(v * x) % w];
                    // e^{i(a+b)} = (cy + i sy)(cx + i sx)
                    let c = cy * cx - sy * sx;
                    let s = cy * sx + sy * cx;
                    let val = plane[y * w + x] as f64;
                    re += val * c;
                    im += val * s;
                }
            }
            out[u * w + v] = re * re + im * im;
        }
    }
    Ok(out)
}
