use super::{Kernel2D, Tensor};
use crate::error::{Error, Result};

/// Boundary handling for same-size convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Clamp out-of-range coordinates to the nearest edge pixel.
    #[default]
    Replicate,
    /// Wrap around (circular convolution).
    Periodic,
}

impl Padding {
    #[inline]
    fn index(self, i: isize, n: usize) -> usize {
        match self {
            Padding::Replicate => i.clamp(0, n as isize - 1) as usize,
            Padding::Periodic => i.rem_euclid(n as isize) as usize,
        }
    }
}

/// Convolves every channel of a `C×H×W` (or `H×W`) tensor with the same
/// kernel. This is a true convolution, so an impulse reproduces the kernel
/// unflipped around its position. Output shape equals input shape.
pub fn depthwise_conv2d(t: &Tensor, k: &Kernel2D, padding: Padding) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if h < k.height() || w < k.width() {
        return Err(Error::Size(format!(
            "feature map {h}×{w} smaller than {}×{} kernel",
            k.height(),
            k.width()
        )));
    }
    let cy = (k.height() / 2) as isize;
    let cx = (k.width() / 2) as isize;
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..k.height() {
                    let sy = padding.index(y as isize - (dy as isize - cy), h);
                    for dx in 0..k.width() {
                        let weight = k.at(dy, dx);
                        if weight == 0.0 {
                            continue;
                        }
                        let sx = padding.index(x as isize - (dx as isize - cx), w);
                        acc += weight as f64 * plane[sy * w + sx] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
