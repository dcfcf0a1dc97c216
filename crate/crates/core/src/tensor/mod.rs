//! Dense `f32` tensors of rank 1 to 4, plus the handful of kernels the
//! cascade needs.
//!
//! Feature maps are channel-major (`C×H×W`) and stored row-major. Every
//! constructor checks that the payload length matches the extents and that
//! all values are finite, so downstream code never has to re-check.

mod conv;
mod io;
mod spectrum;

pub use conv::{depthwise_conv2d, Padding};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC};
pub use spectrum::{dft_power as spectrum_power_f64, power_spectrum};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Size(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {}",
                data[i], i
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Interprets the tensor as a `C×H×W` feature map. Rank-2 tensors are
    /// treated as a single channel.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [h, w] => Ok((1, h, w)),
            _ => Err(Error::Size(format!(
                "expected a C×H×W or H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Returns channel `c` of a `C×H×W` map as a contiguous slice.
    pub fn channel(&self, c: usize) -> Result<&[f32]> {
        let (channels, h, w) = self.chw()?;
        if c >= channels {
            return Err(Error::Size(format!(
                "channel {c} out of range for {channels} channels"
            )));
        }
        Ok(&self.data[c * h * w..(c + 1) * h * w])
    }

    /// Spatial mean of each channel (global average pooling).
    pub fn global_average_pool(&self) -> Result<Vec<f32>> {
        let (c, h, w) = self.chw()?;
        let hw = h * w;
        Ok((0..c)
            .map(|ch| {
                let s: f64 = self.data[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                (s / hw as f64) as f32
            })
            .collect())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Size(format!(
            "rank {} outside supported range 1..={MAX_RANK}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Size(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// A centered 2-D kernel with odd extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    height: usize,
    width: usize,
    weights: Vec<f32>,
}

impl Kernel2D {
    pub fn new(height: usize, width: usize, weights: Vec<f32>) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(Error::Size(format!(
                "kernel extents must be odd, got {height}×{width}"
            )));
        }
        if weights.len() != height * width {
            return Err(Error::Size(format!(
                "{height}×{width} kernel needs {} weights, got {}",
                height * width,
                weights.len()
            )));
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    /// The 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`.
    pub fn laplacian() -> Self {
        Self {
            height: 3,
            width: 3,
            weights: vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn at(&self, dy: usize, dx: usize) -> f32 {
        self.weights[dy * self.width + dx]
    }
}
