//! Seeded staged feature extractor with a closed-form FLOPs ledger.
//!
//! The default network is three 3×3 convolution stages (3→16→32→64
//! channels, stride 2 each) followed by global average pooling and a
//! linear head. Parameters are drawn once from `U(-s, s)` with
//! `s = 1/sqrt(fan_in)` and never trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// `(channels, height, width)` of a feature map.
pub type Extents = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    spec: StageSpec,
    input: Extents,
    output: Extents,
    /// `[out][in][ky][kx]`
    weights: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct LinearHead {
    in_features: usize,
    classes: usize,
    /// `[class][feature]`
    weights: Vec<f32>,
    bias: Vec<f32>,
}

/// Per-stage multiply-accumulate counts ×2. The head is kept separate from
/// the convolution stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub stages: Vec<u64>,
    pub head: u64,
}

impl FlopsLedger {
    pub fn total(&self) -> u64 {
        self.stages.iter().sum::<u64>() + self.head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    seed: u64,
    input: Extents,
    stages: Vec<ConvStage>,
    head: LinearHead,
    ledger: FlopsLedger,
}

/// Result of running every stage plus the head.
#[derive(Debug, Clone)]
pub struct FullForward {
    pub stages: Vec<Tensor>,
    pub logits: Vec<f32>,
}

pub fn conv_output_extents(input: Extents, spec: &StageSpec) -> Extents {
    let (_, h, w) = input;
    (spec.out_channels, h.div_ceil(spec.stride), w.div_ceil(spec.stride))
}

pub fn conv_flops(input: Extents, spec: &StageSpec) -> u64 {
    let (oc, oh, ow) = conv_output_extents(input, spec);
    2 * (oc * oh * ow * spec.in_channels * KERNEL * KERNEL) as u64
}

pub fn head_flops(in_features: usize, classes: usize) -> u64 {
    2 * (in_features * classes) as u64
}

pub fn init_backbone(seed: u64, classes: usize, input: Extents) -> Result<Backbone> {
    let mut specs = Vec::with_capacity(DEFAULT_CHANNELS.len());
    let mut prev = input.0;
    for &out in &DEFAULT_CHANNELS {
        specs.push(StageSpec {
            in_channels: prev,
            out_channels: out,
            stride: 2,
        });
        prev = out;
    }
    Backbone::new(seed, classes, input, &specs)
}

impl Backbone {
    pub fn new(seed: u64, classes: usize, input: Extents, specs: &[StageSpec]) -> Result<Self> {
        if input.0 == 0 || input.1 == 0 || input.2 == 0 {
            return Err(Error::Size(format!("zero extent in input {input:?}")));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if specs.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(specs.len());
        let mut extents = input;
        for (i, spec) in specs.iter().enumerate() {
            if spec.in_channels == 0 || spec.out_channels == 0 {
                return Err(Error::Config(format!("stage {i} has a zero channel count")));
            }
            if !(1..=2).contains(&spec.stride) {
                return Err(Error::Config(format!("stage {i} stride must be 1 or 2")));
            }
            if spec.in_channels != extents.0 {
                return Err(Error::Size(format!(
                    "stage {i} expects {} input channels but receives {}",
                    spec.in_channels, extents.0
                )));
            }
            let fan_in = spec.in_channels * KERNEL * KERNEL;
            let s = 1.0 / (fan_in as f32).sqrt();
            let weights = (0..spec.out_channels * fan_in)
                .map(|_| rng.random_range(-s..=s))
                .collect();
            let bias = (0..spec.out_channels)
                .map(|_| rng.random_range(-s..=s))
                .collect();
            let output = conv_output_extents(extents, spec);
            stages.push(ConvStage {
                spec: *spec,
                input: extents,
                output,
                weights,
                bias,
            });
            extents = output;
        }
        let in_features = extents.0;
        let s = 1.0 / (in_features as f32).sqrt();
        let head = LinearHead {
            in_features,
            classes,
            weights: (0..classes * in_features)
                .map(|_| rng.random_range(-s..=s))
                .collect(),
            bias: (0..classes).map(|_| rng.random_range(-s..=s)).collect(),
        };
        let ledger = FlopsLedger {
            stages: stages.iter().map(|st| conv_flops(st.input, &st.spec)).collect(),
            head: head_flops(in_features, classes),
        };
        Ok(Self {
            seed,
            input,
            stages,
            head,
            ledger,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_extents(&self) -> Extents {
        self.input
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn stage_specs(&self) -> Vec<StageSpec> {
        self.stages.iter().map(|s| s.spec).collect()
    }

    pub fn stage_input_extents(&self, i: usize) -> Result<Extents> {
        self.stage(i).map(|s| s.input)
    }

    pub fn stage_output_extents(&self, i: usize) -> Result<Extents> {
        self.stage(i).map(|s| s.output)
    }

    pub fn ledger(&self) -> &FlopsLedger {
        &self.ledger
    }

    /// FLOPs of stage `i`; `i == stage_count()` addresses the head.
    pub fn stage_flops(&self, i: usize) -> Result<u64> {
        if i == self.stages.len() {
            return Ok(self.ledger.head);
        }
        self.stage(i)?;
        Ok(self.ledger.stages[i])
    }

    /// Zeroes every bias. Used to check the rectifier path in isolation.
    pub fn with_zero_biases(mut self) -> Self {
        for st in &mut self.stages {
            st.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        self.head.bias.iter_mut().for_each(|b| *b = 0.0);
        self
    }

    fn stage(&self, i: usize) -> Result<&ConvStage> {
        self.stages.get(i).ok_or_else(|| {
            Error::Size(format!(
                "stage index {i} out of range for {} stages",
                self.stages.len()
            ))
        })
    }

    /// Runs stage `i` (0-based) on the previous feature map: 3×3
    /// convolution with edge-replicated borders, then a rectifier.
    pub fn forward_stage(&self, i: usize, prev: &Tensor) -> Result<Tensor> {
        let st = self.stage(i)?;
        let got = prev.chw().ok().filter(|_| prev.rank() == 3);
        if got != Some(st.input) {
            return Err(Error::Size(format!(
                "stage {i} expects input {:?}, got shape {:?}",
                st.input,
                prev.shape()
            )));
        }
        let (ic, ih, iw) = st.input;
        let (oc, oh, ow) = st.output;
        let stride = st.spec.stride;
        let src = prev.data();
        let mut out = vec![0.0f32; oc * oh * ow];
        let taps = ic * KERNEL * KERNEL;
        for o in 0..oc {
            let wo = &st.weights[o * taps..(o + 1) * taps];
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = st.bias[o] as f64;
                    for c in 0..ic {
                        let plane = &src[c * ih * iw..(c + 1) * ih * iw];
                        for ky in 0..KERNEL {
                            let sy = (y * stride + ky).saturating_sub(1).min(ih - 1);
                            for kx in 0..KERNEL {
                                let sx = (x * stride + kx).saturating_sub(1).min(iw - 1);
                                acc += wo[(c * KERNEL + ky) * KERNEL + kx] as f64
                                    * plane[sy * iw + sx] as f64;
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc.max(0.0) as f32;
                }
            }
        }
        Tensor::new(vec![oc, oh, ow], out)
    }

    /// Global average pool of the last stage followed by the linear head.
    pub fn head_logits(&self, last: &Tensor) -> Result<Vec<f32>> {
        let pooled = last.global_average_pool()?;
        if pooled.len() != self.head.in_features {
            return Err(Error::Size(format!(
                "head expects {} features, got {}",
                self.head.in_features,
                pooled.len()
            )));
        }
        let d = self.head.in_features;
        Ok((0..self.head.classes)
            .map(|k| {
                let row = &self.head.weights[k * d..(k + 1) * d];
                let acc: f64 = row
                    .iter()
                    .zip(&pooled)
                    .map(|(&w, &z)| w as f64 * z as f64)
                    .sum::<f64>()
                    + self.head.bias[k] as f64;
                acc as f32
            })
            .collect())
    }

    pub fn forward_full(&self, x: &Tensor) -> Result<FullForward> {
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for i in 0..self.stages.len() {
            cur = self.forward_stage(i, &cur)?;
            stages.push(cur.clone());
        }
        let logits = self.head_logits(&cur)?;
        Ok(FullForward { stages, logits })
    }

    /// Raw parameters of stage `i` as `(weights [out][in][3][3], bias)`.
    pub fn stage_parameters(&self, i: usize) -> Result<(&[f32], &[f32])> {
        let st = self.stage(i)?;
        Ok((&st.weights, &st.bias))
    }

    pub fn head_parameters(&self) -> (&[f32], &[f32]) {
        (&self.head.weights, &self.head.bias)
    }
}
