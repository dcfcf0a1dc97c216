//! Gate scorers. Every scorer reads one tensor (a stage output or the
//! logits) and returns a scalar; the cascade only sees the trait.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::ses::{self, SesConfig};
use crate::she::{self, PrototypeBank};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Ses,
    She,
    FinalEnergy,
    FinalMsp,
}

impl ScoreKind {
    pub fn is_final(self) -> bool {
        matches!(self, ScoreKind::FinalEnergy | ScoreKind::FinalMsp)
    }

    /// Direction of a one-sided final score. Early scores are judged by
    /// distance to an interval instead.
    pub fn higher_is_id(self) -> bool {
        matches!(self, ScoreKind::FinalMsp)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Ses => "ses",
            ScoreKind::She => "she",
            ScoreKind::FinalEnergy => "final-energy",
            ScoreKind::FinalMsp => "final-msp",
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub trait GateScorer: Send + Sync {
    fn kind(&self) -> ScoreKind;

    fn score(&self, input: &Tensor) -> Result<f64>;

    /// FLOPs charged for scoring an input of the given shape.
    fn overhead_flops(&self, input_shape: &[usize]) -> u64;
}

pub struct SesScorer {
    pub config: SesConfig,
}

impl GateScorer for SesScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::Ses
    }

    fn score(&self, input: &Tensor) -> Result<f64> {
        ses::ses_score(input, &self.config)
    }

    fn overhead_flops(&self, input_shape: &[usize]) -> u64 {
        match *input_shape {
            [c, h, w] => ses::overhead_flops(c, h, w),
            [h, w] => ses::overhead_flops(1, h, w),
            _ => 0,
        }
    }
}

pub struct SheScorer {
    pub bank: Arc<PrototypeBank>,
    pub l2_normalize: bool,
}

impl GateScorer for SheScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::She
    }

    /// Feature maps are average-pooled first; rank-1 inputs are taken as
    /// already pooled.
    fn score(&self, input: &Tensor) -> Result<f64> {
        if input.rank() == 1 {
            she::she_energy(input.data(), &self.bank, self.l2_normalize)
        } else {
            let pooled = input.global_average_pool()?;
            she::she_energy(&pooled, &self.bank, self.l2_normalize)
        }
    }

    fn overhead_flops(&self, input_shape: &[usize]) -> u64 {
        let pool: u64 = if input_shape.len() > 1 {
            input_shape.iter().product::<usize>() as u64
        } else {
            0
        };
        pool + she::overhead_flops(self.bank.dim(), self.bank.classes())
    }
}

/// `-log sum_j exp(l_j)`, max-shifted. Lower means more in-distribution.
pub fn energy_score(logits: &[f32]) -> Result<f64> {
    check_logits(logits)?;
    Ok(she::neg_log_sum_exp(logits.iter().map(|&v| v as f64)))
}

/// Largest softmax probability.
pub fn msp_score(logits: &[f32]) -> Result<f64> {
    check_logits(logits)?;
    let max = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    Ok(1.0 / denom)
}

fn check_logits(logits: &[f32]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Size(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    Ok(())
}

fn logits_of(input: &Tensor) -> Result<&[f32]> {
    if input.rank() != 1 {
        return Err(Error::Size(format!(
            "final scorers expect a logit vector, got shape {:?}",
            input.shape()
        )));
    }
    Ok(input.data())
}

/// Max, shift, exponentiate, accumulate and one log per class.
fn final_overhead(input_shape: &[usize]) -> u64 {
    4 * input_shape.iter().product::<usize>() as u64
}

pub struct EnergyScorer;

impl GateScorer for EnergyScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::FinalEnergy
    }

    fn score(&self, input: &Tensor) -> Result<f64> {
        energy_score(logits_of(input)?)
    }

    fn overhead_flops(&self, input_shape: &[usize]) -> u64 {
        final_overhead(input_shape)
    }
}

pub struct MspScorer;

impl GateScorer for MspScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::FinalMsp
    }

    fn score(&self, input: &Tensor) -> Result<f64> {
        msp_score(logits_of(input)?)
    }

    fn overhead_flops(&self, input_shape: &[usize]) -> u64 {
        final_overhead(input_shape)
    }
}

/// Everything a scorer factory may need.
#[derive(Clone)]
pub struct ScorerParams {
    pub ses: SesConfig,
    pub bank: Option<Arc<PrototypeBank>>,
    pub l2_normalize: bool,
}

pub type ScorerFactory = dyn Fn(&ScorerParams) -> Result<Arc<dyn GateScorer>> + Send + Sync;

/// Scorers by config name: `ses`, `she`, `energy`, `msp`.
pub fn scorer_registry() -> Registry<ScorerFactory> {
    let mut r: Registry<ScorerFactory> = Registry::new("scorer");
    r.register(
        "ses",
        Box::new(|p: &ScorerParams| {
            Ok(Arc::new(SesScorer {
                config: p.ses.clone(),
            }) as Arc<dyn GateScorer>)
        }),
    );
    r.register(
        "she",
        Box::new(|p: &ScorerParams| {
            let bank = p
                .bank
                .clone()
                .ok_or_else(|| Error::Config("she scorer needs a prototype bank".into()))?;
            Ok(Arc::new(SheScorer {
                bank,
                l2_normalize: p.l2_normalize,
            }) as Arc<dyn GateScorer>)
        }),
    );
    r.register(
        "energy",
        Box::new(|_: &ScorerParams| Ok(Arc::new(EnergyScorer) as Arc<dyn GateScorer>)),
    );
    r.register(
        "msp",
        Box::new(|_: &ScorerParams| Ok(Arc::new(MspScorer) as Arc<dyn GateScorer>)),
    );
    r
}
