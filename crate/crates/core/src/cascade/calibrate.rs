//! Acceptance regions from held-out ID scores.
//!
//! Gates are fitted in cascade order, each on the samples that survived the
//! gates before it. Early gates keep a central interval holding a fraction
//! `r_i` of those samples; the final gate keeps the remaining
//! `final_tpr / prod(r_i)` on one side.

use serde::{Deserialize, Serialize};

use super::scorers::ScoreKind;
use super::{GateCalibration, GateConfig};
use crate::error::{Error, Result};

pub const MIN_CALIBRATION_SAMPLES: usize = 50;
pub const DEFAULT_RETENTION: f64 = 0.995;
pub const DEFAULT_FINAL_TPR: f64 = 0.95;

// Absorbs representation error in products like 100 * (1 - 0.98).
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBudget {
    /// ID retention target of each early gate, in cascade order.
    pub retention: Vec<f64>,
    pub final_tpr: f64,
}

impl Default for CalibrationBudget {
    fn default() -> Self {
        Self {
            retention: vec![DEFAULT_RETENTION; 2],
            final_tpr: DEFAULT_FINAL_TPR,
        }
    }
}

impl CalibrationBudget {
    pub fn validate(&self) -> Result<()> {
        for (i, &r) in self.retention.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!(
                    "retention target {r} for gate {i} outside (0, 1]"
                )));
            }
        }
        if !(self.final_tpr > 0.0 && self.final_tpr <= 1.0) {
            return Err(Error::Config(format!(
                "final TPR {} outside (0, 1]",
                self.final_tpr
            )));
        }
        let product: f64 = self.retention.iter().product();
        if product + COUNT_SLACK < self.final_tpr {
            return Err(Error::Config(format!(
                "infeasible budget: early retention product {product} is below final TPR {}",
                self.final_tpr
            )));
        }
        Ok(())
    }

    /// Share of final-gate arrivals the last gate must keep.
    pub fn residual(&self) -> f64 {
        let product: f64 = self.retention.iter().product();
        (self.final_tpr / product).min(1.0)
    }
}

/// Central interval of `sorted` keeping at least `retention` of it. Drops
/// `floor(n(1 - r))` order statistics, the lower tail getting the smaller
/// half.
pub fn two_sided_interval(sorted: &[f64], retention: f64) -> (f64, f64) {
    if retention >= 1.0 {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let n = sorted.len();
    let drop = ((n as f64 * (1.0 - retention)) + COUNT_SLACK).floor() as usize;
    let drop = drop.min(n - 1);
    let lower = drop / 2;
    let upper = drop - lower;
    (sorted[lower], sorted[n - 1 - upper])
}

/// One-sided bound keeping the best `ceil(n * keep)` scores. Returns the
/// region `[bound, inf)` when higher scores are more in-distribution and
/// `(-inf, bound]` otherwise.
pub fn one_sided_region(sorted: &[f64], keep: f64, higher_is_id: bool) -> (f64, f64) {
    if keep >= 1.0 {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let n = sorted.len();
    let k = ((n as f64 * keep) - COUNT_SLACK).ceil().max(1.0) as usize;
    let k = k.min(n);
    if higher_is_id {
        (sorted[n - k], f64::INFINITY)
    } else {
        (f64::NEG_INFINITY, sorted[k - 1])
    }
}

/// Fits one gate per entry of `kinds` from `scores[g][s]`, the score of
/// validation sample `s` at gate `g`. Every gate but the last must be an
/// early (interval) gate and the last must be a final scorer.
pub fn calibrate_gates(
    scores: &[Vec<f64>],
    kinds: &[ScoreKind],
    budget: &CalibrationBudget,
) -> Result<Vec<GateConfig>> {
    budget.validate()?;
    if kinds.is_empty() || scores.len() != kinds.len() {
        return Err(Error::Config(format!(
            "{} score lists for {} gates",
            scores.len(),
            kinds.len()
        )));
    }
    let early = kinds.len() - 1;
    if budget.retention.len() != early {
        return Err(Error::Config(format!(
            "budget lists {} early retention targets, cascade has {early} early gates",
            budget.retention.len()
        )));
    }
    if kinds[..early].iter().any(|k| k.is_final()) || !kinds[early].is_final() {
        return Err(Error::Config(format!(
            "gate kinds {kinds:?} must be early gates followed by one final scorer"
        )));
    }
    let n = scores[0].len();
    if scores.iter().any(|s| s.len() != n) {
        return Err(Error::Calibration(
            "score lists differ in length across gates".into(),
        ));
    }
    if let Some(g) = scores.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Calibration(format!(
            "non-finite calibration score at gate {g}"
        )));
    }

    let mut alive: Vec<usize> = (0..n).collect();
    let mut gates = Vec::with_capacity(kinds.len());
    for (g, &kind) in kinds.iter().enumerate() {
        if alive.len() < MIN_CALIBRATION_SAMPLES {
            return Err(Error::Calibration(format!(
                "gate {g} has {} calibration samples, need at least {MIN_CALIBRATION_SAMPLES}",
                alive.len()
            )));
        }
        let mut sorted: Vec<f64> = alive.iter().map(|&s| scores[g][s]).collect();
        sorted.sort_by(f64::total_cmp);
        let (target, (lo, hi), levels) = if g < early {
            let r = budget.retention[g];
            let tail = (1.0 - r) / 2.0;
            let levels = if r < 1.0 { vec![tail, 1.0 - tail] } else { vec![] };
            (r, two_sided_interval(&sorted, r), levels)
        } else {
            let keep = budget.residual();
            let level = if kind.higher_is_id() { 1.0 - keep } else { keep };
            let levels = if keep < 1.0 { vec![level] } else { vec![] };
            (keep, one_sided_region(&sorted, keep, kind.higher_is_id()), levels)
        };
        let validation_size = alive.len();
        alive.retain(|&s| lo <= scores[g][s] && scores[g][s] <= hi);
        gates.push(GateConfig {
            stage: g,
            lo,
            hi,
            score_kind: kind,
            calibration: GateCalibration {
                quantile_levels: levels,
                validation_size,
                target_retention: target,
                measured_retention: alive.len() as f64 / validation_size as f64,
            },
        });
    }
    Ok(gates)
}
