//! Conditional execution chain with calibrated rejection gates.
//!
//! Backbone stages run in order. After stage `i` a gate may score the
//! activations; a score outside the gate's closed interval stops the chain
//! and later stages are never computed. The last gate reads the logits.

mod calibrate;
mod scorers;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use calibrate::{
    calibrate_gates, one_sided_region, two_sided_interval, CalibrationBudget,
    DEFAULT_FINAL_TPR, DEFAULT_RETENTION, MIN_CALIBRATION_SAMPLES,
};
pub use scorers::{
    energy_score, msp_score, scorer_registry, EnergyScorer, GateScorer, MspScorer, ScoreKind,
    ScorerFactory, ScorerParams, SesScorer, SheScorer,
};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::manifest::FeatureEntry;
use crate::tensor::{read_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCalibration {
    pub quantile_levels: Vec<f64>,
    pub validation_size: usize,
    pub target_retention: f64,
    pub measured_retention: f64,
}

/// Acceptance region `[lo, hi]` of one gate. Bounds are stored in JSON as
/// decimal strings so that infinities survive as `"inf"` / `"-inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Position of the gate in the cascade.
    pub stage: usize,
    #[serde(with = "bound")]
    pub lo: f64,
    #[serde(with = "bound")]
    pub hi: f64,
    pub score_kind: ScoreKind,
    pub calibration: GateCalibration,
}

impl GateConfig {
    /// A gate that never rejects a finite score.
    pub fn open(stage: usize, score_kind: ScoreKind) -> Self {
        Self {
            stage,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            score_kind,
            calibration: GateCalibration {
                quantile_levels: vec![],
                validation_size: 0,
                target_retention: 1.0,
                measured_retention: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_nan() || self.hi.is_nan() || self.lo > self.hi {
            return Err(Error::Config(format!(
                "gate {}: bounds [{}, {}] are not an interval",
                self.stage, self.lo, self.hi
            )));
        }
        if let Some(q) = self
            .calibration
            .quantile_levels
            .iter()
            .find(|&&q| !(q > 0.0 && q < 1.0))
        {
            return Err(Error::Config(format!(
                "gate {}: quantile level {q} outside (0, 1)",
                self.stage
            )));
        }
        Ok(())
    }
}

mod bound {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        // Display prints the shortest round-tripping decimal, and "inf"/"-inf".
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        let v: f64 = s
            .parse()
            .map_err(|_| D::Error::custom(format!("invalid bound '{s}'")))?;
        if v.is_nan() {
            return Err(D::Error::custom("bound must not be NaN"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Pass,
    Reject,
}

/// Closed-interval membership; NaN never passes.
pub fn gate_decision(score: f64, gate: &GateConfig) -> GateDecision {
    if gate.lo <= score && score <= gate.hi {
        GateDecision::Pass
    } else {
        GateDecision::Reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStage {
    /// Rejected by the early gate at this cascade position.
    Gate(usize),
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    pub sample_id: String,
    pub verdict: Verdict,
    pub exit_stage: ExitStage,
    /// One score per visited gate.
    pub scores: Vec<f64>,
    pub flops: u64,
    pub label_pred: Option<usize>,
    /// Set when a gate produced a NaN score and rejected because of it.
    #[serde(default)]
    pub anomaly: bool,
}

impl CascadeOutcome {
    /// Cascade position of the gate that ended the run.
    pub fn exit_gate(&self) -> usize {
        self.scores.len() - 1
    }
}

/// Supplies per-stage activations on demand. Stages are requested in
/// increasing order and at most once each.
pub trait FeatureSource {
    fn sample_id(&self) -> &str;

    fn stage(&mut self, i: usize) -> Result<Tensor>;

    fn logits(&mut self) -> Result<Tensor>;
}

/// Runs the backbone lazily on one image.
pub struct ImageSource<'a> {
    id: String,
    backbone: &'a Backbone,
    current: Tensor,
    next_stage: usize,
}

impl<'a> ImageSource<'a> {
    pub fn new(id: impl Into<String>, backbone: &'a Backbone, image: Tensor) -> Self {
        Self {
            id: id.into(),
            backbone,
            current: image,
            next_stage: 0,
        }
    }

    fn advance_to(&mut self, i: usize) -> Result<()> {
        if i < self.next_stage {
            return Err(Error::Config(format!(
                "stage {i} requested after stage {} was computed",
                self.next_stage - 1
            )));
        }
        while self.next_stage <= i {
            self.current = self.backbone.forward_stage(self.next_stage, &self.current)?;
            self.next_stage += 1;
        }
        Ok(())
    }
}

impl FeatureSource for ImageSource<'_> {
    fn sample_id(&self) -> &str {
        &self.id
    }

    fn stage(&mut self, i: usize) -> Result<Tensor> {
        self.advance_to(i)?;
        Ok(self.current.clone())
    }

    fn logits(&mut self) -> Result<Tensor> {
        let last = self.backbone.stage_count() - 1;
        self.advance_to(last)?;
        Tensor::from_vec(self.backbone.head_logits(&self.current)?)
    }
}

/// Reads precomputed activations of one manifest entry, loading each file
/// only when its stage is reached.
pub struct ManifestSource {
    entry: FeatureEntry,
    base: PathBuf,
}

impl ManifestSource {
    pub fn new(entry: FeatureEntry, base: impl Into<PathBuf>) -> Self {
        Self {
            entry,
            base: base.into(),
        }
    }
}

impl FeatureSource for ManifestSource {
    fn sample_id(&self) -> &str {
        &self.entry.sample_id
    }

    fn stage(&mut self, i: usize) -> Result<Tensor> {
        let rel = self.entry.stage_paths.get(i).ok_or_else(|| {
            Error::Data(format!(
                "sample {} has {} stage files, stage {i} requested",
                self.entry.sample_id,
                self.entry.stage_paths.len()
            ))
        })?;
        read_tensor(self.base.join(rel))
    }

    fn logits(&mut self) -> Result<Tensor> {
        let rel = self.entry.logits_path.as_ref().ok_or_else(|| {
            Error::Data(format!("sample {} has no logits file", self.entry.sample_id))
        })?;
        read_tensor(self.base.join(rel))
    }
}

/// Where a gate reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Stage(usize),
    Logits,
}

pub struct GateSlot {
    pub tap: Tap,
    pub scorer: Arc<dyn GateScorer>,
}

/// The fixed structure of a cascade: stage costs and gate placement.
/// Thresholds live separately in [`GateConfig`]s.
pub struct CascadePlan {
    stage_flops: Vec<u64>,
    head_flops: u64,
    gates: Vec<GateSlot>,
    /// Input shape seen by each gate, for overhead accounting.
    gate_shapes: Vec<Vec<usize>>,
}

impl CascadePlan {
    /// `gate_shapes[g]` is the shape of the tensor gate `g` scores.
    pub fn new(
        stage_flops: Vec<u64>,
        head_flops: u64,
        gates: Vec<GateSlot>,
        gate_shapes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if gates.is_empty() || gate_shapes.len() != gates.len() {
            return Err(Error::Config(
                "a cascade needs at least one gate and one shape per gate".into(),
            ));
        }
        let last = gates.len() - 1;
        let mut prev: Option<usize> = None;
        for (g, slot) in gates.iter().enumerate() {
            match slot.tap {
                Tap::Stage(i) => {
                    if g == last {
                        return Err(Error::Config("the last gate must read the logits".into()));
                    }
                    if i >= stage_flops.len() || prev.is_some_and(|p| i <= p) {
                        return Err(Error::Config(format!(
                            "gate {g} taps stage {i}; taps must be increasing and below {}",
                            stage_flops.len()
                        )));
                    }
                    prev = Some(i);
                }
                Tap::Logits if g != last => {
                    return Err(Error::Config(format!(
                        "gate {g} reads the logits but is not the last gate"
                    )))
                }
                Tap::Logits => {}
            }
            let is_final = slot.scorer.kind().is_final();
            if is_final != (g == last) {
                return Err(Error::Config(format!(
                    "gate {g} uses scorer {} in the wrong position",
                    slot.scorer.kind()
                )));
            }
        }
        Ok(Self {
            stage_flops,
            head_flops,
            gates,
            gate_shapes,
        })
    }

    /// Standard layout on a backbone: one early gate after each listed
    /// stage, then a final gate on the logits.
    pub fn on_backbone(
        backbone: &Backbone,
        early: Vec<(usize, Arc<dyn GateScorer>)>,
        final_scorer: Arc<dyn GateScorer>,
    ) -> Result<Self> {
        let mut gates = Vec::with_capacity(early.len() + 1);
        let mut shapes = Vec::with_capacity(early.len() + 1);
        for (stage, scorer) in early {
            let (c, h, w) = backbone.stage_output_extents(stage)?;
            shapes.push(vec![c, h, w]);
            gates.push(GateSlot {
                tap: Tap::Stage(stage),
                scorer,
            });
        }
        shapes.push(vec![backbone.classes()]);
        gates.push(GateSlot {
            tap: Tap::Logits,
            scorer: final_scorer,
        });
        let ledger = backbone.ledger();
        Self::new(ledger.stages.clone(), ledger.head, gates, shapes)
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    pub fn gates(&self) -> &[GateSlot] {
        &self.gates
    }

    pub fn kinds(&self) -> Vec<ScoreKind> {
        self.gates.iter().map(|g| g.scorer.kind()).collect()
    }

    pub fn stage_count(&self) -> usize {
        self.stage_flops.len()
    }

    pub fn gate_overhead(&self, g: usize) -> u64 {
        self.gates[g].scorer.overhead_flops(&self.gate_shapes[g])
    }

    /// FLOPs of a run that stops right after gate `g`.
    pub fn cost_through_gate(&self, g: usize) -> u64 {
        let backbone: u64 = match self.gates[g].tap {
            Tap::Stage(i) => self.stage_flops[..=i].iter().sum(),
            Tap::Logits => self.stage_flops.iter().sum::<u64>() + self.head_flops,
        };
        backbone + (0..=g).map(|j| self.gate_overhead(j)).sum::<u64>()
    }

    /// Cost of a sample that reaches the end, gate overheads included.
    pub fn full_flops(&self) -> u64 {
        self.cost_through_gate(self.gates.len() - 1)
    }

    pub fn check_gates(&self, gates: &[GateConfig]) -> Result<()> {
        if gates.len() != self.gates.len() {
            return Err(Error::Config(format!(
                "{} gate configs for a cascade with {} gates",
                gates.len(),
                self.gates.len()
            )));
        }
        for (g, (cfg, slot)) in gates.iter().zip(&self.gates).enumerate() {
            cfg.validate()?;
            if cfg.stage != g || cfg.score_kind != slot.scorer.kind() {
                return Err(Error::Config(format!(
                    "gate config {} ({}) does not match cascade gate {g} ({})",
                    cfg.stage,
                    cfg.score_kind,
                    slot.scorer.kind()
                )));
            }
        }
        Ok(())
    }

    /// All-pass gates for this plan.
    pub fn open_gates(&self) -> Vec<GateConfig> {
        self.gates
            .iter()
            .enumerate()
            .map(|(g, s)| GateConfig::open(g, s.scorer.kind()))
            .collect()
    }
}

fn argmax(v: &[f32]) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f32)>, (i, &x)| match best {
            Some((_, b)) if b >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

/// Runs `source` through the cascade, stopping at the first rejection.
pub fn run_cascade(
    source: &mut dyn FeatureSource,
    plan: &CascadePlan,
    gates: &[GateConfig],
) -> Result<CascadeOutcome> {
    plan.check_gates(gates)?;
    let mut scores = Vec::with_capacity(gates.len());
    let mut anomaly = false;
    let last = gates.len() - 1;
    for (g, slot) in plan.gates.iter().enumerate() {
        let input = match slot.tap {
            Tap::Stage(i) => source.stage(i)?,
            Tap::Logits => source.logits()?,
        };
        let score = match slot.scorer.score(&input) {
            Ok(s) => s,
            // A direction-less feature has no hyperspherical score; treat it
            // like any other unscoreable input.
            Err(Error::Domain(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        scores.push(score);
        let decision = gate_decision(score, &gates[g]);
        if score.is_nan() {
            anomaly = true;
        }
        if decision == GateDecision::Reject || g == last {
            let label_pred = if g == last && decision == GateDecision::Pass {
                argmax(input.data())
            } else {
                None
            };
            return Ok(CascadeOutcome {
                sample_id: source.sample_id().to_string(),
                verdict: match decision {
                    GateDecision::Pass => Verdict::Accepted,
                    GateDecision::Reject => Verdict::Rejected,
                },
                exit_stage: if g == last {
                    ExitStage::Final
                } else {
                    ExitStage::Gate(g)
                },
                scores,
                flops: plan.cost_through_gate(g),
                label_pred,
                anomaly,
            });
        }
    }
    unreachable!("the last gate always returns")
}

/// Every gate score of a sample, computed without short-circuiting. Used for
/// calibration and for the post-hoc reference.
pub fn all_scores(source: &mut dyn FeatureSource, plan: &CascadePlan) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(plan.gate_count());
    for slot in &plan.gates {
        let input = match slot.tap {
            Tap::Stage(i) => source.stage(i)?,
            Tap::Logits => source.logits()?,
        };
        out.push(match slot.scorer.score(&input) {
            Ok(s) => s,
            Err(Error::Domain(_)) => f64::NAN,
            Err(e) => return Err(e),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub avg_flops: f64,
    pub full_flops: u64,
    /// Percentage; negative when gate overheads outweigh early exits.
    pub savings_pct: f64,
}

pub fn expected_flops(outcomes: &[CascadeOutcome], plan: &CascadePlan) -> Result<FlopsSummary> {
    if outcomes.is_empty() {
        return Err(Error::Data("no outcomes to average".into()));
    }
    let total: u128 = outcomes.iter().map(|o| o.flops as u128).sum();
    let avg_flops = total as f64 / outcomes.len() as f64;
    let full_flops = plan.full_flops();
    Ok(FlopsSummary {
        avg_flops,
        full_flops,
        savings_pct: 100.0 * (1.0 - avg_flops / full_flops as f64),
    })
}
