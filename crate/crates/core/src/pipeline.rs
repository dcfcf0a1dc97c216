//! End-to-end wiring: configuration, calibration artifacts and evaluation.
//!
//! The default cascade places the structural sieve after stage 0, the
//! hyperspherical gate after stage 1 and the configured final scorer on the
//! logits.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_backbone, Backbone, Extents};
use crate::cascade::{
    all_scores, calibrate_gates, expected_flops, run_cascade, scorer_registry, CalibrationBudget,
    CascadeOutcome, CascadePlan, GateConfig, ImageSource, ManifestSource, ScorerParams, Verdict,
};
use crate::datagen::LabeledImage;
use crate::error::{Error, Result};
use crate::manifest::FeatureManifest;
use crate::metrics::{
    auroc, cascade_roc_score, exit_histogram, fpr_at_tpr, ReportRow, ScoreSet,
};
use crate::ses::{self, PaddingMode, SesConfig};
use crate::she::{KappaMode, PrototypeBank, Weighting};
use crate::tensor::Tensor;

pub const SES_STAGE: usize = 0;
pub const SHE_STAGE: usize = 1;
pub const GATES_FILE: &str = "gates.json";
pub const BANK_STEM: &str = "she";
/// Share of the ID corpus held out for gate calibration.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub seed: u64,
    pub extents: Extents,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: (3, 32, 32),
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SesSettings {
    /// `None` picks `max(1, ceil(0.1 C))`.
    pub top_k: Option<usize>,
    pub epsilon: f64,
    /// Use one channel set chosen from ID training statistics instead of
    /// the per-sample top-K.
    pub global_omega: bool,
    pub padding: PaddingMode,
}

impl Default for SesSettings {
    fn default() -> Self {
        Self {
            top_k: None,
            epsilon: ses::DEFAULT_EPSILON,
            global_omega: false,
            padding: PaddingMode::Replicate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SheSettings {
    pub weighting: Weighting,
    pub kappa_mode: KappaMode,
    pub l2_normalize: bool,
}

impl Default for SheSettings {
    fn default() -> Self {
        Self {
            weighting: Weighting::Uniform,
            kappa_mode: KappaMode::Vmf,
            l2_normalize: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Default artifact directory for `calibrate` and `evaluate`.
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub ses: SesSettings,
    pub she: SheSettings,
    pub budget: CalibrationBudget,
    /// Registry name of the last-stage scorer: `energy` or `msp`.
    pub final_scorer: String,
    /// Seed of the ID train/validation shuffle.
    pub split_seed: u64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            ses: SesSettings::default(),
            she: SheSettings::default(),
            budget: CalibrationBudget::default(),
            final_scorer: "energy".into(),
            split_seed: 0,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        // Unknown fields and type mismatches are configuration mistakes.
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.backbone.extents;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "backbone extents {:?} contain a zero",
                self.backbone.extents
            )));
        }
        if self.backbone.classes < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 classes, got {}",
                self.backbone.classes
            )));
        }
        self.budget.validate()?;
        if self.budget.retention.len() != 2 {
            return Err(Error::Config(format!(
                "budget needs 2 early retention targets (ses, she), got {}",
                self.budget.retention.len()
            )));
        }
        if !matches!(self.final_scorer.as_str(), "energy" | "msp") {
            return Err(Error::Config(format!(
                "final_scorer must be energy or msp, got {}",
                self.final_scorer
            )));
        }
        let channels = crate::backbone::DEFAULT_CHANNELS[SES_STAGE];
        self.ses_config(channels).validate(channels)?;
        Ok(())
    }

    /// Sieve configuration for a stage with `channels` channels, before any
    /// global channel selection.
    pub fn ses_config(&self, channels: usize) -> SesConfig {
        SesConfig {
            top_k: self.ses.top_k.unwrap_or_else(|| ses::default_top_k(channels)),
            epsilon: self.ses.epsilon,
            global_channels: None,
            padding: self.ses.padding,
        }
    }

    pub fn backbone(&self) -> Result<Backbone> {
        init_backbone(self.backbone.seed, self.backbone.classes, self.backbone.extents)
    }
}

/// One input image with its id and label (`-1` when unlabeled).
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: Tensor,
    pub label: i64,
}

impl ImageSample {
    /// Names generated images `{prefix}-{index}`.
    pub fn from_corpus(prefix: &str, images: Vec<LabeledImage>) -> Vec<Self> {
        images
            .into_iter()
            .enumerate()
            .map(|(i, li)| Self {
                id: format!("{prefix}-{i}"),
                image: li.image,
                label: li.label,
            })
            .collect()
    }
}

/// Fitted state shared by `calibrate` and `evaluate`.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub ses: SesConfig,
    pub bank: PrototypeBank,
    pub gates: Vec<GateConfig>,
}

/// Contents of `gates.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFile {
    pub config: RunConfig,
    pub ses: SesConfig,
    pub split: SplitSummary,
    pub gates: Vec<GateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seed: u64,
    pub train: usize,
    pub validation: usize,
}

/// Seeded shuffle of `0..n` into (train, validation), each sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n.saturating_sub(1));
    let mut validation = idx[..val].to_vec();
    let mut train = idx[val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    (train, validation)
}

/// Builds the standard three-gate plan.
pub fn build_plan(cfg: &RunConfig, backbone: &Backbone, ses: &SesConfig, bank: &PrototypeBank) -> Result<CascadePlan> {
    let reg = scorer_registry();
    let params = ScorerParams {
        ses: ses.clone(),
        bank: Some(Arc::new(bank.clone())),
        l2_normalize: cfg.she.l2_normalize,
    };
    let ses_scorer = reg.get("ses")?(&params)?;
    let she_scorer = reg.get("she")?(&params)?;
    let final_scorer = reg.get(&cfg.final_scorer)?(&params)?;
    CascadePlan::on_backbone(
        backbone,
        vec![(SES_STAGE, ses_scorer), (SHE_STAGE, she_scorer)],
        final_scorer,
    )
}

struct TrainFeatures {
    ses_energies: Vec<Vec<f64>>,
    pooled: Vec<Vec<f32>>,
}

fn train_features(backbone: &Backbone, ses: &SesConfig, samples: &[&ImageSample]) -> Result<TrainFeatures> {
    let rows: Vec<(Vec<f64>, Vec<f32>)> = samples
        .par_iter()
        .map(|s| {
            let z0 = backbone.forward_stage(SES_STAGE, &s.image)?;
            let e = ses::ses_energies(&z0, ses)?;
            let z1 = backbone.forward_stage(SHE_STAGE, &z0)?;
            Ok((e, z1.global_average_pool()?))
        })
        .collect::<Result<_>>()?;
    let (ses_energies, pooled) = rows.into_iter().unzip();
    Ok(TrainFeatures {
        ses_energies,
        pooled,
    })
}

/// Channels with the largest mean energy over the training split.
fn global_channels(energies: &[Vec<f64>], k: usize) -> Vec<usize> {
    let c = energies[0].len();
    let mut mean = vec![0.0f64; c];
    for e in energies {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    ses::top_k_channels(&mean, k)
}

/// Splits the ID corpus, fits prototypes (and optionally the global sieve
/// channels) on the training part and calibrates every gate on the held-out
/// part.
pub fn calibrate(cfg: &RunConfig, backbone: &Backbone, samples: &[ImageSample]) -> Result<(Artifacts, SplitSummary)> {
    cfg.validate()?;
    let classes = cfg.backbone.classes;
    if let Some(s) = samples
        .iter()
        .find(|s| s.label < 0 || s.label as usize >= classes)
    {
        return Err(Error::Data(format!(
            "sample {} has label {}, expected 0..{classes}",
            s.id, s.label
        )));
    }
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.split_seed);
    let train: Vec<&ImageSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let channels = backbone.stage_output_extents(SES_STAGE)?.0;
    let mut ses_cfg = cfg.ses_config(channels);
    ses_cfg.validate(channels)?;

    let feats = train_features(backbone, &ses_cfg, &train)?;
    if cfg.ses.global_omega {
        ses_cfg.global_channels = Some(global_channels(&feats.ses_energies, ses_cfg.top_k));
    }
    let mut per_class: Vec<Vec<Vec<f32>>> = vec![Vec::new(); classes];
    for (s, z) in train.iter().zip(feats.pooled) {
        per_class[s.label as usize].push(z);
    }
    if let Some(k) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::Fit(format!(
            "class {k} is absent from the training split"
        )));
    }
    let bank = PrototypeBank::fit(&per_class, cfg.she.weighting, cfg.she.kappa_mode)?;

    let plan = build_plan(cfg, backbone, &ses_cfg, &bank)?;
    let val_scores: Vec<Vec<f64>> = val_idx
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            all_scores(&mut ImageSource::new(&s.id, backbone, s.image.clone()), &plan)
        })
        .collect::<Result<_>>()?;
    let per_gate: Vec<Vec<f64>> = (0..plan.gate_count())
        .map(|g| val_scores.iter().map(|row| row[g]).collect())
        .collect();
    let gates = calibrate_gates(&per_gate, &plan.kinds(), &cfg.budget)?;
    let split = SplitSummary {
        seed: cfg.split_seed,
        train: train_idx.len(),
        validation: val_idx.len(),
    };
    Ok((
        Artifacts {
            ses: ses_cfg,
            bank,
            gates,
        },
        split,
    ))
}

pub fn save_artifacts(dir: &Path, cfg: &RunConfig, art: &Artifacts, split: &SplitSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    art.bank.save(dir, BANK_STEM)?;
    let file = GateFile {
        config: cfg.clone(),
        ses: art.ses.clone(),
        split: split.clone(),
        gates: art.gates.clone(),
    };
    write_json(&dir.join(GATES_FILE), &file)
}

pub fn load_artifacts(dir: &Path) -> Result<(GateFile, Artifacts)> {
    let path = dir.join(GATES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: GateFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let bank = PrototypeBank::load(dir, BANK_STEM)?;
    let art = Artifacts {
        ses: file.ses.clone(),
        bank,
        gates: file.gates.clone(),
    };
    Ok((file, art))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run_images(
    plan: &CascadePlan,
    gates: &[GateConfig],
    backbone: &Backbone,
    samples: &[ImageSample],
) -> Result<Vec<CascadeOutcome>> {
    plan.check_gates(gates)?;
    samples
        .par_iter()
        .map(|s| run_cascade(&mut ImageSource::new(&s.id, backbone, s.image.clone()), plan, gates))
        .collect()
}

/// Runs precomputed features. The manifest must have one stage file per
/// backbone stage so that FLOPs follow the backbone ledger.
pub fn run_manifest(
    plan: &CascadePlan,
    gates: &[GateConfig],
    manifest: &FeatureManifest,
) -> Result<Vec<CascadeOutcome>> {
    plan.check_gates(gates)?;
    let stages = manifest.validate()?;
    if stages != plan.stage_count() {
        return Err(Error::Data(format!(
            "manifest has {stages} stages, the cascade expects {}",
            plan.stage_count()
        )));
    }
    manifest
        .entries
        .par_iter()
        .map(|e| run_cascade(&mut ManifestSource::new(e.clone(), &manifest.base), plan, gates))
        .collect()
}

pub fn id_acceptance(outcomes: &[CascadeOutcome]) -> f64 {
    let accepted = outcomes
        .iter()
        .filter(|o| o.verdict == Verdict::Accepted)
        .count();
    accepted as f64 / outcomes.len().max(1) as f64
}

/// One report row per OOD corpus, scored with [`cascade_roc_score`].
pub fn report_rows(
    plan: &CascadePlan,
    gates: &[GateConfig],
    id: &[CascadeOutcome],
    ood: &[(String, Vec<CascadeOutcome>)],
    score_kind: &str,
) -> Result<Vec<ReportRow>> {
    let id_scores: Vec<f64> = id.iter().map(|o| cascade_roc_score(o, gates)).collect();
    let acceptance = id_acceptance(id);
    ood.iter()
        .map(|(name, outs)| {
            let ood_scores: Vec<f64> = outs.iter().map(|o| cascade_roc_score(o, gates)).collect();
            let set = ScoreSet::new(id_scores.clone(), ood_scores)?;
            let mixed: Vec<CascadeOutcome> = id.iter().chain(outs).cloned().collect();
            let flops = expected_flops(&mixed, plan)?;
            let hist = exit_histogram(outs, plan.gate_count())?;
            Ok(ReportRow {
                dataset: name.clone(),
                score_kind: score_kind.to_string(),
                n_id: id.len(),
                n_ood: outs.len(),
                auroc: auroc(&set),
                fpr95: fpr_at_tpr(&set, 0.95)?,
                id_acceptance: acceptance,
                avg_flops: flops.avg_flops,
                full_flops: flops.full_flops,
                savings_pct: flops.savings_pct,
                exit_fractions: hist.fractions(),
            })
        })
        .collect()
}
