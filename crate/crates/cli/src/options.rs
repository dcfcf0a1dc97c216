use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use cascade_gate::pipeline::RunConfig;
use cascade_gate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cascade-gate", version, about = "Cascaded early-rejection OOD detection")]
pub struct Cli {
    /// Worker threads for per-sample parallelism. Results do not depend on it.
    #[arg(long, global = true, env = "CASCADE_GATE_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of TZR images plus a manifest.
    Gen(GenArgs),
    /// Apply sensor corruptions to every image of a manifest.
    Corrupt(CorruptArgs),
    /// Fit prototypes and calibrate gates on an ID manifest.
    Calibrate(CalibrateArgs),
    /// Run the calibrated cascade on ID and OOD manifests.
    Evaluate(EvaluateArgs),
    /// Merge report CSVs with identical headers.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// id_natural, ood_white_noise, ood_flat or ood_semantic_shift.
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long)]
    pub n: usize,
    /// Image extents as CxHxW.
    #[arg(long, default_value = "3x32x32", value_parser = parse_extents)]
    pub extents: (usize, usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Image manifest to corrupt.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "dead_pixels,striping,fog_low_exposure,transmission"
    )]
    pub families: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub severities: Vec<u8>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Labeled ID image manifest.
    #[arg(long)]
    pub id: PathBuf,
    /// Output directory; falls back to `paths.artifacts` of the config.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Must match the configuration embedded in the artifacts when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    /// ID manifest (images or per-stage features).
    #[arg(long)]
    pub id: PathBuf,
    /// OOD corpora as NAME=MANIFEST; repeatable.
    #[arg(long = "ood", value_parser = parse_named, required = true)]
    pub ood: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
    /// Bins of the per-gate score histograms.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report CSVs written by `evaluate`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// RunConfig fields as flags. Flags override the `--config` file.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// RunConfig JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub backbone_seed: Option<u64>,
    #[arg(long, value_parser = parse_extents)]
    pub extents: Option<(usize, usize, usize)>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Channels pooled by the structural sieve.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Pick sieve channels once from ID training statistics.
    #[arg(long)]
    pub global_omega: bool,
    /// replicate or periodic.
    #[arg(long)]
    pub padding: Option<String>,
    /// uniform or self-consistent.
    #[arg(long)]
    pub weighting: Option<String>,
    /// vmf or uniform.
    #[arg(long)]
    pub kappa_mode: Option<String>,
    /// Score raw projections instead of cosines.
    #[arg(long)]
    pub no_l2: bool,
    /// Early-gate retention targets, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub retention: Option<Vec<f64>>,
    #[arg(long)]
    pub final_tpr: Option<f64>,
    /// energy or msp.
    #[arg(long)]
    pub final_scorer: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

fn enum_flag<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("--{flag}: unknown value {value:?}")))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.backbone_seed {
            cfg.backbone.seed = v;
        }
        if let Some(v) = self.extents {
            cfg.backbone.extents = v;
        }
        if let Some(v) = self.classes {
            cfg.backbone.classes = v;
        }
        if let Some(v) = self.top_k {
            cfg.ses.top_k = Some(v);
        }
        if let Some(v) = self.epsilon {
            cfg.ses.epsilon = v;
        }
        if self.global_omega {
            cfg.ses.global_omega = true;
        }
        if let Some(v) = &self.padding {
            cfg.ses.padding = enum_flag("padding", v)?;
        }
        if let Some(v) = &self.weighting {
            cfg.she.weighting = enum_flag("weighting", v)?;
        }
        if let Some(v) = &self.kappa_mode {
            cfg.she.kappa_mode = enum_flag("kappa-mode", v)?;
        }
        if self.no_l2 {
            cfg.she.l2_normalize = false;
        }
        if let Some(v) = &self.retention {
            cfg.budget.retention = v.clone();
        }
        if let Some(v) = self.final_tpr {
            cfg.budget.final_tpr = v;
        }
        if let Some(v) = &self.final_scorer {
            cfg.final_scorer = v.clone();
        }
        if let Some(v) = self.split_seed {
            cfg.split_seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_extents(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("expected CxHxW, got {s:?}: {e}"))?;
    match nums[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(format!("expected CxHxW, got {s:?}")),
    }
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=MANIFEST, got {s:?}")),
    }
}
