use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use cascade_gate::cascade::{CascadeOutcome, CascadePlan, GateConfig};
use cascade_gate::corruptions::{build_corrupted_corpus, default_corruptions, CorruptionSpec};
use cascade_gate::datagen::{default_generators, generate_corpus, CorpusSpec};
use cascade_gate::manifest::{
    is_feature_manifest, load_image_records, FeatureManifest, ImageEntry, Manifest,
};
use cascade_gate::metrics::{render_histogram, render_report};
use cascade_gate::pipeline::{
    build_plan, calibrate as fit_and_calibrate, load_artifacts, report_rows, run_images,
    run_manifest, save_artifacts, write_json, ImageSample, RunConfig,
};
use cascade_gate::tensor::write_tensor;
use cascade_gate::{Error, Result};

use crate::options::{CalibrateArgs, CorruptArgs, EvaluateArgs, GenArgs, ReportArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let registry = default_generators();
    if !registry.contains(&a.kind) {
        return Err(Error::Config(format!(
            "--kind: unknown corpus kind {:?}, expected one of {}",
            a.kind,
            registry.names().join(", ")
        )));
    }
    let spec = CorpusSpec::new(&a.kind, a.classes, a.n, a.extents, a.seed);
    spec.validate()?;
    let images = generate_corpus(&spec)?;
    create_dir(&a.out)?;
    let entries = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let id = format!("{}-{i:05}", a.kind);
            let path = format!("{id}.tzr");
            write_tensor(&img.image, a.out.join(&path))?;
            Ok(ImageEntry {
                sample_id: id,
                label: img.label,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = a.out.join(MANIFEST_FILE);
    Manifest::save(&entries, &manifest)?;
    write_json(&sidecar(&manifest), &json!({ "command": "gen", "corpus": spec }))?;
    log::info!("wrote {} images to {}", entries.len(), a.out.display());
    Ok(())
}

pub fn corrupt(a: CorruptArgs) -> Result<()> {
    let registry = default_corruptions();
    if let Some(f) = a.families.iter().find(|f| !registry.contains(f)) {
        return Err(Error::Config(format!(
            "--families: unknown corruption {f:?}, expected one of {}",
            registry.names().join(", ")
        )));
    }
    if let Some(s) = a.severities.iter().find(|s| !(1..=5).contains(*s)) {
        return Err(Error::Config(format!(
            "--severities: severity {s} is outside 1..=5"
        )));
    }
    let specs: Vec<CorruptionSpec> = a
        .families
        .iter()
        .flat_map(|f| a.severities.iter().map(|&s| CorruptionSpec::new(f, s, a.seed)))
        .collect();
    let images = load_image_records(&a.manifest)?;
    let entries = build_corrupted_corpus(&images, &specs, &a.out)?;
    write_json(
        &sidecar(&a.out.join(MANIFEST_FILE)),
        &json!({
            "command": "corrupt",
            "source": a.manifest.display().to_string(),
            "specs": specs,
        }),
    )?;
    log::info!("wrote {} corrupted images to {}", entries.len(), a.out.display());
    Ok(())
}

fn load_samples(manifest: &Path) -> Result<Vec<ImageSample>> {
    load_image_records(manifest)?
        .par_iter()
        .map(|r| {
            Ok(ImageSample {
                id: r.sample_id.clone(),
                image: r.load()?,
                label: r.label,
            })
        })
        .collect()
}

fn artifacts_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    flag.or_else(|| cfg.and_then(|c| c.paths.artifacts.clone()))
        .ok_or_else(|| {
            Error::Config("--artifacts: no artifact directory given and none in the config".into())
        })
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let dir = artifacts_dir(a.artifacts, Some(&cfg))?;
    let backbone = cfg.backbone()?;
    let samples = load_samples(&a.id)?;
    let (art, split) = fit_and_calibrate(&cfg, &backbone, &samples)?;
    save_artifacts(&dir, &cfg, &art, &split)?;
    for g in &art.gates {
        log::info!(
            "gate {} ({}): [{}, {}] measured retention {:.4}",
            g.stage,
            g.score_kind,
            g.lo,
            g.hi,
            g.calibration.measured_retention
        );
    }
    Ok(())
}

fn run_any(plan: &CascadePlan, gates: &[GateConfig], backbone: &cascade_gate::backbone::Backbone, manifest: &Path) -> Result<Vec<CascadeOutcome>> {
    if is_feature_manifest(manifest)? {
        run_manifest(plan, gates, &FeatureManifest::load(manifest)?)
    } else {
        run_images(plan, gates, backbone, &load_samples(manifest)?)
    }
}

/// Gate `g` scores of every sample that reached it.
fn gate_scores(outcomes: &[CascadeOutcome], g: usize) -> Vec<f64> {
    outcomes.iter().filter_map(|o| o.scores.get(g).copied()).collect()
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let given = a.config.as_ref().map(RunConfig::load).transpose()?;
    let dir = artifacts_dir(a.artifacts, given.as_ref())?;
    let (file, art) = load_artifacts(&dir)?;
    if let Some(mut cfg) = given {
        cfg.validate()?;
        cfg.paths = file.config.paths.clone();
        if cfg != file.config {
            return Err(Error::Config(format!(
                "--config differs from the configuration stored in {}",
                dir.display()
            )));
        }
    }
    let cfg = &file.config;
    let backbone = cfg.backbone()?;
    let plan = build_plan(cfg, &backbone, &art.ses, &art.bank)?;
    let id = run_any(&plan, &art.gates, &backbone, &a.id)?;
    let ood = a
        .ood
        .iter()
        .map(|(name, path)| Ok((name.clone(), run_any(&plan, &art.gates, &backbone, path)?)))
        .collect::<Result<Vec<_>>>()?;
    let kind = format!("cascade-{}", cfg.final_scorer);
    let rows = report_rows(&plan, &art.gates, &id, &ood, &kind)?;

    create_dir(&a.out)?;
    let report = render_report(&rows, plan.gate_count())?;
    let report_path = a.out.join(REPORT_FILE);
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;
    let mut hist_files = vec![];
    for g in 0..plan.gate_count() {
        let mut series = vec![("id".to_string(), gate_scores(&id, g))];
        series.extend(ood.iter().map(|(n, o)| (n.clone(), gate_scores(o, g))));
        let name = format!("hist_g{g}.csv");
        let path = a.out.join(&name);
        fs::write(&path, render_histogram(&series, a.bins)).map_err(|e| Error::io(&path, e))?;
        hist_files.push(name);
    }
    write_json(
        &sidecar(&report_path),
        &json!({
            "command": "evaluate",
            "config": cfg,
            "ses": file.ses,
            "split": file.split,
            "gates": file.gates,
            "id": a.id.display().to_string(),
            "ood": a.ood.iter().map(|(n, p)| json!([n, p.display().to_string()])).collect::<Vec<_>>(),
            "bins": a.bins,
            "histograms": hist_files,
            "rows": rows,
        }),
    )?;
    print!("{report}");
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut header: Option<String> = None;
    let mut out = String::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let h = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty report", path.display())))?;
        match &header {
            None => {
                header = Some(h.to_string());
                out.push_str(h);
                out.push('\n');
            }
            Some(prev) if prev != h => {
                return Err(Error::Data(format!(
                    "{}: header differs from the first report",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        for line in lines.filter(|l| !l.is_empty()) {
            out.push_str(line);
            out.push('\n');
        }
    }
    match a.out {
        Some(p) => fs::write(&p, out).map_err(|e| Error::io(&p, e)),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}
