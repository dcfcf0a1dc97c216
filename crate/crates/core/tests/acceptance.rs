//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cascade_gate::backbone::Backbone;
use cascade_gate::cascade::{
    gate_decision, run_cascade, CascadeOutcome, CascadePlan, ExitStage, GateConfig, GateDecision,
    ImageSource, Tap, Verdict,
};
use cascade_gate::corruptions::{apply_corruption, CorruptionSpec, DEAD_PIXELS, STRIPING};
use cascade_gate::datagen::{
    generate_corpus, CorpusSpec, ID_NATURAL, OOD_FLAT, OOD_SEMANTIC_SHIFT, OOD_WHITE_NOISE,
};
use cascade_gate::metrics::{
    auroc, cascade_roc_score, exit_fraction_at, fpr_at_tpr, Orientation, ScoreSet,
};
use cascade_gate::pipeline::{build_plan, calibrate, id_acceptance, run_images, ImageSample, RunConfig};
use cascade_gate::ses::{frequency_weighting_ratio, ses_score};
use cascade_gate::she::{magnitude_energy, she_energy, BankProvenance, KappaMode, PrototypeBank, Weighting};
use cascade_gate::Tensor;

const CLASSES: usize = 4;
const EXTENTS: (usize, usize, usize) = (3, 32, 32);

/// Corpus seeds are spaced far apart because sample `i` of a corpus is
/// seeded with `seed ^ i`.
fn corpus_seed(k: u64) -> u64 {
    k << 32
}

fn corpus(kind: &str, n: usize, k: u64, prefix: &str) -> Vec<ImageSample> {
    let spec = CorpusSpec::new(kind, CLASSES, n, EXTENTS, corpus_seed(k));
    ImageSample::from_corpus(prefix, generate_corpus(&spec).expect("corpus"))
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

struct Fitted {
    cfg: RunConfig,
    backbone: Backbone,
    plan: CascadePlan,
    gates: Vec<GateConfig>,
    fit_time: Duration,
}

fn fit(threads: usize) -> Fitted {
    let cfg = RunConfig::default();
    let backbone = cfg.backbone().expect("backbone");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let t0 = Instant::now();
    let (art, _) = pool
        .install(|| calibrate(&cfg, &backbone, &corpus(ID_NATURAL, 5000, 1, "cal")))
        .expect("calibrate");
    let fit_time = t0.elapsed();
    let plan = build_plan(&cfg, &backbone, &art.ses, &art.bank).expect("plan");
    Fitted {
        cfg,
        backbone,
        plan,
        gates: art.gates,
        fit_time,
    }
}

fn spectral_identity(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let data: Vec<f32> = (0..256).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let ch = Tensor::new(vec![1, 16, 16], data).unwrap();
        let ratio = frequency_weighting_ratio(&ch).unwrap();
        worst = worst.max((ratio - 1.0).abs());
    }
    let dt = t0.elapsed();
    r.line(
        "spectral identity",
        worst <= 1e-3 && dt < Duration::from_secs(5),
        format!("max |ratio - 1| = {worst:.3e} over 50 channels in {dt:.2?}"),
    );
}

fn random_bank(rng: &mut ChaCha8Rng, classes: usize, d: usize, kappa: f32) -> PrototypeBank {
    let protos = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect();
    let prov = BankProvenance {
        class_counts: vec![1; classes],
        weighting: Weighting::Uniform,
        kappa_mode: KappaMode::Uniform,
        warnings: vec![],
    };
    PrototypeBank::from_parts(protos, vec![kappa; classes], prov).unwrap()
}

fn she_scale_invariance(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let kappa = rng.random_range(1.0..50.0);
        let bank = random_bank(&mut rng, 10, 64, kappa);
        let z: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let alpha = 10f64.powf(rng.random_range(-3.0..=3.0));
        let zs: Vec<f64> = z.iter().map(|v| v * alpha).collect();
        let d = she_energy(&zs, &bank, true).unwrap() - she_energy(&z, &bank, true).unwrap();
        worst = worst.max(d.abs());
    }
    r.line(
        "she scale invariance",
        worst <= 1e-5,
        format!("max |E(az) - E(z)| = {worst:.3e} over 1000 pairs"),
    );
}

fn magnitude_paradox(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let d = 64;
    let bank = random_bank(&mut rng, CLASSES, d, 20.0);
    let mut flipped = 0;
    for i in 0..100 {
        // Large isotropic noise against a small vector near a prototype.
        let noise: Vec<f64> = (0..d).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mu = bank.prototype(i % CLASSES);
        let aligned: Vec<f64> = mu
            .iter()
            .map(|&m| 0.5 * (m as f64 + 0.02 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mag_noise = magnitude_energy(&noise, 1.0, CLASSES).unwrap();
        let mag_aligned = magnitude_energy(&aligned, 1.0, CLASSES).unwrap();
        let she_noise = she_energy(&noise, &bank, true).unwrap();
        let she_aligned = she_energy(&aligned, &bank, true).unwrap();
        if (mag_noise < mag_aligned) && (she_noise > she_aligned) {
            flipped += 1;
        }
    }
    r.line(
        "magnitude paradox",
        flipped >= 95,
        format!("{flipped}/100 pairs ordered oppositely"),
    );
}

fn calibration_soundness(r: &mut Report, f: &Fitted) {
    let fresh = corpus(ID_NATURAL, 10_000, 6, "fresh");
    let outs = run_images(&f.plan, &f.gates, &f.backbone, &fresh).unwrap();
    let acc = id_acceptance(&outs);
    r.line(
        "calibration soundness",
        (0.93..=0.97).contains(&acc),
        format!("ID acceptance {acc:.4} on 10000 fresh samples (target 0.95)"),
    );
}

fn detection(r: &mut Report) -> (Fitted, Vec<CascadeOutcome>, Vec<CascadeOutcome>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let f = fit(1);
    let t0 = Instant::now();
    let id_out = pool
        .install(|| run_images(&f.plan, &f.gates, &f.backbone, &corpus(ID_NATURAL, 2000, 2, "id")))
        .unwrap();
    let id_scores: Vec<f64> = id_out.iter().map(|o| cascade_roc_score(o, &f.gates)).collect();
    let mut ok = true;
    let mut parts = vec![];
    let mut white = vec![];
    for (k, kind, floor) in [
        (3, OOD_WHITE_NOISE, 0.95),
        (4, OOD_FLAT, 0.95),
        (5, OOD_SEMANTIC_SHIFT, 0.70),
    ] {
        let outs = pool
            .install(|| run_images(&f.plan, &f.gates, &f.backbone, &corpus(kind, 1000, k, kind)))
            .unwrap();
        let scores: Vec<f64> = outs.iter().map(|o| cascade_roc_score(o, &f.gates)).collect();
        let a = auroc(&ScoreSet::new(id_scores.clone(), scores).unwrap());
        ok &= a >= floor;
        parts.push(format!("{kind} auroc {a:.4} (>= {floor})"));
        if kind == OOD_WHITE_NOISE {
            white = outs;
        }
    }
    let exit0 = exit_fraction_at(&white, 0);
    ok &= exit0 >= 0.60;
    parts.push(format!("white-noise first-exit fraction {exit0:.4} (>= 0.60)"));
    // Calibration (including its corpus) plus evaluation, all on one thread.
    let dt = f.fit_time + t0.elapsed();
    ok &= dt < Duration::from_secs(120);
    parts.push(format!("single-threaded {dt:.1?}"));
    r.line("desk-scale detection", ok, parts.join("; "));
    (f, id_out, white)
}

/// Diagnostic only: each gate's score alone as an ID/OOD separator.
fn standalone_diagnostics(f: &Fitted) {
    let id = corpus(ID_NATURAL, 500, 7, "diag-id");
    let all = |s: &[ImageSample]| -> Vec<Vec<f64>> {
        s.iter()
            .map(|x| {
                cascade_gate::cascade::all_scores(
                    &mut ImageSource::new(&x.id, &f.backbone, x.image.clone()),
                    &f.plan,
                )
                .unwrap()
            })
            .collect()
    };
    let id_s = all(&id);
    for (k, kind) in [(8, OOD_WHITE_NOISE), (9, OOD_FLAT), (10, OOD_SEMANTIC_SHIFT)] {
        let ood_s = all(&corpus(kind, 500, k, kind));
        let mut line = format!("  info {kind}:");
        for (g, name) in ["ses", "she", &f.cfg.final_scorer].iter().enumerate() {
            let a: Vec<f64> = id_s.iter().map(|v| v[g]).collect();
            let b: Vec<f64> = ood_s.iter().map(|v| v[g]).collect();
            // Lower energy is more ID for every scorer except msp.
            let o = if *name == "msp" { Orientation::HigherIsId } else { Orientation::LowerIsId };
            let set = ScoreSet::oriented(&a, &b, o).unwrap();
            line.push_str(&format!(" {name} auroc {:.4}", auroc(&set)));
        }
        println!("{line}");
    }
}

fn flops_accounting(r: &mut Report, f: &Fitted, id: &[CascadeOutcome], white: &[CascadeOutcome]) {
    // Independent ledger for the default backbone on 3×32×32 inputs with 4
    // classes: conv stages 2·K²·Cin·Cout·H'·W', SES 20·C·H·W + 2C on
    // 16×16×16, SHE GAP over 32×8×8 plus 2d + 2dC + 3C with d = 32, 4C for
    // the final energy, and a 2·64·C head.
    let stage = [2 * 9 * 3 * 16 * 16 * 16u64, 2 * 9 * 16 * 32 * 8 * 8, 2 * 9 * 32 * 64 * 4 * 4];
    let ses = 20 * 16 * 16 * 16 + 2 * 16u64;
    let she = 32 * 8 * 8 + 2 * 32 + 2 * 32 * 4 + 3 * 4u64;
    let fin = 4 * 4u64;
    let head = 2 * 64 * 4u64;
    let cost = |o: &CascadeOutcome| match o.exit_stage {
        ExitStage::Gate(0) => stage[0] + ses,
        ExitStage::Gate(1) => stage[0] + stage[1] + ses + she,
        ExitStage::Gate(_) => unreachable!("two early gates"),
        ExitStage::Final => stage.iter().sum::<u64>() + head + ses + she + fin,
    };
    let mixed: Vec<CascadeOutcome> = id.iter().chain(white).cloned().collect();
    let oracle_total: u64 = mixed.iter().map(cost).sum();
    let summary = cascade_gate::cascade::expected_flops(&mixed, &f.plan).unwrap();
    let full = stage.iter().sum::<u64>() + head + ses + she + fin;
    let exact = summary.avg_flops == oracle_total as f64 / mixed.len() as f64
        && summary.full_flops == full
        && mixed.iter().all(|o| o.flops == cost(o));
    let exit0 = exit_fraction_at(white, 0);
    let band = (15.0..=35.0).contains(&summary.savings_pct);
    r.line(
        "flops accounting",
        exact && band && exit0 >= 0.60,
        format!(
            "exact={exact}; savings {:.2}% on {} ID + {} white-noise (OOD first-exit {exit0:.3})",
            summary.savings_pct,
            id.len(),
            white.len()
        ),
    );
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += match a.partial_cmp(&b).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn metrics_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for trial in 0..200 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        // Coarse values on some trials to force ties.
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if trial % 2 == 0 {
                rng.random_range(0..20) as f64
            } else {
                rng.sample(StandardNormal)
            }
        };
        let id: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..m).map(|_| draw(&mut rng) - 0.5).collect();
        let fast = auroc(&ScoreSet::new(id.clone(), ood.clone()).unwrap());
        if fast != pairwise_auroc(&id, &ood) {
            mismatches += 1;
        }
    }
    let same: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let fpr = fpr_at_tpr(&ScoreSet::new(same.clone(), same).unwrap(), 0.95).unwrap();
    r.line(
        "metrics oracle",
        mismatches == 0 && (fpr - 0.95).abs() <= 0.01,
        format!("{mismatches}/200 auroc mismatches vs pairwise; self fpr95 {fpr:.4}"),
    );
}

fn corruption_ordering(r: &mut Report, f: &Fitted) {
    let natural = corpus(ID_NATURAL, 200, 11, "nat");
    let ses_cfg = match &f.plan.gates()[0].scorer.kind() {
        cascade_gate::cascade::ScoreKind::Ses => {
            cascade_gate::ses::SesConfig::for_channels(f.backbone.stage_output_extents(0).unwrap().0)
        }
        k => panic!("gate 0 is {k}"),
    };
    let mut ok = true;
    let mut parts = vec![];
    for family in [DEAD_PIXELS, STRIPING] {
        let means: Vec<f64> = (1..=5u8)
            .map(|sev| {
                let total: f64 = natural
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let spec = CorruptionSpec::new(family, sev, i as u64);
                        let img = apply_corruption(&s.image, &spec).unwrap();
                        let z0 = f.backbone.forward_stage(0, &img).unwrap();
                        ses_score(&z0, &ses_cfg).unwrap()
                    })
                    .sum();
                total / natural.len() as f64
            })
            .collect();
        let strict = means.windows(2).all(|w| w[1] > w[0]);
        ok &= strict;
        let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
        parts.push(format!("{family} [{}]", shown.join(", ")));
    }
    r.line("corruption ordering", ok, parts.join("; "));
}

fn chain_vs_monolith(r: &mut Report, f: &Fitted) {
    let mut samples = corpus(ID_NATURAL, 200, 12, "mono-id");
    samples.extend(corpus(OOD_WHITE_NOISE, 100, 13, "mono-wn"));
    samples.extend(corpus(OOD_FLAT, 100, 14, "mono-flat"));
    samples.extend(corpus(OOD_SEMANTIC_SHIFT, 100, 15, "mono-shift"));
    let mut mismatches = 0;
    for s in &samples {
        let chain = run_cascade(
            &mut ImageSource::new(&s.id, &f.backbone, s.image.clone()),
            &f.plan,
            &f.gates,
        )
        .unwrap();
        let full = f.backbone.forward_full(&s.image).unwrap();
        let logits = Tensor::from_vec(full.logits.clone()).unwrap();
        let mut verdict = Verdict::Accepted;
        let mut exit = ExitStage::Final;
        let mut scores = vec![];
        let last = f.plan.gate_count() - 1;
        for (g, slot) in f.plan.gates().iter().enumerate() {
            let input = match slot.tap {
                Tap::Stage(i) => &full.stages[i],
                Tap::Logits => &logits,
            };
            let score = slot.scorer.score(input).unwrap_or(f64::NAN);
            scores.push(score);
            if gate_decision(score, &f.gates[g]) == GateDecision::Reject {
                verdict = Verdict::Rejected;
                if g != last {
                    exit = ExitStage::Gate(g);
                }
                break;
            }
        }
        let same_scores = chain.scores.len() == scores.len()
            && chain.scores.iter().zip(&scores).all(|(a, b)| a.to_bits() == b.to_bits());
        if chain.verdict != verdict || chain.exit_stage != exit || !same_scores {
            mismatches += 1;
        }
    }
    r.line(
        "chain vs monolith",
        mismatches == 0,
        format!("{mismatches}/{} samples differ", samples.len()),
    );
}

fn main() {
    let mut r = Report { failures: 0 };
    spectral_identity(&mut r);
    she_scale_invariance(&mut r);
    magnitude_paradox(&mut r);
    metrics_oracle(&mut r);
    let (f, id_out, white) = detection(&mut r);
    calibration_soundness(&mut r, &f);
    flops_accounting(&mut r, &f, &id_out, &white);
    corruption_ordering(&mut r, &f);
    chain_vs_monolith(&mut r, &f);
    standalone_diagnostics(&f);
    println!("{} criteria failed", r.failures);
    if r.failures > 0 {
        std::process::exit(1);
    }
}
