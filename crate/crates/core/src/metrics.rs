//! Detection metrics, exit distributions and CSV reports.
//!
//! Scores handed to [`auroc`] and [`fpr_at_tpr`] follow one convention:
//! higher means more in-distribution.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeOutcome, ExitStage, GateConfig, Verdict};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsId,
    LowerIsId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    id_scores: Vec<f64>,
    ood_scores: Vec<f64>,
}

impl ScoreSet {
    /// Scores already oriented so that higher means more in-distribution.
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::Data(format!(
                "score set needs both sides, got {} ID and {} OOD",
                id_scores.len(),
                ood_scores.len()
            )));
        }
        if id_scores.iter().chain(&ood_scores).any(|v| !v.is_finite()) {
            return Err(Error::Data("score set contains non-finite values".into()));
        }
        Ok(Self {
            id_scores,
            ood_scores,
        })
    }

    /// Applies `orientation` to raw scores.
    pub fn oriented(id: &[f64], ood: &[f64], orientation: Orientation) -> Result<Self> {
        let flip = |v: &[f64]| -> Vec<f64> {
            match orientation {
                Orientation::HigherIsId => v.to_vec(),
                Orientation::LowerIsId => v.iter().map(|x| -x).collect(),
            }
        };
        Self::new(flip(id), flip(ood))
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id_scores
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood_scores
    }
}

/// `P(id > ood) + P(id = ood) / 2` from midranks of the pooled scores.
pub fn auroc(s: &ScoreSet) -> f64 {
    let n_id = s.id_scores.len();
    let n_ood = s.ood_scores.len();
    let mut pooled: Vec<(f64, bool)> = s
        .id_scores
        .iter()
        .map(|&v| (v, true))
        .chain(s.ood_scores.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps every midrank an integer.
    let mut id_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let midrank_x2 = (i + 1 + j) as u128;
        let ids = pooled[i..j].iter().filter(|p| p.1).count() as u128;
        id_rank_sum_x2 += ids * midrank_x2;
        i = j;
    }
    let n_id128 = n_id as u128;
    let u_x2 = id_rank_sum_x2 - n_id128 * (n_id128 + 1);
    u_x2 as f64 / (2.0 * n_id as f64 * n_ood as f64)
}

/// Share of OOD scores at or above the largest threshold that keeps at
/// least `tpr` of the ID scores. `tpr = 1` uses the minimum ID score.
pub fn fpr_at_tpr(s: &ScoreSet, tpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tpr) {
        return Err(Error::Config(format!("tpr {tpr} outside [0, 1]")));
    }
    let mut id = s.id_scores.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let n = id.len();
    let k = ((tpr * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let threshold = id[k - 1];
    let above = s.ood_scores.iter().filter(|&&v| v >= threshold).count();
    Ok(above as f64 / s.ood_scores.len() as f64)
}

/// Distance-to-interval score: 0 inside `[lo, hi]`, negative outside.
pub fn roc_score(s: f64, lo: f64, hi: f64) -> f64 {
    if s.is_nan() {
        return f64::NEG_INFINITY;
    }
    -(lo - s).max(s - hi).max(0.0)
}

/// Single scalar ranking a cascade outcome: samples that travel further
/// rank higher, and within the same exit gate the gate's own score breaks
/// the tie (distance to the interval for early gates, the oriented score for
/// the final one). The within-gate part is squashed into `(0, 1)` with
/// `atan`, which preserves order.
pub fn cascade_roc_score(outcome: &CascadeOutcome, gates: &[GateConfig]) -> f64 {
    let g = outcome.exit_gate();
    let s = outcome.scores[g];
    let gate = &gates[g];
    let within = if gate.score_kind.is_final() {
        if s.is_nan() {
            f64::NEG_INFINITY
        } else if gate.score_kind.higher_is_id() {
            s
        } else {
            -s
        }
    } else {
        roc_score(s, gate.lo, gate.hi)
    };
    g as f64 + 0.5 + within.atan() / std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateExit {
    pub gate: usize,
    pub pass_count: usize,
    pub reject_count: usize,
    /// `reject_count` over all samples.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitHistogram {
    pub total: usize,
    pub gates: Vec<GateExit>,
    pub accepted_count: usize,
    pub accepted_fraction: f64,
}

impl ExitHistogram {
    /// Rejection fractions of every gate followed by the accepted fraction.
    /// Sums to 1.
    pub fn fractions(&self) -> Vec<f64> {
        self.gates
            .iter()
            .map(|g| g.fraction)
            .chain(std::iter::once(self.accepted_fraction))
            .collect()
    }
}

pub fn exit_histogram(outcomes: &[CascadeOutcome], gate_count: usize) -> Result<ExitHistogram> {
    if outcomes.is_empty() {
        return Err(Error::Data("no outcomes for the exit histogram".into()));
    }
    let n = outcomes.len();
    let mut passed = vec![0usize; gate_count];
    let mut rejected = vec![0usize; gate_count];
    let mut accepted = 0;
    for o in outcomes {
        let g = o.exit_gate();
        if g >= gate_count {
            return Err(Error::Data(format!(
                "outcome {} exits at gate {g} of {gate_count}",
                o.sample_id
            )));
        }
        passed[..g].iter_mut().for_each(|p| *p += 1);
        match o.verdict {
            Verdict::Rejected => rejected[g] += 1,
            Verdict::Accepted => {
                passed[g] += 1;
                accepted += 1;
            }
        }
    }
    Ok(ExitHistogram {
        total: n,
        gates: (0..gate_count)
            .map(|g| GateExit {
                gate: g,
                pass_count: passed[g],
                reject_count: rejected[g],
                fraction: rejected[g] as f64 / n as f64,
            })
            .collect(),
        accepted_count: accepted,
        accepted_fraction: accepted as f64 / n as f64,
    })
}

/// Fraction of outcomes that end at early gate `g`.
pub fn exit_fraction_at(outcomes: &[CascadeOutcome], g: usize) -> f64 {
    let hits = outcomes
        .iter()
        .filter(|o| o.exit_stage == ExitStage::Gate(g))
        .count();
    hits as f64 / outcomes.len().max(1) as f64
}

/// One evaluated OOD corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub score_kind: String,
    pub n_id: usize,
    pub n_ood: usize,
    pub auroc: f64,
    pub fpr95: f64,
    /// Share of ID samples the cascade accepts.
    pub id_acceptance: f64,
    /// Mean FLOPs over the mixed ID + OOD stream.
    pub avg_flops: f64,
    pub full_flops: u64,
    pub savings_pct: f64,
    /// OOD exit fractions: one per gate (rejections), then accepted.
    pub exit_fractions: Vec<f64>,
}

/// Header for a cascade with `gates` gates. The exit columns are
/// `exit_g0 .. exit_g{gates-1}` followed by `accepted`.
pub fn report_header(gates: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "dataset",
        "score_kind",
        "n_id",
        "n_ood",
        "auroc",
        "fpr95",
        "id_acceptance",
        "avg_flops",
        "full_flops",
        "savings_pct",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..gates).map(|g| format!("exit_g{g}")));
    cols.push("accepted".into());
    cols
}

pub fn render_report(rows: &[ReportRow], gates: usize) -> Result<String> {
    let header = report_header(gates);
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        if r.exit_fractions.len() != gates + 1 {
            return Err(Error::Data(format!(
                "row {} has {} exit fractions, expected {}",
                r.dataset,
                r.exit_fractions.len(),
                gates + 1
            )));
        }
        write!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.1},{},{:.4}",
            r.dataset,
            r.score_kind,
            r.n_id,
            r.n_ood,
            r.auroc,
            r.fpr95,
            r.id_acceptance,
            r.avg_flops,
            r.full_flops,
            r.savings_pct
        )
        .expect("writing to a String cannot fail");
        for f in &r.exit_fractions {
            write!(out, ",{f:.6}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_report(rows: &[ReportRow], gates: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_report(rows, gates)?).map_err(|e| Error::io(path, e))
}

/// Equal-width histogram of several named score lists over their common
/// finite range, as CSV rows `dataset,bin,bin_lo,bin_hi,count`.
pub fn render_histogram(series: &[(String, Vec<f64>)], bins: usize) -> String {
    let finite = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let mut out = String::from("dataset,bin,bin_lo,bin_hi,count\n");
    if !lo.is_finite() || bins == 0 {
        return out;
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    for (name, values) in series {
        let mut counts = vec![0usize; bins];
        for &v in values.iter().filter(|v| v.is_finite()) {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            writeln!(out, "{name},{b},{a:.6},{:.6},{c}", a + width)
                .expect("writing to a String cannot fail");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::ScoreKind;
    use proptest::prelude::*;

    fn brute(s: &ScoreSet) -> f64 {
        let mut acc = 0.0;
        for &a in s.id_scores() {
            for &b in s.ood_scores() {
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (s.id_scores().len() * s.ood_scores().len()) as f64
    }

    #[test]
    fn auroc_cases() {
        let s = ScoreSet::new(vec![2.0, 3.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(auroc(&s), 1.0);
        let t = ScoreSet::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(auroc(&t), 0.5);
        assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn orientation_applied_once() {
        let s = ScoreSet::oriented(&[0.0], &[1.0], Orientation::LowerIsId).unwrap();
        assert_eq!(auroc(&s), 1.0);
    }

    #[test]
    fn fpr_cases() {
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = ScoreSet::new(id.clone(), vec![0.0; 10]).unwrap();
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.0);
        let s = ScoreSet::new(id.clone(), vec![101.0; 10]).unwrap();
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 1.0);
        let s = ScoreSet::new(id.clone(), id.clone()).unwrap();
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.95);
        assert_eq!(fpr_at_tpr(&s, 1.0).unwrap(), 1.0);
        assert!(fpr_at_tpr(&s, 1.5).is_err());
    }

    #[test]
    fn roc_score_is_distance_to_interval() {
        assert_eq!(roc_score(0.5, 0.0, 1.0), 0.0);
        assert_eq!(roc_score(-2.0, 0.0, 1.0), -2.0);
        assert_eq!(roc_score(4.0, 0.0, 1.0), -3.0);
        assert_eq!(roc_score(f64::NAN, 0.0, 1.0), f64::NEG_INFINITY);
    }

    fn outcome(exit: ExitStage, verdict: Verdict, scores: Vec<f64>) -> CascadeOutcome {
        CascadeOutcome {
            sample_id: "x".into(),
            verdict,
            exit_stage: exit,
            scores,
            flops: 0,
            label_pred: None,
            anomaly: false,
        }
    }

    #[test]
    fn cascade_score_orders_by_depth_then_score() {
        let gates = vec![
            GateConfig {
                lo: 0.0,
                hi: 1.0,
                ..GateConfig::open(0, ScoreKind::Ses)
            },
            GateConfig {
                lo: f64::NEG_INFINITY,
                hi: 0.0,
                ..GateConfig::open(1, ScoreKind::FinalEnergy)
            },
        ];
        let early_far = outcome(ExitStage::Gate(0), Verdict::Rejected, vec![9.0]);
        let early_near = outcome(ExitStage::Gate(0), Verdict::Rejected, vec![1.5]);
        let late_bad = outcome(ExitStage::Final, Verdict::Rejected, vec![0.5, 50.0]);
        let late_good = outcome(ExitStage::Final, Verdict::Accepted, vec![0.5, -3.0]);
        let s: Vec<f64> = [&early_far, &early_near, &late_bad, &late_good]
            .iter()
            .map(|o| cascade_roc_score(o, &gates))
            .collect();
        assert!(s.windows(2).all(|w| w[0] < w[1]), "{s:?}");
    }

    #[test]
    fn histogram_partitions() {
        let outs = vec![
            outcome(ExitStage::Gate(0), Verdict::Rejected, vec![0.0]),
            outcome(ExitStage::Gate(1), Verdict::Rejected, vec![0.0, 0.0]),
            outcome(ExitStage::Final, Verdict::Rejected, vec![0.0; 3]),
            outcome(ExitStage::Final, Verdict::Accepted, vec![0.0; 3]),
        ];
        let h = exit_histogram(&outs, 3).unwrap();
        assert!((h.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.gates[0].pass_count, 3);
        assert_eq!(h.gates[2].pass_count, 1);
        assert_eq!(h.accepted_count, 1);
        let all_acc = vec![outcome(ExitStage::Final, Verdict::Accepted, vec![0.0; 3]); 5];
        assert_eq!(exit_histogram(&all_acc, 3).unwrap().accepted_fraction, 1.0);
    }

    #[test]
    fn report_schema() {
        let row = ReportRow {
            dataset: "noise".into(),
            score_kind: "cascade".into(),
            n_id: 10,
            n_ood: 5,
            auroc: 0.9,
            fpr95: 0.1,
            id_acceptance: 0.95,
            avg_flops: 12.0,
            full_flops: 20,
            savings_pct: 40.0,
            exit_fractions: vec![0.6, 0.2, 0.1, 0.1],
        };
        let text = render_report(&[row.clone()], 3).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 14);
        assert_eq!(lines[1].split(',').count(), 14);
        assert!(lines[0].ends_with("exit_g2,accepted"));
        assert!(render_report(&[row], 2).is_err());
    }

    #[test]
    fn histogram_csv_counts_everything() {
        let text = render_histogram(&[("a".into(), vec![0.0, 1.0, 2.0]), ("b".into(), vec![1.0])], 4);
        let total: usize = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rank_auroc_equals_pairwise(
            id in prop::collection::vec(-5i32..5, 1..40),
            ood in prop::collection::vec(-5i32..5, 1..40),
        ) {
            let s = ScoreSet::new(
                id.iter().map(|&v| v as f64).collect(),
                ood.iter().map(|&v| v as f64).collect(),
            ).unwrap();
            prop_assert_eq!(auroc(&s), brute(&s));
        }

        #[test]
        fn monotone_transform_invariance(
            id in prop::collection::vec(-3.0f64..3.0, 5..40),
            ood in prop::collection::vec(-3.0f64..3.0, 5..40),
        ) {
            let s = ScoreSet::new(id.clone(), ood.clone()).unwrap();
            let t = ScoreSet::new(
                id.iter().map(|v| v.exp()).collect(),
                ood.iter().map(|v| v.exp()).collect(),
            ).unwrap();
            prop_assert_eq!(auroc(&s), auroc(&t));
            prop_assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), fpr_at_tpr(&t, 0.95).unwrap());
            prop_assert!(fpr_at_tpr(&s, 0.99).unwrap() >= fpr_at_tpr(&s, 0.95).unwrap());
        }
    }
}
