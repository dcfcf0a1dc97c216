//! Hyperspherical energy over class prototypes.
//!
//! Each class gets a unit-norm prototype `mu_k` (a weighted, normalized sum
//! of its features) and a concentration `kappa_k`. A feature `z` is scored by
//!
//! ```text
//! E(z) = -log sum_j exp(kappa_j * <z, mu_j> / |z|)
//! ```
//!
//! which depends only on the direction of `z`. [`magnitude_energy`] is the
//! norm-driven baseline kept for comparison.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const KAPPA_MIN: f64 = 1e-3;
pub const KAPPA_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// One refinement pass: weights `max(0, cos(z, mu_uniform))`.
    SelfConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMode {
    /// von Mises–Fisher approximation from the mean resultant length.
    #[default]
    Vmf,
    /// `kappa = 1` for every class.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub class_counts: Vec<usize>,
    pub weighting: Weighting,
    pub kappa_mode: KappaMode,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Vec<Vec<f32>>,
    kappas: Vec<f32>,
    dim: usize,
    provenance: BankProvenance,
}

fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.into().powi(2)).sum::<f64>().sqrt()
}

fn dot<T: Copy + Into<f64>>(a: &[T], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y as f64).sum()
}

fn check_features(features: &[Vec<Vec<f32>>]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::Fit("no classes supplied".into()));
    }
    let mut dim = None;
    for (k, class) in features.iter().enumerate() {
        if class.is_empty() {
            return Err(Error::Fit(format!("class {k} has no samples")));
        }
        for z in class {
            let d = *dim.get_or_insert(z.len());
            if z.len() != d || d == 0 {
                return Err(Error::Fit(format!(
                    "class {k}: feature of length {} does not match dimension {d}",
                    z.len()
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Fit(format!("class {k}: non-finite feature")));
            }
        }
    }
    Ok(dim.unwrap_or(0))
}

fn weighted_direction(class: usize, zs: &[Vec<f32>], weights: &[f64]) -> Result<Vec<f32>> {
    let d = zs[0].len();
    let mut acc = vec![0.0f64; d];
    for (z, &w) in zs.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(z) {
            *a += w * v as f64;
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateClass { class });
    }
    Ok(acc.iter().map(|v| (v / n) as f32).collect())
}

pub fn fit_prototypes(features: &[Vec<Vec<f32>>], weighting: Weighting) -> Result<PrototypeBank> {
    let dim = check_features(features)?;
    let mut prototypes = Vec::with_capacity(features.len());
    for (k, zs) in features.iter().enumerate() {
        let uniform = weighted_direction(k, zs, &vec![1.0; zs.len()])?;
        let mu = match weighting {
            Weighting::Uniform => uniform,
            Weighting::SelfConsistent => {
                let mut w: Vec<f64> = zs
                    .iter()
                    .map(|z| {
                        let n = norm(z);
                        if n > 0.0 {
                            (dot(z, &uniform) / n).max(0.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::DegenerateClass { class: k });
                }
                w.iter_mut().for_each(|v| *v /= total);
                weighted_direction(k, zs, &w)?
            }
        };
        prototypes.push(mu);
    }
    Ok(PrototypeBank {
        kappas: vec![1.0; prototypes.len()],
        prototypes,
        dim,
        provenance: BankProvenance {
            class_counts: features.iter().map(Vec::len).collect(),
            weighting,
            kappa_mode: KappaMode::Uniform,
            warnings: Vec::new(),
        },
    })
}

/// Mean resultant length of the L2-normalized features of one class.
pub fn mean_resultant_length(zs: &[Vec<f32>]) -> f64 {
    let d = zs.first().map_or(0, Vec::len);
    let mut acc = vec![0.0f64; d];
    let mut count = 0usize;
    for z in zs {
        let n = norm(z);
        if n > 0.0 {
            for (a, &v) in acc.iter_mut().zip(z) {
                *a += v as f64 / n;
            }
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    acc.iter().map(|v| v * v).sum::<f64>().sqrt() / count as f64
}

/// `R(d - R^2) / (1 - R^2)` before clamping.
pub fn vmf_kappa_unclamped(r: f64, d: usize) -> f64 {
    let r2 = r * r;
    if r2 >= 1.0 {
        return f64::INFINITY;
    }
    r * (d as f64 - r2) / (1.0 - r2)
}

/// Per-class concentration plus any warnings raised along the way.
pub fn estimate_kappa(
    features: &[Vec<Vec<f32>>],
    bank: &PrototypeBank,
) -> Result<(Vec<f64>, Vec<String>)> {
    let dim = check_features(features)?;
    if dim != bank.dim || features.len() != bank.classes() {
        return Err(Error::Fit(format!(
            "features ({} classes, dim {dim}) do not match bank ({} classes, dim {})",
            features.len(),
            bank.classes(),
            bank.dim
        )));
    }
    let mut warnings = Vec::new();
    let kappas = features
        .iter()
        .enumerate()
        .map(|(k, zs)| {
            if zs.len() == 1 {
                warnings.push(format!(
                    "class {k} has a single sample; kappa clamped to {KAPPA_MAX}"
                ));
                return KAPPA_MAX;
            }
            let r = mean_resultant_length(zs);
            let kappa = vmf_kappa_unclamped(r, dim);
            if kappa.is_nan() {
                KAPPA_MIN
            } else {
                kappa.clamp(KAPPA_MIN, KAPPA_MAX)
            }
        })
        .collect();
    Ok((kappas, warnings))
}

impl PrototypeBank {
    /// Fits prototypes and, in `Vmf` mode, per-class concentrations.
    pub fn fit(
        features: &[Vec<Vec<f32>>],
        weighting: Weighting,
        kappa_mode: KappaMode,
    ) -> Result<Self> {
        let mut bank = fit_prototypes(features, weighting)?;
        if kappa_mode == KappaMode::Vmf {
            let (kappas, warnings) = estimate_kappa(features, &bank)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            bank.kappas = kappas.iter().map(|&k| k as f32).collect();
            bank.provenance.warnings = warnings;
        }
        bank.provenance.kappa_mode = kappa_mode;
        Ok(bank)
    }

    pub fn from_parts(
        prototypes: Vec<Vec<f32>>,
        kappas: Vec<f32>,
        provenance: BankProvenance,
    ) -> Result<Self> {
        let dim = prototypes.first().map_or(0, Vec::len);
        if prototypes.is_empty() || dim == 0 {
            return Err(Error::Validation("empty prototype bank".into()));
        }
        if kappas.len() != prototypes.len() {
            return Err(Error::Validation(format!(
                "{} prototypes but {} kappas",
                prototypes.len(),
                kappas.len()
            )));
        }
        for (k, mu) in prototypes.iter().enumerate() {
            if mu.len() != dim {
                return Err(Error::Validation(format!("prototype {k} has wrong dimension")));
            }
            if (norm(mu) - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!("prototype {k} is not unit norm")));
            }
        }
        if kappas.iter().any(|&k| !(k > 0.0) || !k.is_finite()) {
            return Err(Error::Validation("kappas must be positive".into()));
        }
        Ok(Self {
            prototypes,
            kappas,
            dim,
            provenance,
        })
    }

    pub fn with_kappas(mut self, kappas: Vec<f32>) -> Result<Self> {
        if kappas.len() != self.prototypes.len() || kappas.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::Validation("invalid kappa vector".into()));
        }
        self.kappas = kappas;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, k: usize) -> &[f32] {
        &self.prototypes[k]
    }

    pub fn prototypes(&self) -> &[Vec<f32>] {
        &self.prototypes
    }

    pub fn kappas(&self) -> &[f32] {
        &self.kappas
    }

    pub fn provenance(&self) -> &BankProvenance {
        &self.provenance
    }

    /// Writes `<stem>.prototypes.tzr`, `<stem>.kappas.tzr` and the JSON
    /// provenance sidecar `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let flat: Vec<f32> = self.prototypes.iter().flatten().copied().collect();
        write_tensor(
            &Tensor::new(vec![self.classes(), self.dim], flat)?,
            dir.join(format!("{stem}.prototypes.tzr")),
        )?;
        write_tensor(
            &Tensor::from_vec(self.kappas.clone())?,
            dir.join(format!("{stem}.kappas.tzr")),
        )?;
        let sidecar = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.provenance)
            .map_err(|e| Error::json(&sidecar, e))?;
        fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let protos = read_tensor(dir.join(format!("{stem}.prototypes.tzr")))?;
        let kappas = read_tensor(dir.join(format!("{stem}.kappas.tzr")))?;
        let [c, d] = *protos.shape() else {
            return Err(Error::Validation(format!(
                "prototype tensor must be C×d, got {:?}",
                protos.shape()
            )));
        };
        let sidecar = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let provenance = serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?;
        let prototypes = protos.data().chunks(d).map(<[f32]>::to_vec).collect::<Vec<_>>();
        debug_assert_eq!(prototypes.len(), c);
        Self::from_parts(prototypes, kappas.into_data(), provenance)
    }
}

/// Max-shifted `-log sum exp(x)`.
pub fn neg_log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return -max;
    }
    -(max + xs.map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Hyperspherical energy of `z`. With `l2_normalize = false` the cosine is
/// replaced by the raw projection `<z, mu_j>`, which reintroduces the norm.
pub fn she_energy<T: Copy + Into<f64>>(z: &[T], bank: &PrototypeBank, l2_normalize: bool) -> Result<f64> {
    if z.len() != bank.dim {
        return Err(Error::Size(format!(
            "feature dimension {} does not match bank dimension {}",
            z.len(),
            bank.dim
        )));
    }
    let scale = if l2_normalize {
        let n = norm(z);
        if !(n > 0.0) {
            return Err(Error::Domain("zero feature vector has no direction".into()));
        }
        1.0 / n
    } else {
        1.0
    };
    let logits: Vec<f64> = bank
        .prototypes
        .iter()
        .zip(&bank.kappas)
        .map(|(mu, &kappa)| kappa as f64 * dot(z, mu) * scale)
        .collect();
    Ok(neg_log_sum_exp(logits.iter().copied()))
}

/// `-alpha |z| - log C`.
pub fn magnitude_energy<T: Copy + Into<f64>>(z: &[T], alpha: f64, classes: usize) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if classes == 0 {
        return Err(Error::Config("classes must be positive".into()));
    }
    Ok(-alpha * norm(z) - (classes as f64).ln())
}

/// Norm plus one dot product per class, then the log-sum-exp.
pub fn overhead_flops(dim: usize, classes: usize) -> u64 {
    (2 * dim + 2 * dim * classes + 3 * classes) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn bank_2d_orthogonal() -> PrototypeBank {
        PrototypeBank::from_parts(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 1.0],
            BankProvenance {
                class_counts: vec![1, 1],
                weighting: Weighting::Uniform,
                kappa_mode: KappaMode::Uniform,
                warnings: vec![],
            },
        )
        .unwrap()
    }

    #[test]
    fn prototype_of_identical_vectors() {
        let bank = fit_prototypes(&[vec![vec![3.0, 0.0], vec![3.0, 0.0]]], Weighting::Uniform).unwrap();
        assert_eq!(bank.prototype(0), &[1.0, 0.0]);
    }

    #[test]
    fn prototype_of_two_axes() {
        let bank = fit_prototypes(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]]], Weighting::Uniform).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!(bank.prototype(0).iter().all(|&v| (v - h).abs() < 1e-7));
    }

    #[test]
    fn prototype_is_scale_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let class: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..2.0)).collect())
            .collect();
        let scaled: Vec<Vec<f32>> = class.iter().map(|z| z.iter().map(|v| v * 10.0).collect()).collect();
        let a = fit_prototypes(&[class], Weighting::Uniform).unwrap();
        let b = fit_prototypes(&[scaled], Weighting::Uniform).unwrap();
        for (x, y) in a.prototype(0).iter().zip(b.prototype(0)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn self_consistent_downweights_outliers() {
        let class = vec![vec![1.0, 0.1], vec![1.0, -0.1], vec![-0.2, 1.0]];
        let uni = fit_prototypes(&[class.clone()], Weighting::Uniform).unwrap();
        let sc = fit_prototypes(&[class], Weighting::SelfConsistent).unwrap();
        assert!(sc.prototype(0)[1].abs() < uni.prototype(0)[1].abs());
        assert!((norm(sc.prototype(0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fit_errors() {
        let err = fit_prototypes(&[vec![vec![1.0]], vec![]], Weighting::Uniform).unwrap_err();
        assert!(err.to_string().contains("class 1"));
        let err = fit_prototypes(&[vec![vec![1.0, 2.0], vec![-1.0, -2.0]]], Weighting::Uniform).unwrap_err();
        assert!(matches!(err, Error::DegenerateClass { class: 0 }));
    }

    #[test]
    fn aligned_class_hits_upper_clamp() {
        let class = vec![vec![1.0, 1.0, 0.0]; 5];
        let bank = fit_prototypes(&[class.clone()], Weighting::Uniform).unwrap();
        let (k, warnings) = estimate_kappa(&[class], &bank).unwrap();
        assert_eq!(k, vec![KAPPA_MAX]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn single_sample_class_warns() {
        let bank = PrototypeBank::fit(
            &[vec![vec![1.0, 0.0]], vec![vec![0.0, 2.0], vec![0.1, 1.0]]],
            Weighting::Uniform,
            KappaMode::Vmf,
        )
        .unwrap();
        assert_eq!(bank.kappas()[0] as f64, KAPPA_MAX);
        assert_eq!(bank.provenance().warnings.len(), 1);
    }

    #[test]
    fn isotropic_class_has_tiny_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let class: Vec<Vec<f32>> = (0..1000)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                vec![a.cos() as f32, a.sin() as f32]
            })
            .collect();
        let r = mean_resultant_length(&class);
        assert!(vmf_kappa_unclamped(r, 2) < 0.2);
    }

    fn cluster(rng: &mut ChaCha8Rng, std_deg: f64, n: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                let a = (std_deg * e).to_radians();
                vec![a.cos() as f32, a.sin() as f32]
            })
            .collect()
    }

    #[test]
    fn tighter_cluster_has_larger_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tight = cluster(&mut rng, 5.0, 500);
        let loose = cluster(&mut rng, 30.0, 500);
        let bank = fit_prototypes(&[tight.clone(), loose.clone()], Weighting::Uniform).unwrap();
        let (k, _) = estimate_kappa(&[tight, loose], &bank).unwrap();
        assert!(k[0] > k[1], "{k:?}");
    }

    #[test]
    fn energy_at_prototype() {
        let bank = bank_2d_orthogonal();
        let e = she_energy(&[1.0, 0.0], &bank, true).unwrap();
        assert!(close(e, -(std::f64::consts::E + 1.0).ln(), 1e-12));
        assert!(close(e, -1.3132616875182228, 1e-12));
    }

    #[test]
    fn orthogonal_feature_gives_minus_log_c() {
        let bank = PrototypeBank::from_parts(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![2.5, 2.5],
            bank_2d_orthogonal().provenance().clone(),
        )
        .unwrap();
        let e = she_energy(&[0.0, 0.0, 4.0], &bank, true).unwrap();
        assert!(close(e, -(2.0f64).ln(), 1e-12));
    }

    #[test]
    fn zero_vector_is_a_domain_error() {
        assert!(matches!(
            she_energy(&[0.0, 0.0], &bank_2d_orthogonal(), true),
            Err(Error::Domain(_))
        ));
        assert!(she_energy(&[0.0, 0.0], &bank_2d_orthogonal(), false).is_ok());
    }

    #[test]
    fn magnitude_energy_cases() {
        assert!(close(magnitude_energy(&[0.0; 4], 1.0, 10).unwrap(), -(10.0f64).ln(), 1e-12));
        let a = magnitude_energy(&[3.0, 4.0], 0.5, 3).unwrap();
        let b = magnitude_energy(&[6.0, 8.0], 0.5, 3).unwrap();
        assert!(close(a - b, 0.5 * 5.0, 1e-12));
    }

    #[test]
    fn large_kappa_does_not_overflow() {
        let bank = bank_2d_orthogonal().with_kappas(vec![1e4, 1e4]).unwrap();
        let e = she_energy(&[1.0, 0.0], &bank, true).unwrap();
        assert!(e.is_finite());
        assert!(close(e, -1e4, 1e-6));
    }

    #[test]
    fn single_class_minimum_at_prototype() {
        let bank = fit_prototypes(&[vec![vec![0.6, 0.8, 0.0]]], Weighting::Uniform).unwrap();
        let at = she_energy(bank.prototype(0), &bank, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm(&z) > 1e-3 {
                assert!(at <= she_energy(&z, &bank, true).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn class_order_permutes_bank() {
        let a = vec![vec![1.0, 0.2], vec![0.9, 0.1]];
        let b = vec![vec![-0.3, 1.0], vec![0.1, 0.8], vec![0.0, 1.2]];
        let ab = PrototypeBank::fit(&[a.clone(), b.clone()], Weighting::Uniform, KappaMode::Vmf).unwrap();
        let ba = PrototypeBank::fit(&[b, a], Weighting::Uniform, KappaMode::Vmf).unwrap();
        assert_eq!(ab.prototype(0), ba.prototype(1));
        assert_eq!(ab.kappas()[1], ba.kappas()[0]);
        let z = [0.4, 0.7];
        assert!(close(she_energy(&z, &ab, true).unwrap(), she_energy(&z, &ba, true).unwrap(), 1e-12));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = PrototypeBank::fit(
            &[vec![vec![1.0, 0.2], vec![0.9, 0.1]], vec![vec![-0.3, 1.0], vec![0.1, 0.8]]],
            Weighting::SelfConsistent,
            KappaMode::Vmf,
        )
        .unwrap();
        bank.save(dir.path(), "bank").unwrap();
        assert_eq!(PrototypeBank::load(dir.path(), "bank").unwrap(), bank);
    }

    proptest! {
        #[test]
        fn energy_is_scale_invariant(
            z in prop::collection::vec(-5.0f32..5.0, 4),
            alpha in 1e-3f32..1e3,
        ) {
            prop_assume!(norm(&z) > 1e-3);
            let bank = PrototypeBank::fit(
                &[vec![vec![1.0, 0.0, 0.5, 0.0]], vec![vec![0.0, 1.0, 0.0, -0.5]]],
                Weighting::Uniform,
                KappaMode::Uniform,
            ).unwrap().with_kappas(vec![3.0, 7.0]).unwrap();
            let scaled: Vec<f32> = z.iter().map(|v| v * alpha).collect();
            let a = she_energy(&z, &bank, true).unwrap();
            let b = she_energy(&scaled, &bank, true).unwrap();
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }
}
