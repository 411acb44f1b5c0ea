//! Evaluation metrics: object occurrence, Gaussian Fréchet distance,
//! total variation, effective sample size, rank correlation and an
//! energy-distance permutation test.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::ObjectDetector;
use crate::rng::SimRng;
use crate::toyworld::Condition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceReport {
    /// Fraction of mentioned objects detected, per sample; `None` when the
    /// condition mentions nothing.
    pub per_condition: Vec<Option<f64>>,
    pub mean: f64,
    /// Detection rate of each object over the samples that mention it.
    pub per_object: Vec<Option<f64>>,
}

pub fn occurrence_rate(
    samples: &[Vec<f64>],
    conditions: &[Condition],
    detector: &dyn ObjectDetector,
    threshold: f64,
) -> Result<OccurrenceReport> {
    if samples.is_empty() {
        return Err(Error::Argument("occurrence rate of an empty sample set".into()));
    }
    if samples.len() != conditions.len() {
        return Err(Error::Argument(format!("{} samples but {} conditions", samples.len(), conditions.len())));
    }
    let m = detector.n_objects();
    let mut hits = vec![0usize; m];
    let mut seen = vec![0usize; m];
    let mut per_condition = Vec::with_capacity(samples.len());
    for (x, c) in samples.iter().zip(conditions) {
        if c.is_empty() {
            per_condition.push(None);
            continue;
        }
        let mut found = 0;
        for &i in &c.mentioned {
            if i >= m {
                return Err(Error::Argument(format!("condition mentions object {i} of {m}")));
            }
            seen[i] += 1;
            if detector.detect(x, i) >= threshold {
                hits[i] += 1;
                found += 1;
            }
        }
        per_condition.push(Some(found as f64 / c.mentioned.len() as f64));
    }
    let defined: Vec<f64> = per_condition.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Argument("no sample mentions any object".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    let per_object =
        hits.iter().zip(&seen).map(|(&h, &s)| if s > 0 { Some(h as f64 / s as f64) } else { None }).collect();
    Ok(OccurrenceReport { per_condition, mean, per_object })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetScore {
    pub value: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    pub mean_gen: Vec<f64>,
    pub mean_ref: Vec<f64>,
    pub cov_trace_gen: f64,
    pub cov_trace_ref: f64,
    /// A covariance was rank deficient and received `1e-8 * I`.
    pub regularized: bool,
}

pub const FRECHET_RIDGE: f64 = 1e-8;

pub fn mean_and_cov(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let v = DVector::from_column_slice(s) - &mean;
        cov += &v * v.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

fn rank_deficient(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    eig.iter().any(|&v| v <= 1e-12 * max.max(1e-300))
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_from_moments(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let s1 = sym_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let v = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * trace_sqrt_psd(&inner);
    v.max(0.0)
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_distance(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<FrechetScore> {
    let d = gen.first().map(Vec::len).unwrap_or(0);
    if d == 0 || gen.iter().chain(reference).any(|s| s.len() != d) {
        return Err(Error::Argument("sample sets must share a positive dimension".into()));
    }
    if gen.len() < d + 1 || reference.len() < d + 1 {
        return Err(Error::Argument(format!("need at least {} samples per set", d + 1)));
    }
    let (m1, mut c1) = mean_and_cov(gen);
    let (m2, mut c2) = mean_and_cov(reference);
    let mut regularized = false;
    for c in [&mut c1, &mut c2] {
        if rank_deficient(c) {
            *c += DMatrix::identity(d, d) * FRECHET_RIDGE;
            regularized = true;
        }
    }
    Ok(FrechetScore {
        value: frechet_from_moments(&m1, &c1, &m2, &c2),
        n_gen: gen.len(),
        n_ref: reference.len(),
        mean_gen: m1.iter().copied().collect(),
        mean_ref: m2.iter().copied().collect(),
        cov_trace_gen: c1.trace(),
        cov_trace_ref: c2.trace(),
        regularized,
    })
}

fn check_probability_vector(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("{name} is not a probability vector (sum {s})")));
    }
    Ok(())
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Argument(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    check_probability_vector(p, "p")?;
    check_probability_vector(q, "q")?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Effective sample size `(sum w)^2 / sum w^2`.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Argument("weights must be finite and nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Argument("all weights are zero".into()));
    }
    Ok(s * s / weights.iter().map(|w| w * w).sum::<f64>())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument("need two equal-length series of at least 2 points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Argument("rank correlation of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

pub const ENERGY_PERMUTATIONS: usize = 200;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Two-sample energy-distance test with a permutation null.
pub fn energy_test(a: &[Vec<f64>], b: &[Vec<f64>], n_permutations: usize, rng: &mut SimRng) -> Result<EnergyTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument("energy test needs at least two points per sample".into()));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pooled.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(pooled[i], pooled[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let total: f64 = dist.iter().sum();
    let (na, nb) = (a.len(), b.len());
    let statistic_for = |labels: &[bool]| {
        let (mut saa, mut sbb) = (0.0, 0.0);
        for i in 0..n {
            let row = &dist[i * n..(i + 1) * n];
            if labels[i] {
                saa += row.iter().zip(labels).filter(|(_, l)| **l).map(|(d, _)| d).sum::<f64>();
            } else {
                sbb += row.iter().zip(labels).filter(|(_, l)| !**l).map(|(d, _)| d).sum::<f64>();
            }
        }
        let sab = (total - saa - sbb) / 2.0;
        2.0 * sab / (na * nb) as f64 - saa / (na * na) as f64 - sbb / (nb * nb) as f64
    };
    let mut labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let statistic = statistic_for(&labels);
    let mut exceed = 0;
    for _ in 0..n_permutations {
        labels.shuffle(rng);
        if statistic_for(&labels) >= statistic {
            exceed += 1;
        }
    }
    Ok(EnergyTest { statistic, p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64, n_permutations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal_vec;
    use crate::toyworld::{MixtureWorld, Which};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn gaussian_set(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SimRng::seed_from_u64(seed);
        (0..n).map(|_| standard_normal_vec(&mut rng, d).iter().map(|v| v + shift).collect()).collect()
    }

    #[test]
    fn frechet_examples() {
        let a = gaussian_set(500, 3, 0.0, 1);
        assert!(frechet_distance(&a, &a).unwrap().value < 1e-9);
        let mu1 = DVector::from_vec(vec![0.0, 0.0]);
        let mu2 = DVector::from_vec(vec![3.0, 0.0]);
        let i2 = DMatrix::identity(2, 2);
        assert!((frechet_from_moments(&mu1, &i2, &mu2, &i2) - 9.0).abs() < 1e-12);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        // (sqrt 2 - 1)^2 + (sqrt 0.5 - 1)^2 for commuting covariances
        let expected = (2f64.sqrt() - 1.0).powi(2) + (0.5f64.sqrt() - 1.0).powi(2);
        assert!((frechet_from_moments(&mu1, &cov, &mu1, &i2) - expected).abs() < 1e-12);
    }

    #[test]
    fn frechet_same_distribution_is_small() {
        let a = gaussian_set(10_000, 6, 0.0, 2);
        let b = gaussian_set(10_000, 6, 0.0, 3);
        let v = frechet_distance(&a, &b).unwrap().value;
        assert!(v < 0.05, "{v}");
    }

    #[test]
    fn frechet_flags_rank_deficiency() {
        let a: Vec<Vec<f64>> = (0..20).map(|k| vec![k as f64, 0.0]).collect();
        let b = gaussian_set(20, 2, 0.0, 4);
        assert!(frechet_distance(&a, &b).unwrap().regularized);
        assert!(!frechet_distance(&b, &b).unwrap().regularized);
        assert!(frechet_distance(&a[..2], &b).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.5, 0.3, 0.2], &[0.2, 0.3, 0.5]).unwrap() - 0.3).abs() < 1e-15);
        assert!(tv_distance(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.3; 7]).unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(ess(&[0.0, 2.0, 0.0]).unwrap(), 1.0);
        assert!((ess(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-12);
        assert!(ess(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn occurrence_examples() {
        let world = MixtureWorld::default();
        let c = vec![Condition::new([0, 1, 2]); 3];
        let present = vec![vec![2.0; 6]; 3];
        let absent = vec![vec![-2.0; 6]; 3];
        assert_eq!(occurrence_rate(&present, &c, &world, 0.5).unwrap().mean, 1.0);
        assert_eq!(occurrence_rate(&absent, &c, &world, 0.5).unwrap().mean, 0.0);
        assert!(occurrence_rate(&[], &[], &world, 0.5).is_err());

        let mut rng = SimRng::seed_from_u64(10);
        let conds: Vec<Condition> = (0..1000).map(|_| Condition::new([0, 1, 2])).collect();
        let q: Vec<Vec<f64>> = conds.iter().map(|c| world.sample_clean(c, Which::Q, &mut rng)).collect();
        let rate = occurrence_rate(&q, &conds, &world, 0.5).unwrap().mean;
        assert!((rate - 0.7).abs() < 0.03, "{rate}");
    }

    #[test]
    fn occurrence_of_p_samples_matches_detector_calibration() {
        // under p every mentioned slot is present; the detector misses only the
        // tail beyond the midpoint, probability Phi(-2 sqrt 2) per slot
        let world = MixtureWorld::default();
        let mut rng = SimRng::seed_from_u64(11);
        let conds: Vec<Condition> = (0..3000).map(|_| world.sample_condition(&mut rng)).collect();
        let p: Vec<Vec<f64>> = conds.iter().map(|c| world.sample_clean(c, Which::P, &mut rng)).collect();
        let rep = occurrence_rate(&p, &conds, &world, 0.5).unwrap();
        let miss = 0.5 * libm_erfc(2.0);
        let n: usize = conds.iter().map(|c| c.mentioned.len()).sum();
        let se = (miss * (1.0 - miss) / n as f64).sqrt();
        let overall: f64 = rep.per_object.iter().flatten().sum::<f64>() / 3.0;
        assert!((overall - (1.0 - miss)).abs() < 4.0 * se + 1e-3, "{overall}");
    }

    fn libm_erfc(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 is too coarse; integrate numerically instead
        let steps = 200_000;
        let upper = x + 12.0;
        let h = (upper - x) / steps as f64;
        let f = |t: f64| (-t * t).exp();
        let mut s = f(x) + f(upper);
        for k in 1..steps {
            s += f(x + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman_correlation(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn energy_test_separates_and_accepts() {
        let mut rng = SimRng::seed_from_u64(12);
        let a = gaussian_set(300, 2, 0.0, 20);
        let b = gaussian_set(300, 2, 0.0, 21);
        let c = gaussian_set(300, 2, 0.5, 22);
        assert!(energy_test(&a, &b, ENERGY_PERMUTATIONS, &mut rng).unwrap().p_value > 0.01);
        assert!(energy_test(&a, &c, ENERGY_PERMUTATIONS, &mut rng).unwrap().p_value <= 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frechet_symmetric_and_translation_invariant(seed in 0u64..10_000, shift in -5.0f64..5.0) {
            let a = gaussian_set(50, 3, 0.0, seed);
            let b: Vec<Vec<f64>> = gaussian_set(50, 3, 0.3, seed + 1)
                .into_iter()
                .map(|v| vec![v[0] * 2.0, v[1] + v[0], v[2]])
                .collect();
            let ab = frechet_distance(&a, &b).unwrap().value;
            let ba = frechet_distance(&b, &a).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-9);
            let sh = |s: &Vec<Vec<f64>>| s.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect::<Vec<Vec<f64>>>();
            let moved = frechet_distance(&sh(&a), &sh(&b)).unwrap().value;
            prop_assert!((moved - ab).abs() < 1e-9);
        }

        #[test]
        fn ess_within_bounds(w in prop::collection::vec(0.0f64..10.0, 1..50)) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let e = ess(&w).unwrap();
            prop_assert!(e >= 1.0 - 1e-12 && e <= w.len() as f64 + 1e-9);
        }
    }
}
