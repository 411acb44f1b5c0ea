use super::*;
use crate::rng::StreamSeed;
use rand::Rng;
use std::f64::consts::PI;

fn unit_world(miss: f64, gamma: f64) -> MixtureWorld {
    let slot = SlotGaussianPair { mu_present: [0.0, 0.0], mu_absent: [-4.0, -4.0], ..Default::default() };
    MixtureWorld::single_object(slot, miss, gamma)
}

fn mentioned_all(w: &MixtureWorld) -> Condition {
    Condition::new(0..w.n_objects)
}

#[test]
fn density_at_mode() {
    let w = unit_world(0.0, 1.0);
    let c = mentioned_all(&w);
    let d0 = w.noisy_density(&c, Which::P, &[0.0, 0.0], 0.0).unwrap();
    assert!((d0 - 1.0 / (2.0 * PI)).abs() < 1e-15);
    let d1 = w.noisy_density(&c, Which::P, &[0.0, 0.0], 1.0).unwrap();
    assert!((d1 - 1.0 / (4.0 * PI)).abs() < 1e-15);
}

#[test]
fn model_density_is_two_component_mixture() {
    let w = MixtureWorld::single_object(SlotGaussianPair::default(), 0.3, 1.0);
    let c = mentioned_all(&w);
    // 0.7 N(x; mu_p, I) + 0.3 N(x; mu_a, I) at x = mu_p, evaluated independently
    let expected = 0.11140846553748553;
    let d = w.noisy_density(&c, Which::Q, &[2.0, 2.0], 0.0).unwrap();
    assert!((d - expected).abs() < 1e-14);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let w = MixtureWorld::default();
    let c = Condition::new([0]);
    assert!(matches!(w.noisy_density(&c, Which::P, &[0.0; 4], 0.0), Err(Error::Argument(_))));
    assert!(w.noisy_score(&c, Which::Q, &[0.0; 7], 0.0).is_err());
    assert!(w.noisy_density(&Condition::new([5]), Which::P, &[0.0; 6], 0.0).is_err());
}

#[test]
fn score_examples() {
    let w = unit_world(0.0, 1.0);
    let c = mentioned_all(&w);
    let s = w.noisy_score(&c, Which::P, &[0.0, 0.0], 0.0).unwrap();
    assert_eq!(s, vec![0.0, 0.0]);
    let s = w.noisy_score(&c, Which::P, &[2.0, 0.0], 1.0).unwrap();
    assert!((s[0] + 1.0).abs() < 1e-15 && s[1].abs() < 1e-15);
}

fn finite_difference_score(w: &MixtureWorld, c: &Condition, which: Which, x: &[f64], sigma: f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|j| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[j] += h;
            dn[j] -= h;
            let lu = w.noisy_density(c, which, &up, sigma).unwrap().ln();
            let ld = w.noisy_density(c, which, &dn, sigma).unwrap().ln();
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

#[test]
fn score_matches_finite_differences() {
    let w = MixtureWorld::default();
    let mut rng = StreamSeed::new(11).rng();
    for trial in 0..100 {
        let c = w.sample_condition(&mut rng);
        let sigma = [0.0, 0.3, 1.0, 2.5][trial % 4];
        let which = if trial % 2 == 0 { Which::P } else { Which::Q };
        let x: Vec<f64> = (0..w.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s = w.noisy_score(&c, which, &x, sigma).unwrap();
        let fd = finite_difference_score(&w, &c, which, &x, sigma);
        for (a, b) in s.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "score {a} vs fd {b}");
        }
    }
}

#[test]
fn tweedie_identity_holds() {
    let w = MixtureWorld::default();
    let mut rng = StreamSeed::new(12).rng();
    for _ in 0..200 {
        let c = w.sample_condition(&mut rng);
        let sigma = rng.random_range(0.01..5.0);
        let x: Vec<f64> = (0..w.dim()).map(|_| rng.random_range(-6.0..6.0)).collect();
        let f = w.mmse_denoise(&c, &x, sigma).unwrap();
        let s = w.noisy_score(&c, Which::Q, &x, sigma).unwrap();
        for j in 0..x.len() {
            assert!((f[j] - (x[j] + sigma * sigma * s[j])).abs() < 1e-8);
        }
    }
}

#[test]
fn mmse_examples() {
    let w = MixtureWorld::default();
    let c = Condition::new([0, 2]);
    let x = [0.3, -1.0, 5.0, 2.0, -0.1, 0.7];
    assert_eq!(w.mmse_denoise(&c, &x, 0.0).unwrap(), x.to_vec());

    let single = unit_world(0.0, 1.0);
    let c1 = mentioned_all(&single);
    let f = single.mmse_denoise(&c1, &[2.0, 0.0], 1.0).unwrap();
    assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15);
}

#[test]
fn mmse_matches_monte_carlo_posterior_mean() {
    // self-normalized importance estimate of E[X_0 | X_sigma = x] with X_0 ~ q
    let w = MixtureWorld::single_object(SlotGaussianPair::default(), 0.3, 1.5);
    let c = mentioned_all(&w);
    let sigma = 2.0;
    let x = [0.5, -0.2];
    let mut rng = StreamSeed::new(13).rng();
    let n = 1_000_000;
    let mut samples = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = w.sample_clean(&c, Which::Q, &mut rng);
        let d2 = (x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2);
        weights.push((-0.5 * d2 / (sigma * sigma)).exp());
        samples.push(x0);
    }
    let z: f64 = weights.iter().sum();
    let f = w.mmse_denoise(&c, &x, sigma).unwrap();
    for a in 0..2 {
        let m: f64 = samples.iter().zip(&weights).map(|(s, wt)| wt * s[a]).sum::<f64>() / z;
        let var: f64 =
            samples.iter().zip(&weights).map(|(s, wt)| wt * wt * (s[a] - m).powi(2)).sum::<f64>() / (z * z);
        let se = var.sqrt();
        assert!((f[a] - m).abs() < 3.0 * se, "axis {a}: analytic {} vs MC {m} (se {se})", f[a]);
    }
}

#[test]
fn detector_symmetry_and_values() {
    let w = MixtureWorld::default();
    let mut x = vec![0.0; 6];
    x[0] = 2.0;
    x[1] = 2.0;
    let at_present = w.detect_object(&x, 0).unwrap();
    assert!(at_present > 0.5);
    x[0] = -2.0;
    x[1] = -2.0;
    let at_absent = w.detect_object(&x, 0).unwrap();
    assert!((at_absent - (1.0 - at_present)).abs() < 1e-15);
    x[0] = 0.0;
    x[1] = 0.0;
    assert_eq!(w.detect_object(&x, 0).unwrap(), 0.5);
    x[1] = 1.0;
    // two-Gaussian Bayes formula evaluated independently
    assert!((w.detect_object(&x, 0).unwrap() - 0.9820137900379085).abs() < 1e-14);
    assert!(matches!(w.detect_object(&x, 3), Err(Error::Argument(_))));
}

#[test]
fn density_integrates_to_one() {
    let slot = SlotGaussianPair::default();
    let w = MixtureWorld::new(2, slot, vec![0.3, 0.3], 1.5, 0.5).unwrap();
    let c = Condition::new([0]);
    let mut rng = StreamSeed::new(14).rng();
    let half = 7.0;
    let vol = (2.0_f64 * half).powi(4);
    let n = 4_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-half..half)).collect();
        acc += w.noisy_density(&c, Which::Q, &x, 1.0).unwrap();
    }
    let integral = acc / n as f64 * vol;
    assert!((integral - 1.0).abs() < 0.01, "integral {integral}");

    let w1 = MixtureWorld::single_object(slot, 0.3, 1.5);
    let c1 = Condition::new([0]);
    let mut acc = 0.0;
    let n = 1_000_000;
    for _ in 0..n {
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-half..half)).collect();
        acc += w1.noisy_density(&c1, Which::Q, &x, 0.0).unwrap();
    }
    let integral = acc / n as f64 * (2.0 * half).powi(2);
    assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
}

#[test]
fn detector_calibration() {
    let n = 10_000;
    for rho in [0.0, 0.3] {
        let w = MixtureWorld::new(3, SlotGaussianPair::default(), vec![rho; 3], 1.5, 0.5).unwrap();
        let c = Condition::new([0]);
        let mut rng = StreamSeed::new(15).rng();
        let (mut present_p, mut absent_p, mut present_q) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let xp = w.sample_clean(&c, Which::P, &mut rng);
            present_p += w.detect_object(&xp, 0).unwrap();
            absent_p += w.detect_object(&xp, 1).unwrap();
            let xq = w.sample_clean(&c, Which::Q, &mut rng);
            present_q += w.detect_object(&xq, 0).unwrap();
        }
        let nf = n as f64;
        assert!((present_p / nf - 1.0).abs() < 0.02);
        assert!((absent_p / nf).abs() < 0.02);
        assert!((present_q / nf - (1.0 - rho)).abs() < 0.02, "rho {rho}: {}", present_q / nf);
    }
}

#[test]
fn condition_prior_sums_to_one_and_excludes_empty() {
    let w = MixtureWorld::default();
    let prior = w.condition_prior();
    assert_eq!(prior.len(), 7);
    assert!((prior.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(prior.iter().all(|(c, _)| !c.is_empty()));
}

#[test]
fn invalid_worlds_are_rejected() {
    let slot = SlotGaussianPair::default();
    assert!(MixtureWorld::new(2, slot, vec![0.3], 1.5, 0.5).is_err());
    assert!(MixtureWorld::new(1, slot, vec![1.0], 1.5, 0.5).is_err());
    assert!(MixtureWorld::new(1, slot, vec![0.3], 0.9, 0.5).is_err());
    let same = SlotGaussianPair { mu_absent: slot.mu_present, ..slot };
    assert!(MixtureWorld::new(1, same, vec![0.3], 1.5, 0.5).is_err());
}

// --- discrete micro-world ---

#[test]
fn unit_correction_leaves_model_marginals() {
    let micro = DiscreteMicroWorld::random(4, 3, 5).unwrap();
    let ones = vec![vec![1.0; 4]; 4];
    let q = micro.q_marginals();
    for (t, qt) in q.iter().enumerate() {
        let v = exact_pf_target_with(&micro, t, &ones).unwrap();
        for (a, b) in v.iter().zip(qt) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_correction_recovers_targets() {
    for seed in 0..20 {
        let micro = DiscreteMicroWorld::random(3, 3, seed).unwrap();
        for t in 0..=3 {
            let v = exact_pf_target(&micro, t).unwrap();
            for (a, b) in v.iter().zip(&micro.p_marginals[t]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

/// Path-space oracle: sum `q(path) * prod_s w_s` over every trajectory
/// `x_T, ..., x_t` and marginalize onto `x_t`.
fn enumerate_paths(micro: &DiscreteMicroWorld, t: usize) -> Vec<f64> {
    let s = micro.n_states;
    let horizon = micro.horizon;
    let phis = micro.exact_phis();
    let len = horizon - t + 1;
    let mut out = vec![0.0; s];
    let total = s.pow(len as u32);
    for code in 0..total {
        // path[0] = x_T, path[len-1] = x_t
        let path: Vec<usize> = (0..len).map(|j| (code / s.pow(j as u32)) % s).collect();
        let mut weight = micro.q_prior[path[0]] * phis[horizon][path[0]];
        for j in 1..len {
            let time = horizon - j;
            weight *= micro.q_transitions[time][path[j - 1]][path[j]];
            weight *= phis[time][path[j]] / phis[time + 1][path[j - 1]];
        }
        out[path[len - 1]] += weight;
    }
    let z: f64 = out.iter().sum();
    out.iter().map(|v| v / z).collect()
}

#[test]
fn recursion_matches_trajectory_enumeration() {
    for seed in [1u64, 2, 3] {
        let micro = DiscreteMicroWorld::random(3, 2, seed).unwrap();
        for t in 0..=2 {
            let v = exact_pf_target(&micro, t).unwrap();
            let oracle = enumerate_paths(&micro, t);
            for ((a, b), c) in v.iter().zip(&oracle).zip(&micro.p_marginals[t]) {
                assert!((a - b).abs() < 1e-12);
                assert!((b - c).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn micro_world_validation() {
    let mut micro = DiscreteMicroWorld::random(3, 2, 9).unwrap();
    micro.q_transitions[0][1][2] += 0.1;
    assert!(matches!(exact_pf_target(&micro, 0), Err(Error::Validation(_))));
    let mut micro = DiscreteMicroWorld::random(3, 2, 9).unwrap();
    micro.p_marginals[1] = vec![1.0, 0.0, 0.0];
    assert!(micro.validate().is_err());
    let micro = DiscreteMicroWorld::random(3, 2, 9).unwrap();
    assert!(exact_pf_target(&micro, 3).is_err());
    assert!(DiscreteMicroWorld::random(6, 2, 0).is_err());
}
