mod common;

use common::*;
use cptlearn::estimation::{
    apply_rule, distance_chi2, distance_kl, eg_eta_step, em_eta_step, expected_stats, fit, gp_step,
    gradient, is_fixpoint, FitConfig, Init, UpdateRule,
};
use cptlearn::inference::InferenceEngine;
use cptlearn::{DataCase, DataSet, NetworkStructure, ParameterVector, Tables, EPS_FLOOR};
use proptest::prelude::*;
use rand::Rng;

fn random_data(seed: u64, s: &NetworkStructure, n: usize, observe: f64) -> DataSet {
    let mut r = rng(seed);
    DataSet::new((0..n).map(|_| random_case(&mut r, s, observe)).collect())
}

fn assert_simplex(t: &Tables) {
    for (i, j) in t.row_indices() {
        let row = t.row(i, j);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9, "row ({i},{j}) sums to {sum}");
        assert!(
            row.iter().all(|x| (EPS_FLOOR..=1.0).contains(x)),
            "row ({i},{j}) = {row:?}"
        );
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let h = 1e-6;
    let mut r = rng(11);
    for trial in 0..50 {
        let n = r.random_range(2..=6);
        let s = random_structure(&mut r, n, 3, 2);
        let theta = random_theta(&s, trial).into_tables();
        let data = random_data(trial + 1000, &s, 20, 0.6);
        let stats = expected_stats(&s, &theta, &data).unwrap();
        let grad = gradient(&stats, &theta).unwrap();
        let probs: Vec<f64> = data
            .cases
            .iter()
            .map(|c| brute_probability(&s, &theta, c))
            .collect();
        for idx in 0..theta.len() {
            let mut up = theta.clone();
            up.as_mut_slice()[idx] += h;
            let mut down = theta.clone();
            down.as_mut_slice()[idx] -= h;
            let fd = data
                .cases
                .iter()
                .zip(&probs)
                .map(|(c, p)| {
                    (brute_probability(&s, &up, c) - brute_probability(&s, &down, c))
                        / (2.0 * h)
                        / p
                })
                .sum::<f64>()
                / data.len() as f64;
            let g = grad.as_slice()[idx];
            assert!(
                (g - fd).abs() <= 1e-6 * g.abs(),
                "trial {trial} entry {idx}: analytic {g}, numeric {fd}"
            );
        }
    }
}

#[test]
fn expected_stats_average_the_oracle_posteriors() {
    let mut r = rng(12);
    for trial in 0..20 {
        let s = random_structure(&mut r, 6, 3, 2);
        let theta = random_theta(&s, trial).into_tables();
        let data = random_data(trial, &s, 300, 0.5);
        let stats = expected_stats(&s, &theta, &data).unwrap();
        let mut mean = Tables::zeros(&s);
        let mut ll = 0.0;
        for case in &data.cases {
            let (post, p) = brute_posteriors(&s, &theta, case);
            for (m, x) in mean.as_mut_slice().iter_mut().zip(post.as_slice()) {
                *m += x / data.len() as f64;
            }
            ll += p.ln() / data.len() as f64;
        }
        assert!(stats.joint.max_abs_diff(&mean) <= 1e-12, "trial {trial}");
        assert!((stats.log_likelihood - ll).abs() <= 1e-12 * ll.abs().max(1.0));
        for (i, rows) in stats.parent.iter().enumerate() {
            for (j, &p) in rows.iter().enumerate() {
                assert_eq!(p, stats.joint.row(i, j).iter().sum::<f64>());
            }
        }
    }
}

#[test]
fn complete_data_stats_are_counts() {
    let mut r = rng(13);
    let s = random_structure(&mut r, 7, 3, 3);
    let data = random_data(5, &s, 500, 1.0);
    let stats = expected_stats(&s, &ParameterVector::uniform(&s), &data).unwrap();
    let mut counts = Tables::zeros(&s);
    for case in &data.cases {
        let x = case.as_complete().unwrap();
        for i in 0..s.len() {
            let pa: Vec<usize> = s.parents(i).iter().map(|&q| x[q]).collect();
            let j = s.parent_config_index(i, &pa).unwrap();
            counts.set(i, j, x[i], counts.get(i, j, x[i]) + 1.0);
        }
    }
    for (c, e) in counts.as_slice().iter().zip(stats.joint.as_slice()) {
        assert!((c / 500.0 - e).abs() <= 1e-15);
    }
}

#[test]
fn kl_decomposes_over_families() {
    let mut r = rng(14);
    for trial in 0..20 {
        let n = r.random_range(2..=8);
        let s = random_structure(&mut r, n, 3, 3);
        if s.joint_state_count() > 1 << 12 {
            continue;
        }
        let a = random_theta(&s, 2 * trial).into_tables();
        let b = random_theta(&s, 2 * trial + 1).into_tables();
        let weights = InferenceEngine::new(&s)
            .unwrap()
            .parent_marginals(&a)
            .unwrap();
        let decomposed = distance_kl(&a, &b, &weights).unwrap();
        let ja = joint_table(&s, &a);
        let jb = joint_table(&s, &b);
        let joint: f64 = ja
            .iter()
            .zip(&jb)
            .filter(|((_, p), _)| *p > 0.0)
            .map(|((_, p), (_, q))| p * (p / q).ln())
            .sum();
        assert!(
            (decomposed - joint).abs() <= 1e-10 * joint.abs(),
            "trial {trial}: {decomposed} vs {joint}"
        );
    }
}

#[test]
fn chi2_agrees_with_kl_to_second_order() {
    let mut r = rng(15);
    for trial in 0..20 {
        let s = random_structure(&mut r, 5, 4, 2);
        let base = random_theta(&s, trial).into_tables();
        let weights = InferenceEngine::new(&s)
            .unwrap()
            .parent_marginals(&base)
            .unwrap();
        let mut dir = Tables::zeros(&s);
        for (i, j) in base.row_indices() {
            let u: Vec<f64> = (0..s.arity(i))
                .map(|_| r.random::<f64>() * 2.0 - 1.0)
                .collect();
            let mean: f64 = base.row(i, j).iter().zip(&u).map(|(t, u)| t * u).sum();
            for (k, uk) in u.iter().enumerate() {
                dir.set(i, j, k, base.get(i, j, k) * (uk - mean));
            }
        }
        let mut gaps = Vec::new();
        for step in [1e-2, 1e-3, 1e-4] {
            let mut a = base.clone();
            for (x, d) in a.as_mut_slice().iter_mut().zip(dir.as_slice()) {
                *x += step * d;
            }
            let ratio = distance_chi2(&a, &base, &weights).unwrap()
                / distance_kl(&a, &base, &weights).unwrap();
            gaps.push((ratio - 1.0).abs());
        }
        assert!(gaps[2] <= 0.02, "trial {trial}: {gaps:?}");
        assert!(gaps[2] <= gaps[0], "trial {trial}: {gaps:?}");
    }
}

#[test]
fn complete_data_fixpoint_is_invariant() {
    let mut r = rng(16);
    let s = random_structure(&mut r, 5, 2, 2);
    let data = random_data(9, &s, 4000, 1.0);
    let stats = expected_stats(&s, &ParameterVector::uniform(&s), &data).unwrap();
    let freq = em_eta_step(&ParameterVector::uniform(&s), &stats, 1.0).unwrap();
    let stats = expected_stats(&s, &freq, &data).unwrap();
    let (ok, residual) = is_fixpoint(&freq, &stats, 1e-12).unwrap();
    assert!(ok, "residual {residual}");
    for eta in [0.5, 1.0, 1.7] {
        let next = em_eta_step(&freq, &stats, eta).unwrap();
        assert!(next.max_abs_diff(&freq) <= 1e-9);
    }
}

#[test]
fn converged_missing_data_fit_is_a_fixpoint() {
    let mut r = rng(17);
    let s = random_structure(&mut r, 5, 2, 2);
    let data = random_data(3, &s, 400, 0.6);
    let config = FitConfig {
        max_iters: 20_000,
        tol_ll: None,
        tol_param: Some(1e-14),
        init: Init::Random { seed: 4 },
        ..FitConfig::default()
    };
    let result = fit(&s, &data, &config, None).unwrap();
    let (ok, residual) = is_fixpoint(&result.theta, &result.stats, 1e-12).unwrap();
    if ok {
        for eta in [0.5, 1.0, 1.7] {
            let next = em_eta_step(&result.theta, &result.stats, eta).unwrap();
            assert!(next.max_abs_diff(&result.theta) <= 1e-9, "eta {eta}");
        }
    } else {
        assert!(residual < 1e-6, "residual {residual}");
    }
}

#[test]
fn fit_is_bit_reproducible() {
    let mut r = rng(18);
    let s = random_structure(&mut r, 9, 3, 3);
    let data = random_data(3, &s, 1500, 0.7);
    let config = FitConfig {
        init: Init::Random { seed: 99 },
        max_iters: 15,
        ..FitConfig::default()
    };
    let a = fit(&s, &data, &config, None).unwrap();
    let b = fit(&s, &data, &config, None).unwrap();
    assert_eq!(a.theta.as_slice(), b.theta.as_slice());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn duplicated_dataset_has_the_same_statistics() {
    let mut r = rng(19);
    let s = random_structure(&mut r, 6, 3, 2);
    let data = random_data(1, &s, 200, 0.5);
    let doubled = DataSet::new(
        data.cases
            .iter()
            .chain(&data.cases)
            .cloned()
            .collect::<Vec<DataCase>>(),
    );
    let theta = random_theta(&s, 5);
    let a = expected_stats(&s, &theta, &data).unwrap();
    let b = expected_stats(&s, &theta, &doubled).unwrap();
    assert!(a.joint.max_abs_diff(&b.joint) <= 1e-13);
    assert!((a.log_likelihood - b.log_likelihood).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_step_stays_on_the_simplex(seed in any::<u64>(), eta in 0.0f64..3.0) {
        let mut r = rng(seed);
        let s = random_structure(&mut r, 5, 4, 2);
        let theta = random_theta(&s, seed);
        let data = random_data(seed ^ 1, &s, 30, 0.5);
        let stats = expected_stats(&s, &theta, &data).unwrap();
        assert_simplex(&em_eta_step(&theta, &stats, eta).unwrap());
        assert_simplex(&eg_eta_step(&theta, &stats, eta).unwrap());
        assert_simplex(&gp_step(&theta, &gradient(&stats, &theta).unwrap(), eta).unwrap());
        for rule in [UpdateRule::Em, UpdateRule::Eg, UpdateRule::Gp] {
            assert_simplex(&apply_rule(rule, &theta, &stats, eta).unwrap());
        }
    }

    #[test]
    fn em_never_decreases_the_likelihood(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=7);
        let s = random_structure(&mut r, n, 3, 2);
        let data = random_data(seed ^ 2, &s, 60, 0.5);
        let config = FitConfig {
            init: Init::Random { seed },
            max_iters: 40,
            tol_ll: Some(1e-300),
            ..FitConfig::default()
        };
        let result = fit(&s, &data, &config, None).unwrap();
        for w in result.trace.windows(2) {
            prop_assert!(w[1].train_ll >= w[0].train_ll - 1e-12, "{} -> {}", w[0].train_ll, w[1].train_ll);
        }
    }

    #[test]
    fn zero_rate_is_the_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = random_structure(&mut r, 5, 3, 2);
        let theta = random_theta(&s, seed);
        let data = random_data(seed ^ 3, &s, 20, 0.5);
        let stats = expected_stats(&s, &theta, &data).unwrap();
        for rule in [UpdateRule::Em, UpdateRule::Eg, UpdateRule::Gp] {
            let next = apply_rule(rule, &theta, &stats, 0.0).unwrap();
            prop_assert!(next.max_abs_diff(&theta) <= 1e-12);
        }
    }
}
