mod common;

use std::collections::HashMap;

use common::*;
use cptlearn::estimation::{fit, FitConfig, Init};
use cptlearn::harness::{
    builtin_network, evaluate, forward_sample, obscure, run_experiment, ArmSpec, ExperimentConfig,
    MissingnessSpec,
};
use cptlearn::netio::{
    dataset_to_string, load_dataset, parse_network, read_network, serialize_network,
};
use cptlearn::{DataSet, Network, NetworkStructure, UpdateRule, Variable};

/// Total variation between the sampled and enumerated joints, and its
/// expected value under pure sampling noise.
fn sampled_tv(s: &NetworkStructure, seed: u64, n: usize) -> (f64, f64) {
    let net = Network::new("random", s.clone(), random_theta(s, seed)).unwrap();
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for case in forward_sample(&net, n, seed) {
        *counts.entry(case.as_complete().unwrap()).or_default() += 1;
    }
    let table = joint_table(s, &net.theta);
    let tv = table
        .iter()
        .map(|(x, p)| (counts.get(x).copied().unwrap_or(0) as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    let noise = table
        .iter()
        .map(|(_, p)| (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n as f64)).sqrt())
        .sum::<f64>()
        / 2.0;
    (tv, noise)
}

#[test]
fn sampler_matches_the_enumerated_joint() {
    let mut r = rng(31);
    for trial in 0..5 {
        let s = random_structure(&mut r, 6, 2, 2);
        let (tv, _) = sampled_tv(&s, trial, 200_000);
        assert!(tv <= 0.01, "trial {trial}: total variation {tv}");
    }
}

#[test]
fn sampler_error_on_large_joints_is_sampling_noise() {
    let mut r = rng(32);
    for trial in 0..3 {
        let s = random_structure(&mut r, 12, 2, 3);
        assert_eq!(s.joint_state_count(), 1 << 12);
        let (tv, noise) = sampled_tv(&s, 10 + trial, 200_000);
        assert!(
            tv <= 1.2 * noise,
            "trial {trial}: total variation {tv}, expected noise {noise}"
        );
    }
}

#[test]
fn obscure_fraction_is_binomial() {
    let vars = (0..37)
        .map(|i| Variable::with_arity(format!("V{i}"), 2).unwrap())
        .collect();
    let s = NetworkStructure::new(vars, vec![vec![]; 37]).unwrap();
    let cases = forward_sample(
        &Network::new("flat", s.clone(), random_theta(&s, 0)).unwrap(),
        2000,
        1,
    );
    let spec = MissingnessSpec {
        hidden: vec!["V0".into(), "V5".into()],
        obscure_prob: 0.2,
        seed: 9,
    };
    let out = DataSet::new(obscure(&s, &cases, &spec).unwrap());
    let open: Vec<usize> = (0..37).filter(|&i| i != 0 && i != 5).collect();
    let fraction = out.missing_fraction(&open);
    assert!((fraction - 0.2).abs() <= 0.01, "{fraction}");
    assert_eq!(out.missing_fraction(&[0, 5]), 1.0);
}

#[test]
fn missingness_ignores_the_values() {
    let net = builtin_network("tree8").unwrap();
    let s = &net.structure;
    let other = Network::new("other", s.clone(), random_theta(s, 77)).unwrap();
    let spec = MissingnessSpec {
        hidden: vec!["X2".into()],
        obscure_prob: 0.35,
        seed: 4,
    };
    let a = obscure(s, &forward_sample(&net, 500, 1), &spec).unwrap();
    let b = obscure(s, &forward_sample(&other, 500, 2), &spec).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for i in 0..s.len() {
            assert_eq!(x.get(i).is_none(), y.get(i).is_none());
        }
    }
}

#[test]
fn learning_from_plenty_of_complete_data_recovers_queries() {
    let truth = builtin_network("chain3").unwrap();
    let s = &truth.structure;
    let train = DataSet::new(forward_sample(&truth, 50_000, 3));
    let config = FitConfig {
        init: Init::Random { seed: 1 },
        ..FitConfig::default()
    };
    let learned = truth
        .with_theta(fit(s, &train, &config, None).unwrap().theta)
        .unwrap();
    let spec = MissingnessSpec {
        hidden: vec![],
        obscure_prob: 0.3,
        seed: 6,
    };
    let test = DataSet::new(obscure(s, &forward_sample(&truth, 2000, 4), &spec).unwrap());
    let report = evaluate(&learned, &truth, &test, &["C".into()]).unwrap();
    assert!(report.mean_absolute < 0.01, "{}", report.mean_absolute);
}

#[test]
fn dataset_text_round_trips() {
    let net = builtin_network("twolayer15").unwrap();
    let s = &net.structure;
    let spec = MissingnessSpec {
        hidden: vec!["H0".into()],
        obscure_prob: 0.3,
        seed: 2,
    };
    let cases = obscure(s, &forward_sample(&net, 1234, 5), &spec).unwrap();
    let text = dataset_to_string(s, &cases);
    assert_eq!(text.lines().count(), 1235);
    let back = load_dataset(&text, s).unwrap();
    assert_eq!(back.cases, cases);
}

#[test]
fn networks_round_trip_through_text() {
    for name in ["chain3", "tree8", "twolayer15"] {
        let net = builtin_network(name).unwrap();
        let back = parse_network(&serialize_network(&net)).unwrap();
        assert_eq!(back.structure, net.structure);
        assert!(back.theta.max_abs_diff(&net.theta) <= 1e-15);
    }
}

fn small_experiment(init: &str) -> ExperimentConfig {
    ExperimentConfig {
        network: "builtin:tree8".into(),
        train_size: 300,
        test_size: 100,
        hidden: vec!["X1".into()],
        obscure_prob: 0.2,
        seed: 5,
        init: init.into(),
        max_iters: 2000,
        tol_ll: Some(1e-6),
        tol_param: None,
        warm_start_em1: false,
        targets: vec!["X7".into()],
        arms: vec![
            ArmSpec {
                name: None,
                rule: UpdateRule::Em,
                eta: 1.0,
            },
            ArmSpec {
                name: None,
                rule: UpdateRule::Em,
                eta: 0.0,
            },
            ArmSpec {
                name: Some("eg".into()),
                rule: UpdateRule::Eg,
                eta: 0.5,
            },
        ],
    }
}

#[test]
fn experiment_arms_share_data_and_zero_rate_stands_still() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&small_experiment("random"), dir.path(), dir.path()).unwrap();
    assert_eq!(summary.arms.len(), 3);
    for arm in &summary.arms {
        assert_eq!(arm.train_sha256, summary.train_sha256);
        assert_eq!(arm.test_sha256, summary.test_sha256);
        assert!(arm.errors.is_some());
        assert!(dir.path().join(format!("{}.trace.csv", arm.name)).exists());
    }
    let still = summary.arms.iter().find(|a| a.name == "em_0").unwrap();
    assert_eq!(still.total_param_delta, 0.0);
    let moving = summary.arms.iter().find(|a| a.name == "em_1").unwrap();
    assert!(moving.total_param_delta > 0.0);
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn learned_network_serves_as_initialization() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small_experiment("random"), dir.path(), dir.path()).unwrap();
    let learned = read_network(dir.path().join("em_1.learned.json")).unwrap();
    let second = dir.path().join("second");
    let summary = run_experiment(
        &small_experiment("file:em_1.learned.json"),
        dir.path(),
        &second,
    )
    .unwrap();
    let em = summary.arms.iter().find(|a| a.name == "em_1").unwrap();
    assert!(
        em.iterations <= 3,
        "{} iterations from a converged start",
        em.iterations
    );
    assert_eq!(
        learned.structure,
        builtin_network("tree8").unwrap().structure
    );
}
