mod common;

use common::*;
use cptlearn::estimation::{em_eta_step_unclamped, expected_stats};
use cptlearn::harness::{builtin_network, forward_sample, obscure, MissingnessSpec};
use cptlearn::inference::InferenceEngine;
use cptlearn::online::{online_eg_step, online_em_step, online_gp_step, run_stream, OnlineState};
use cptlearn::{DataSet, ParameterVector, Schedule, Tables, UpdateRule, EPS_FLOOR};
use proptest::prelude::*;

fn frequencies(s: &cptlearn::NetworkStructure, data: &DataSet) -> Tables {
    let mut counts = Tables::zeros(s);
    for case in &data.cases {
        let x = case.as_complete().unwrap();
        for i in 0..s.len() {
            let pa: Vec<usize> = s.parents(i).iter().map(|&q| x[q]).collect();
            let j = s.parent_config_index(i, &pa).unwrap();
            counts.set(i, j, x[i], counts.get(i, j, x[i]) + 1.0);
        }
    }
    counts
}

#[test]
fn per_row_schedule_reproduces_conditional_frequencies() {
    let mut r = rng(21);
    for trial in 0..10 {
        let s = random_structure(&mut r, 6, 3, 2);
        let data = DataSet::new((0..400).map(|_| random_case(&mut r, &s, 1.0)).collect());
        let initial = random_theta(&s, trial);
        let (state, trace) =
            run_stream(&s, initial, &data.cases, UpdateRule::Em, &Schedule::PerRow).unwrap();
        assert_eq!(trace.len(), 400);
        let counts = frequencies(&s, &data);
        for (i, j) in counts.row_indices() {
            let n: f64 = counts.row(i, j).iter().sum();
            if n == 0.0 {
                continue;
            }
            assert_eq!(state.visits()[i][j], n);
            for k in 0..s.arity(i) {
                let f = counts.get(i, j, k) / n;
                assert!(
                    (state.estimate().get(i, j, k) - f).abs() <= 1e-12,
                    "trial {trial} row ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn repeated_stream_matches_batch_em_fixpoint() {
    let net = builtin_network("tree8").unwrap();
    let s = &net.structure;
    let data = DataSet::new(forward_sample(&net, 2000, 5));
    let twice: Vec<_> = data.cases.iter().chain(&data.cases).cloned().collect();
    let uniform = ParameterVector::uniform(s);
    let (state, _) = run_stream(
        s,
        uniform.clone(),
        &twice,
        UpdateRule::Em,
        &Schedule::PerRow,
    )
    .unwrap();
    let stats = expected_stats(s, &uniform, &data).unwrap();
    let batch = em_eta_step_unclamped(&uniform, &stats, 1.0).unwrap();
    assert!(state.estimate().max_abs_diff(&batch) <= 1e-12);
}

#[test]
fn fixed_rate_improves_fit_on_a_stationary_stream() {
    let net = builtin_network("tree8").unwrap();
    let s = &net.structure;
    let spec = MissingnessSpec {
        hidden: vec![],
        obscure_prob: 0.2,
        seed: 8,
    };
    let cases = obscure(s, &forward_sample(&net, 5000, 7), &spec).unwrap();
    // Gradient projection is left out: its instantaneous gradient grows like 1/θ.
    for (rule, eta) in [(UpdateRule::Em, 0.02), (UpdateRule::Eg, 0.002)] {
        let (_, trace) = run_stream(
            s,
            ParameterVector::uniform(s),
            &cases,
            rule,
            &Schedule::Fixed(eta),
        )
        .unwrap();
        let quartile = |q: usize| {
            let part = &trace[q * 1250..(q + 1) * 1250];
            part.iter().map(|r| r.case_ll.unwrap()).sum::<f64>() / part.len() as f64
        };
        assert!(
            quartile(3) >= quartile(0),
            "{rule}: {} -> {}",
            quartile(0),
            quartile(3)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn steps_keep_the_model_on_the_simplex(seed in any::<u64>(), eta in 0.01f64..2.0, which in 0usize..3) {
        let mut r = rng(seed);
        let s = random_structure(&mut r, 5, 3, 2);
        let engine = InferenceEngine::new(&s).unwrap();
        let schedule = [Schedule::Fixed(eta), Schedule::InverseT { c: eta, t0: 1.0 }, Schedule::PerRow][which];
        let mut states = [0, 1, 2].map(|_| OnlineState::new(random_theta(&s, seed)));
        for t in 0..20u64 {
            let case = random_case(&mut r, &s, 0.5);
            online_em_step(&engine, &mut states[0], &case, &schedule).unwrap();
            online_eg_step(&engine, &mut states[1], &case, &schedule).unwrap();
            online_gp_step(&engine, &mut states[2], &case, &schedule).unwrap();
            for st in &states {
                prop_assert_eq!(st.t(), t + 1);
                for (i, j) in st.theta().row_indices() {
                    let row = st.theta().row(i, j);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    prop_assert!(row.iter().all(|&x| x >= EPS_FLOOR));
                }
            }
        }
    }

    #[test]
    fn vanishing_rate_is_the_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = random_structure(&mut r, 5, 3, 2);
        let engine = InferenceEngine::new(&s).unwrap();
        let theta = random_theta(&s, seed);
        // Online schedules need a positive rate, so the smallest one stands in for zero.
        let schedule = Schedule::Fixed(f64::MIN_POSITIVE);
        let case = random_case(&mut r, &s, 0.6);
        for step in [online_em_step, online_eg_step, online_gp_step] {
            let mut st = OnlineState::new(theta.clone());
            step(&engine, &mut st, &case, &schedule).unwrap();
            prop_assert!(st.theta().max_abs_diff(&theta) <= 1e-12);
        }
    }
}
