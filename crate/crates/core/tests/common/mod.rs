#![allow(dead_code)]

use cptlearn::{DataCase, NetworkStructure, ParameterVector, Tables, Variable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random DAG over `n` variables: each variable takes up to `max_parents`
/// parents among the earlier ones.
pub fn random_structure(
    rng: &mut ChaCha8Rng,
    n: usize,
    max_arity: usize,
    max_parents: usize,
) -> NetworkStructure {
    let vars = (0..n)
        .map(|i| Variable::with_arity(format!("V{i}"), rng.random_range(2..=max_arity)).unwrap())
        .collect();
    let parents = (0..n)
        .map(|i| {
            let k = rng.random_range(0..=max_parents.min(i));
            let mut pool: Vec<usize> = (0..i).collect();
            let mut pa = Vec::new();
            for _ in 0..k {
                let idx = rng.random_range(0..pool.len());
                pa.push(pool.swap_remove(idx));
            }
            pa
        })
        .collect();
    NetworkStructure::new(vars, parents).unwrap()
}

pub fn random_case(rng: &mut ChaCha8Rng, s: &NetworkStructure, observe_prob: f64) -> DataCase {
    DataCase::from_values(
        (0..s.len())
            .map(|i| (rng.random::<f64>() < observe_prob).then(|| rng.random_range(0..s.arity(i))))
            .collect(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every joint assignment with its probability, by the chain rule.
pub fn joint_table(s: &NetworkStructure, theta: &Tables) -> Vec<(Vec<usize>, f64)> {
    let n = s.len();
    let mut out = Vec::new();
    let mut x = vec![0usize; n];
    loop {
        let mut p = 1.0;
        for i in 0..n {
            let pa: Vec<usize> = s.parents(i).iter().map(|&q| x[q]).collect();
            let j = s.parent_config_index(i, &pa).unwrap();
            p *= theta.get(i, j, x[i]);
        }
        out.push((x.clone(), p));
        let mut d = n;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            x[d] += 1;
            if x[d] < s.arity(d) {
                break;
            }
            x[d] = 0;
        }
    }
}

pub fn consistent(x: &[usize], case: &DataCase) -> bool {
    x.iter()
        .enumerate()
        .all(|(i, &v)| case.get(i).is_none_or(|o| o == v))
}

/// P(case) and the family posteriors by summing the joint table.
pub fn brute_posteriors(s: &NetworkStructure, theta: &Tables, case: &DataCase) -> (Tables, f64) {
    let mut post = Tables::zeros(s);
    let mut total = 0.0;
    for (x, p) in joint_table(s, theta) {
        if !consistent(&x, case) {
            continue;
        }
        total += p;
        for i in 0..s.len() {
            let pa: Vec<usize> = s.parents(i).iter().map(|&q| x[q]).collect();
            let j = s.parent_config_index(i, &pa).unwrap();
            let v = post.get(i, j, x[i]);
            post.set(i, j, x[i], v + p);
        }
    }
    post.as_mut_slice().iter_mut().for_each(|v| *v /= total);
    (post, total)
}

/// P(case) with raw (possibly unnormalized) tables.
pub fn brute_probability(s: &NetworkStructure, theta: &Tables, case: &DataCase) -> f64 {
    joint_table(s, theta)
        .iter()
        .filter(|(x, _)| consistent(x, case))
        .map(|(_, p)| p)
        .sum()
}

pub fn random_theta(s: &NetworkStructure, seed: u64) -> ParameterVector {
    ParameterVector::random(s, seed)
}
