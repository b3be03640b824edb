//! Monte-Carlo checks against closed-form expectations.

use nnkg_core::eval::{mrr, rank_entities};
use nnkg_core::kg::{EntityId, EntitySet};
use nnkg_core::ops::{Family, Model, ModelConfig};
use nnkg_core::train::sample_negatives;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-entity counts stay within 3σ of the binomial expectation and the
/// chi-square statistic stays below its 99.9% quantile.
fn assert_uniform(answers: &[u32], n: usize, seed: u64) {
    let answers = EntitySet::from_unsorted(answers.iter().copied().map(EntityId).collect());
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; n];
    for e in sample_negatives(&answers, n, draws, &mut rng).unwrap() {
        counts[e.index()] += 1;
    }
    let free = n - answers.len();
    let p = 1.0 / free as f64;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for (e, &c) in counts.iter().enumerate() {
        if answers.contains(EntityId(e as u32)) {
            assert_eq!(c, 0, "answer {e} drawn as a negative");
            continue;
        }
        assert!((c as f64 - expected).abs() <= 3.0 * sigma, "entity {e}: {c} draws, expected {expected:.0} ± {sigma:.0}");
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 99.9% quantiles of chi-square with 7 and 3 degrees of freedom
    let critical = match free - 1 {
        7 => 24.32,
        3 => 16.27,
        df => panic!("no quantile for {df} degrees of freedom"),
    };
    assert!(chi2 < critical, "chi-square {chi2:.2} with {} dof", free - 1);
}

#[test]
fn negatives_are_uniform_outside_the_answers() {
    // few answers: rejection sampling
    assert_uniform(&[0, 1], 10, 11);
    // most entities are answers: drawing from the complement
    assert_uniform(&[0, 1, 2, 4, 5, 7], 10, 12);
}

#[test]
fn random_embeddings_give_harmonic_mrr() {
    let n = 50;
    let queries = 20_000;
    let model = Model::<f64>::new(ModelConfig::new(Family::Mlp, 8), n, 2, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ranks = Vec::with_capacity(queries);
    for _ in 0..queries {
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = EntityId(rng.random_range(0..n as u32));
        let order = rank_entities(&[&q], model.entity_table());
        ranks.push(order.iter().position(|(e, _)| *e == target).unwrap() + 1);
    }
    // rank is uniform on 1..=n, so E[1/rank] = H_n / n
    let mean: f64 = (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64;
    let second: f64 = (1..=n).map(|i| 1.0 / (i * i) as f64).sum::<f64>() / n as f64;
    let sigma = ((second - mean * mean) / queries as f64).sqrt();
    let got = mrr(&ranks).unwrap();
    assert!((got - mean).abs() <= 3.0 * sigma, "MRR {got:.4}, expected {mean:.4} ± {:.4}", 3.0 * sigma);
}
