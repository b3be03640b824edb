//! Seeded synthetic graphs for tests and desk-scale experiments. Generated
//! triples are forward triples: raw relation `r` appears as id `2r`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{build_splits, GraphSplits, Result, Triple};

/// Distinct triples drawn uniformly at random (no self-loops).
pub fn uniform_triples(entities: u32, relations: u32, count: usize, seed: u64) -> Vec<Triple> {
    assert!(entities >= 2 && relations >= 1, "need at least 2 entities and 1 relation");
    let capacity = entities as usize * (entities as usize - 1) * relations as usize;
    let count = count.min(capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let h = rng.random_range(0..entities);
        let t = rng.random_range(0..entities);
        if h == t {
            continue;
        }
        let tr = Triple::new(h, 2 * rng.random_range(0..relations), t);
        if seen.insert(tr) {
            out.push(tr);
        }
    }
    out
}

/// Triples with learnable structure: entities fall into `clusters` equal
/// groups and relation `r` sends group `c` to group `πᵣ(c)` for a fixed random
/// permutation `πᵣ`. Each entity gets an edge under a relation with
/// probability `edge_prob`, to `fanout` random members of the target group.
pub fn clustered_triples(
    entities: u32,
    relations: u32,
    clusters: u32,
    edge_prob: f64,
    fanout: usize,
    seed: u64,
) -> Vec<Triple> {
    assert!(clusters >= 1 && entities >= clusters, "need at least one entity per cluster");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = |e: u32| e % clusters;
    let members: Vec<Vec<u32>> = (0..clusters)
        .map(|c| (0..entities).filter(|e| group(*e) == c).collect())
        .collect();
    let perms: Vec<Vec<u32>> = (0..relations)
        .map(|_| {
            let mut p: Vec<u32> = (0..clusters).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut out = Vec::new();
    for h in 0..entities {
        for r in 0..relations {
            if !rng.random_bool(edge_prob) {
                continue;
            }
            let target = &members[perms[r as usize][group(h) as usize] as usize];
            let mut tails: Vec<u32> = target.choose_multiple(&mut rng, fanout.min(target.len())).copied().collect();
            tails.sort_unstable();
            out.extend(tails.into_iter().map(|t| Triple::new(h, 2 * r, t)));
        }
    }
    out
}

/// Triples on a `rows × (entities / rows)` torus. Entity `e` sits at
/// `(e % rows, e / rows)`; relation `r` moves row `i` to `i + aᵣ` and column
/// `k` to `k + o` for each of `fanout` offsets `o`, all drawn once per
/// relation. Each entity gets its edges under a relation with probability
/// `edge_prob`. Every fact follows the rule, so held-out edges are learnable.
pub fn torus_triples(entities: u32, relations: u32, rows: u32, edge_prob: f64, fanout: usize, seed: u64) -> Vec<Triple> {
    assert!(rows >= 1 && entities.is_multiple_of(rows), "entities must fill the torus");
    let cols = entities / rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_cols: Vec<u32> = (0..cols).collect();
    let rules: Vec<(u32, Vec<u32>)> = (0..relations)
        .map(|_| {
            let shift = rng.random_range(0..rows);
            let mut offs: Vec<u32> = all_cols.choose_multiple(&mut rng, fanout.min(cols as usize)).copied().collect();
            offs.sort_unstable();
            (shift, offs)
        })
        .collect();
    let mut out = Vec::new();
    for h in 0..entities {
        let (i, k) = (h % rows, h / rows);
        for (r, (shift, offs)) in rules.iter().enumerate() {
            if !rng.random_bool(edge_prob) {
                continue;
            }
            let mut tails: Vec<u32> = offs
                .iter()
                .map(|o| (i + shift) % rows + rows * ((k + o) % cols))
                .filter(|t| *t != h)
                .collect();
            tails.sort_unstable();
            out.extend(tails.into_iter().map(|t| Triple::new(h, 2 * r as u32, t)));
        }
    }
    out
}

/// Shuffles and cuts `triples` into train/valid/test lists.
pub fn split_triples(mut triples: Vec<Triple>, valid_frac: f64, test_frac: f64, seed: u64) -> [Vec<Triple>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    triples.shuffle(&mut rng);
    let n = triples.len();
    let n_valid = (n as f64 * valid_frac).round() as usize;
    let n_test = (n as f64 * test_frac).round() as usize;
    let test = triples.split_off(n - n_test);
    let valid = triples.split_off(n - n_test - n_valid);
    [triples, valid, test]
}

/// Nested splits over `entities` and `relations` raw relations.
pub fn splits_from(entities: u32, relations: u32, parts: &[Vec<Triple>; 3]) -> Result<GraphSplits> {
    build_splits(entities as usize, relations as usize, &parts[0], &parts[1], &parts[2])
}

pub const TOY_ENTITIES: u32 = 200;
pub const TOY_RELATIONS: u32 = 20;

/// Train/valid/test triples of the toy benchmark: a 20 × 10 torus, edge
/// probability 0.5, two tails per edge, 10% of facts held out for each of
/// valid and test.
pub fn toy_triples(seed: u64) -> [Vec<Triple>; 3] {
    let triples = torus_triples(TOY_ENTITIES, TOY_RELATIONS, 20, 0.5, 2, seed);
    split_triples(triples, 0.1, 0.1, seed ^ 0x5eed)
}

/// The 200-entity, 20-relation toy benchmark used by the learning tests.
pub fn toy_benchmark(seed: u64) -> Result<GraphSplits> {
    splits_from(TOY_ENTITIES, TOY_RELATIONS, &toy_triples(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_distinct_and_seeded() {
        let a = uniform_triples(30, 4, 200, 3);
        assert_eq!(a.len(), 200);
        let set: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), 200);
        assert_eq!(a, uniform_triples(30, 4, 200, 3));
    }

    #[test]
    fn clustered_respects_groups() {
        let t = clustered_triples(40, 3, 4, 1.0, 2, 1);
        assert_eq!(t.len(), 40 * 3 * 2);
        for r in 0..3 {
            let mut map = std::collections::HashMap::new();
            for tr in t.iter().filter(|x| x.rel.0 == 2 * r) {
                let prev = map.insert(tr.head.0 % 4, tr.tail.0 % 4);
                assert!(prev.is_none() || prev == Some(tr.tail.0 % 4));
            }
        }
    }

    #[test]
    fn torus_follows_rule() {
        let t = torus_triples(40, 3, 4, 1.0, 2, 5);
        for r in 0..3 {
            let mut row_shifts = std::collections::HashSet::new();
            let mut col_shifts = std::collections::HashSet::new();
            for tr in t.iter().filter(|x| x.rel.0 == 2 * r) {
                row_shifts.insert((tr.tail.0 % 4 + 4 - tr.head.0 % 4) % 4);
                col_shifts.insert((tr.tail.0 / 4 + 10 - tr.head.0 / 4) % 10);
            }
            assert_eq!(row_shifts.len(), 1);
            assert!(col_shifts.len() <= 2);
        }
    }

    #[test]
    fn split_sizes() {
        let [a, b, c] = split_triples(uniform_triples(20, 2, 100, 0), 0.1, 0.2, 0);
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
    }
}
