//! Brute-force query evaluation by linear scans over a forward triple list.
//! Deliberately shares nothing with the library's adjacency index.

use std::collections::BTreeSet;

use nnkg_core::kg::Triple;
use nnkg_core::query::Query;

pub type Answers = BTreeSet<u32>;

/// Answers of `q` on the graph whose forward triples are `triples`; odd
/// relation ids traverse forward triples backwards.
pub fn answers(triples: &[Triple], entity_count: usize, q: &Query) -> Answers {
    match q {
        Query::Anchor(e) => BTreeSet::from([e.0]),
        Query::Project(child, r) => {
            let from = answers(triples, entity_count, child);
            let mut out = BTreeSet::new();
            for t in triples {
                if r.0 % 2 == 0 && t.rel.0 == r.0 && from.contains(&t.head.0) {
                    out.insert(t.tail.0);
                }
                if r.0 % 2 == 1 && t.rel.0 == r.0 - 1 && from.contains(&t.tail.0) {
                    out.insert(t.head.0);
                }
            }
            out
        }
        Query::Intersect(children) => {
            let mut sets = children.iter().map(|c| answers(triples, entity_count, c));
            let first = sets.next().unwrap_or_default();
            sets.fold(first, |acc, s| acc.intersection(&s).copied().collect())
        }
        Query::Union(children) => children.iter().flat_map(|c| answers(triples, entity_count, c)).collect(),
        Query::Negate(child) => {
            let inner = answers(triples, entity_count, child);
            (0..entity_count as u32).filter(|e| !inner.contains(e)).collect()
        }
    }
}

/// The nested forward triple lists of the three splits.
pub fn nested(parts: &[Vec<Triple>; 3]) -> [Vec<Triple>; 3] {
    let train = parts[0].clone();
    let mut valid = train.clone();
    valid.extend_from_slice(&parts[1]);
    let mut test = valid.clone();
    test.extend_from_slice(&parts[2]);
    [train, valid, test]
}
