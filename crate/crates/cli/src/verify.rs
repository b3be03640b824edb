//! Re-derives query answers by scanning the edge list, without the adjacency
//! index the sampler uses. `generate --verify` compares every emitted line
//! against it.

use std::collections::BTreeSet;

use nnkg_core::kg::{GraphSplits, KnowledgeGraph, Split, Triple};
use nnkg_core::query::Query;
use nnkg_core::sampler::QuerySample;

pub struct EdgeList {
    edges: Vec<Triple>,
    entity_count: u32,
}

impl EdgeList {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        EdgeList {
            edges: graph.triples().collect(),
            entity_count: graph.entity_count() as u32,
        }
    }

    pub fn answers(&self, q: &Query) -> BTreeSet<u32> {
        match q {
            Query::Anchor(e) => BTreeSet::from([e.0]),
            Query::Project(child, r) => {
                let from = self.answers(child);
                self.edges
                    .iter()
                    .filter(|t| t.rel == *r && from.contains(&t.head.0))
                    .map(|t| t.tail.0)
                    .collect()
            }
            Query::Intersect(children) => {
                let mut sets = children.iter().map(|c| self.answers(c));
                let first = sets.next().unwrap_or_default();
                sets.fold(first, |acc, s| acc.intersection(&s).copied().collect())
            }
            Query::Union(children) => children.iter().flat_map(|c| self.answers(c)).collect(),
            Query::Negate(child) => {
                let inner = self.answers(child);
                (0..self.entity_count).filter(|e| !inner.contains(e)).collect()
            }
        }
    }
}

/// Checks the three stored answer sets of every sample; returns the 1-based
/// line numbers that disagree.
pub fn mismatches(splits: &GraphSplits, samples: &[QuerySample]) -> Vec<usize> {
    let lists = Split::ALL.map(|s| (s, EdgeList::new(splits.graph(s))));
    samples
        .iter()
        .enumerate()
        .filter(|(_, sample)| {
            lists.iter().any(|(split, list)| {
                let stored: BTreeSet<u32> = sample.answers(*split).iter().map(|e| e.0).collect();
                stored != list.answers(sample.query.root())
            })
        })
        .map(|(i, _)| i + 1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nnkg_core::kg::build_splits;
    use nnkg_core::query::parse_query;

    #[test]
    fn flags_a_tampered_answer_set() {
        let t = |h, r, t| Triple::new(h, r, t);
        let splits = build_splits(4, 1, &[t(0, 0, 1)], &[t(0, 0, 2)], &[t(3, 0, 2)]).unwrap();
        let q = parse_query("(p 0 (e 0))").unwrap();
        let good = QuerySample::from_splits(q, &splits);
        assert!(mismatches(&splits, std::slice::from_ref(&good)).is_empty());
        let inv = parse_query("(p 1 (e 2))").unwrap();
        let inv = QuerySample::from_splits(inv, &splits);
        assert_eq!(EdgeList::new(&splits.test).answers(inv.query.root()), BTreeSet::from([0, 3]));

        let mut line = good.to_line();
        line = line.replacen("1,2", "1", 1);
        let bad = QuerySample::from_line(&line, 1).unwrap();
        assert_eq!(mismatches(&splits, &[good, bad]), vec![2]);
    }
}
