//! Query computation trees, the fourteen named structures, DNF rewriting,
//! the s-expression text format and exact answer evaluation.
//!
//! Text grammar, one query per line:
//!
//! ```text
//! expr := (e <int>) | (p <int> expr) | (i expr expr [expr]) | (u expr expr) | (n expr)
//! ```

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::kg::{EntityId, EntitySet, KnowledgeGraph, RelationId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("universal quantification is not supported (byte {offset})")]
    UniversalQuantifier { offset: usize },
    #[error("query does not match any supported structure: {0}")]
    UnsupportedShape(String),
    #[error("structure {structure} expects {anchors} anchors and {relations} relations, got {got_anchors} and {got_relations}")]
    Arity {
        structure: QueryStructure,
        anchors: usize,
        relations: usize,
        got_anchors: usize,
        got_relations: usize,
    },
    #[error("union below a negation cannot be rewritten to DNF")]
    UnionUnderNegation,
    #[error("unknown query structure `{0}`")]
    UnknownStructure(String),
    #[error("{kind} id {id} out of range (count {count})")]
    IdOutOfRange {
        kind: &'static str,
        id: u32,
        count: usize,
    },
}

pub type Result<T, E = QueryError> = std::result::Result<T, E>;

/// A node of the computation tree; the root is the query target.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Query {
    Anchor(EntityId),
    Project(Box<Query>, RelationId),
    Intersect(Vec<Query>),
    Negate(Box<Query>),
    Union(Vec<Query>),
}

fn anchor(e: EntityId) -> Query {
    Query::Anchor(e)
}

fn project(child: Query, r: RelationId) -> Query {
    Query::Project(Box::new(child), r)
}

fn negate(child: Query) -> Query {
    Query::Negate(Box::new(child))
}

impl Query {
    /// Anchors in post-order, left to right.
    pub fn anchors(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        self.visit_post(&mut |q| {
            if let Query::Anchor(e) = q {
                out.push(*e);
            }
        });
        out
    }

    /// Relations in the order they are applied (post-order).
    pub fn relations(&self) -> Vec<RelationId> {
        let mut out = Vec::new();
        self.visit_post(&mut |q| {
            if let Query::Project(_, r) = q {
                out.push(*r);
            }
        });
        out
    }

    fn visit_post<F: FnMut(&Query)>(&self, f: &mut F) {
        match self {
            Query::Anchor(_) => {}
            Query::Project(c, _) | Query::Negate(c) => c.visit_post(f),
            Query::Intersect(cs) | Query::Union(cs) => cs.iter().for_each(|c| c.visit_post(f)),
        }
        f(self);
    }

    pub fn contains_union(&self) -> bool {
        match self {
            Query::Anchor(_) => false,
            Query::Project(c, _) | Query::Negate(c) => c.contains_union(),
            Query::Intersect(cs) => cs.iter().any(Query::contains_union),
            Query::Union(_) => true,
        }
    }

    pub fn contains_negation(&self) -> bool {
        match self {
            Query::Anchor(_) => false,
            Query::Negate(_) => true,
            Query::Project(c, _) => c.contains_negation(),
            Query::Intersect(cs) | Query::Union(cs) => cs.iter().any(Query::contains_negation),
        }
    }

    /// Serialization with ids erased, e.g. `(p (p (e)))`.
    pub fn shape(&self) -> String {
        let mut s = String::new();
        self.write_shape(&mut s);
        s
    }

    fn write_shape(&self, s: &mut String) {
        match self {
            Query::Anchor(_) => s.push_str("(e)"),
            Query::Project(c, _) => {
                s.push_str("(p ");
                c.write_shape(s);
                s.push(')');
            }
            Query::Negate(c) => {
                s.push_str("(n ");
                c.write_shape(s);
                s.push(')');
            }
            Query::Intersect(cs) | Query::Union(cs) => {
                s.push_str(if matches!(self, Query::Intersect(_)) { "(i" } else { "(u" });
                for c in cs {
                    s.push(' ');
                    c.write_shape(s);
                }
                s.push(')');
            }
        }
    }

    /// Copy with intersection and union children sorted by `(shape, text)`,
    /// so the order-dependent intersection fold sees one order per query.
    pub fn canonical(&self) -> Query {
        match self {
            Query::Anchor(e) => anchor(*e),
            Query::Project(c, r) => project(c.canonical(), *r),
            Query::Negate(c) => negate(c.canonical()),
            Query::Intersect(cs) => Query::Intersect(sort_children(cs)),
            Query::Union(cs) => Query::Union(sort_children(cs)),
        }
    }

    /// Rewrites to a disjunction of union-free conjuncts.
    pub fn to_dnf(&self) -> Result<Vec<Query>> {
        Ok(match self {
            Query::Anchor(e) => vec![anchor(*e)],
            Query::Project(c, r) => c.to_dnf()?.into_iter().map(|c| project(c, *r)).collect(),
            Query::Negate(c) => {
                let mut inner = c.to_dnf()?;
                if inner.len() != 1 {
                    return Err(QueryError::UnionUnderNegation);
                }
                vec![negate(inner.pop().expect("one conjunct"))]
            }
            Query::Union(cs) => {
                let mut out = Vec::new();
                for c in cs {
                    out.extend(c.to_dnf()?);
                }
                out
            }
            Query::Intersect(cs) => {
                let mut acc: Vec<Vec<Query>> = vec![Vec::new()];
                for c in cs {
                    let alts = c.to_dnf()?;
                    let mut next = Vec::with_capacity(acc.len() * alts.len());
                    for prefix in &acc {
                        for alt in &alts {
                            let mut v = prefix.clone();
                            v.push(alt.clone());
                            next.push(v);
                        }
                    }
                    acc = next;
                }
                acc.into_iter().map(Query::Intersect).collect()
            }
        })
    }

    pub fn validate(&self, entity_count: usize, relation_count: usize) -> Result<()> {
        for e in self.anchors() {
            if e.index() >= entity_count {
                return Err(QueryError::IdOutOfRange {
                    kind: "entity",
                    id: e.0,
                    count: entity_count,
                });
            }
        }
        for r in self.relations() {
            if r.index() >= relation_count {
                return Err(QueryError::IdOutOfRange {
                    kind: "relation",
                    id: r.0,
                    count: relation_count,
                });
            }
        }
        Ok(())
    }
}

fn sort_children(cs: &[Query]) -> Vec<Query> {
    let mut keyed: Vec<(String, String, Query)> = cs
        .iter()
        .map(|c| {
            let c = c.canonical();
            (c.shape(), c.to_string(), c)
        })
        .collect();
    keyed.sort_by(|a, b| match a.0.cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    keyed.into_iter().map(|(_, _, c)| c).collect()
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Anchor(e) => write!(f, "(e {})", e.0),
            Query::Project(c, r) => write!(f, "(p {} {c})", r.0),
            Query::Negate(c) => write!(f, "(n {c})"),
            Query::Intersect(cs) | Query::Union(cs) => {
                f.write_str(if matches!(self, Query::Intersect(_)) { "(i" } else { "(u" })?;
                for c in cs {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// The fourteen named query shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueryStructure {
    P1,
    P2,
    P3,
    I2,
    I3,
    Ip,
    Pi,
    U2,
    Up,
    In2,
    In3,
    Inp,
    Pin,
    Pni,
}

impl QueryStructure {
    pub const ALL: [QueryStructure; 14] = [
        QueryStructure::P1,
        QueryStructure::P2,
        QueryStructure::P3,
        QueryStructure::I2,
        QueryStructure::I3,
        QueryStructure::Ip,
        QueryStructure::Pi,
        QueryStructure::U2,
        QueryStructure::Up,
        QueryStructure::In2,
        QueryStructure::In3,
        QueryStructure::Inp,
        QueryStructure::Pin,
        QueryStructure::Pni,
    ];

    /// Existential positive structures used for training.
    pub const EPFO_TRAIN: [QueryStructure; 5] = [
        QueryStructure::P1,
        QueryStructure::P2,
        QueryStructure::P3,
        QueryStructure::I2,
        QueryStructure::I3,
    ];

    pub const NEGATION: [QueryStructure; 5] = [
        QueryStructure::In2,
        QueryStructure::In3,
        QueryStructure::Inp,
        QueryStructure::Pin,
        QueryStructure::Pni,
    ];

    pub const EPFO: [QueryStructure; 9] = [
        QueryStructure::P1,
        QueryStructure::P2,
        QueryStructure::P3,
        QueryStructure::I2,
        QueryStructure::I3,
        QueryStructure::Ip,
        QueryStructure::Pi,
        QueryStructure::U2,
        QueryStructure::Up,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            QueryStructure::P1 => "1p",
            QueryStructure::P2 => "2p",
            QueryStructure::P3 => "3p",
            QueryStructure::I2 => "2i",
            QueryStructure::I3 => "3i",
            QueryStructure::Ip => "ip",
            QueryStructure::Pi => "pi",
            QueryStructure::U2 => "2u",
            QueryStructure::Up => "up",
            QueryStructure::In2 => "2in",
            QueryStructure::In3 => "3in",
            QueryStructure::Inp => "inp",
            QueryStructure::Pin => "pin",
            QueryStructure::Pni => "pni",
        }
    }

    /// `(anchor count, relation count)`.
    pub fn arity(self) -> (usize, usize) {
        match self {
            QueryStructure::P1 => (1, 1),
            QueryStructure::P2 => (1, 2),
            QueryStructure::P3 => (1, 3),
            QueryStructure::I2 | QueryStructure::U2 | QueryStructure::In2 => (2, 2),
            QueryStructure::I3 | QueryStructure::In3 => (3, 3),
            QueryStructure::Ip
            | QueryStructure::Pi
            | QueryStructure::Up
            | QueryStructure::Inp
            | QueryStructure::Pin
            | QueryStructure::Pni => (2, 3),
        }
    }

    pub fn has_union(self) -> bool {
        matches!(self, QueryStructure::U2 | QueryStructure::Up)
    }

    pub fn has_negation(self) -> bool {
        QueryStructure::NEGATION.contains(&self)
    }

    /// Tree for this structure with the given anchors and relations, both
    /// listed in post-order.
    fn assemble(self, a: &[EntityId], r: &[RelationId]) -> Query {
        let p1 = |e: EntityId, r0: RelationId| project(anchor(e), r0);
        match self {
            QueryStructure::P1 => p1(a[0], r[0]),
            QueryStructure::P2 => project(p1(a[0], r[0]), r[1]),
            QueryStructure::P3 => project(project(p1(a[0], r[0]), r[1]), r[2]),
            QueryStructure::I2 => Query::Intersect(vec![p1(a[0], r[0]), p1(a[1], r[1])]),
            QueryStructure::I3 => {
                Query::Intersect(vec![p1(a[0], r[0]), p1(a[1], r[1]), p1(a[2], r[2])])
            }
            QueryStructure::Ip => {
                project(Query::Intersect(vec![p1(a[0], r[0]), p1(a[1], r[1])]), r[2])
            }
            QueryStructure::Pi => {
                Query::Intersect(vec![project(p1(a[0], r[0]), r[1]), p1(a[1], r[2])])
            }
            QueryStructure::U2 => Query::Union(vec![p1(a[0], r[0]), p1(a[1], r[1])]),
            QueryStructure::Up => project(Query::Union(vec![p1(a[0], r[0]), p1(a[1], r[1])]), r[2]),
            QueryStructure::In2 => Query::Intersect(vec![p1(a[0], r[0]), negate(p1(a[1], r[1]))]),
            QueryStructure::In3 => Query::Intersect(vec![
                p1(a[0], r[0]),
                p1(a[1], r[1]),
                negate(p1(a[2], r[2])),
            ]),
            QueryStructure::Inp => project(
                Query::Intersect(vec![p1(a[0], r[0]), negate(p1(a[1], r[1]))]),
                r[2],
            ),
            QueryStructure::Pin => Query::Intersect(vec![
                project(p1(a[0], r[0]), r[1]),
                negate(p1(a[1], r[2])),
            ]),
            QueryStructure::Pni => Query::Intersect(vec![
                negate(project(p1(a[0], r[0]), r[1])),
                p1(a[1], r[2]),
            ]),
        }
    }

    fn template(self) -> Query {
        let (na, nr) = self.arity();
        self.assemble(&vec![EntityId(0); na], &vec![RelationId(0); nr])
    }

    /// Matches a tree against the fourteen shapes, returning the structure and
    /// the tree with intersection/union children reordered to the structure's
    /// layout.
    pub fn detect(root: &Query) -> Option<(QueryStructure, Query)> {
        QueryStructure::ALL
            .iter()
            .find_map(|s| align(&s.template(), root).map(|q| (*s, q)))
    }
}

/// `q` reordered to follow `template`'s child order, if the shapes agree.
fn align(template: &Query, q: &Query) -> Option<Query> {
    match (template, q) {
        (Query::Anchor(_), Query::Anchor(e)) => Some(anchor(*e)),
        (Query::Project(tc, _), Query::Project(c, r)) => Some(project(align(tc, c)?, *r)),
        (Query::Negate(tc), Query::Negate(c)) => Some(negate(align(tc, c)?)),
        (Query::Intersect(ts), Query::Intersect(cs)) => align_children(ts, cs).map(Query::Intersect),
        (Query::Union(ts), Query::Union(cs)) => align_children(ts, cs).map(Query::Union),
        _ => None,
    }
}

fn align_children(ts: &[Query], cs: &[Query]) -> Option<Vec<Query>> {
    if ts.len() != cs.len() {
        return None;
    }
    let mut used = vec![false; cs.len()];
    let mut out = Vec::with_capacity(ts.len());
    fn go(ts: &[Query], cs: &[Query], used: &mut [bool], out: &mut Vec<Query>) -> bool {
        let Some(t) = ts.get(out.len()) else {
            return true;
        };
        for i in 0..cs.len() {
            if used[i] {
                continue;
            }
            if let Some(aligned) = align(t, &cs[i]) {
                used[i] = true;
                out.push(aligned);
                if go(ts, cs, used, out) {
                    return true;
                }
                out.pop();
                used[i] = false;
            }
        }
        false
    }
    go(ts, cs, &mut used, &mut out).then_some(out)
}

impl fmt::Display for QueryStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for QueryStructure {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self> {
        QueryStructure::ALL
            .iter()
            .copied()
            .find(|q| q.tag() == s)
            .ok_or_else(|| QueryError::UnknownStructure(s.to_string()))
    }
}

/// A query tree known to have one of the fourteen shapes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryInstance {
    structure: QueryStructure,
    root: Query,
}

impl QueryInstance {
    pub fn structure(&self) -> QueryStructure {
        self.structure
    }

    pub fn root(&self) -> &Query {
        &self.root
    }

    pub fn anchors(&self) -> Vec<EntityId> {
        self.root.anchors()
    }

    pub fn relations(&self) -> Vec<RelationId> {
        self.root.relations()
    }

    /// Wraps an arbitrary tree after checking it has a supported shape.
    pub fn from_root(root: Query) -> Result<Self> {
        let (structure, root) = QueryStructure::detect(&root)
            .ok_or_else(|| QueryError::UnsupportedShape(root.to_string()))?;
        Ok(QueryInstance { structure, root })
    }

    pub fn to_dnf(&self) -> Result<DnfQuery> {
        Ok(DnfQuery {
            conjuncts: self.root.to_dnf()?,
        })
    }
}

impl fmt::Display for QueryInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

pub fn build_structure(
    structure: QueryStructure,
    anchors: &[EntityId],
    relations: &[RelationId],
) -> Result<QueryInstance> {
    let (na, nr) = structure.arity();
    if anchors.len() != na || relations.len() != nr {
        return Err(QueryError::Arity {
            structure,
            anchors: na,
            relations: nr,
            got_anchors: anchors.len(),
            got_relations: relations.len(),
        });
    }
    Ok(QueryInstance {
        structure,
        root: structure.assemble(anchors, relations),
    })
}

/// Disjunction of union-free conjuncts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnfQuery {
    pub conjuncts: Vec<Query>,
}

pub fn to_dnf(query: &QueryInstance) -> Result<DnfQuery> {
    query.to_dnf()
}

/// Exact answer set of `query` on `graph`, evaluated bottom-up.
pub fn ground_truth_answers(graph: &KnowledgeGraph, query: &Query) -> EntitySet {
    match query {
        Query::Anchor(e) => EntitySet::from_unsorted(vec![*e]),
        Query::Project(c, r) => {
            let src = ground_truth_answers(graph, c);
            let mut out = Vec::new();
            for e in src.iter() {
                out.extend_from_slice(graph.neighbors(e, *r));
            }
            EntitySet::from_unsorted(out)
        }
        Query::Intersect(cs) => {
            let mut it = cs.iter().map(|c| ground_truth_answers(graph, c));
            let first = it.next().unwrap_or_default();
            it.fold(first, |acc, s| acc.intersection(&s))
        }
        Query::Negate(c) => ground_truth_answers(graph, c).complement(graph.entity_count()),
        Query::Union(cs) => cs
            .iter()
            .map(|c| ground_truth_answers(graph, c))
            .fold(EntitySet::new(), |acc, s| acc.union(&s)),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(QueryError::Syntax {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&b) {
            self.pos += 1;
            Ok(())
        } else if self.pos >= self.src.len() {
            self.err(format!("unexpected end of input, expected `{}`", b as char))
        } else {
            self.err(format!("expected `{}`", b as char))
        }
    }

    fn word(&mut self) -> (usize, &'a str) {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_whitespace() || c == b'(' || c == b')' {
                break;
            }
            self.pos += 1;
        }
        (start, std::str::from_utf8(&self.src[start..self.pos]).unwrap_or(""))
    }

    fn int(&mut self) -> Result<u32> {
        let (start, w) = self.word();
        w.parse().map_err(|_| QueryError::Syntax {
            offset: start,
            message: if w.is_empty() {
                "expected an integer id".into()
            } else {
                format!("`{w}` is not a valid id")
            },
        })
    }

    fn peek_close(&mut self) -> bool {
        self.skip_ws();
        self.src.get(self.pos) == Some(&b')')
    }

    fn expr(&mut self) -> Result<Query> {
        self.expect(b'(')?;
        let (start, op) = self.word();
        let node = match op {
            "e" => Query::Anchor(EntityId(self.int()?)),
            "p" => {
                let r = RelationId(self.int()?);
                project(self.expr()?, r)
            }
            "n" => negate(self.expr()?),
            "i" => {
                let mut cs = vec![self.expr()?, self.expr()?];
                if !self.peek_close() {
                    cs.push(self.expr()?);
                }
                Query::Intersect(cs)
            }
            "u" => Query::Union(vec![self.expr()?, self.expr()?]),
            "forall" | "all" | "a" => return Err(QueryError::UniversalQuantifier { offset: start }),
            "" => {
                return Err(QueryError::Syntax {
                    offset: start,
                    message: "missing operator".into(),
                })
            }
            other => {
                return Err(QueryError::Syntax {
                    offset: start,
                    message: format!("unknown operator `{other}`"),
                })
            }
        };
        self.expect(b')')?;
        Ok(node)
    }
}

/// Parses one expression without checking its shape.
pub fn parse_expr(text: &str) -> Result<Query> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let q = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.err("trailing input after expression");
    }
    Ok(q)
}

pub fn parse_query(text: &str) -> Result<QueryInstance> {
    QueryInstance::from_root(parse_expr(text)?)
}

pub fn serialize_query(query: &QueryInstance) -> String {
    query.to_string()
}

impl FromStr for QueryInstance {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self> {
        parse_query(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }
    fn r(i: u32) -> RelationId {
        RelationId(i)
    }

    #[test]
    fn build_examples() {
        let q = build_structure(QueryStructure::P1, &[e(3)], &[r(2)]).unwrap();
        assert_eq!(q.root(), &project(anchor(e(3)), r(2)));
        let q = build_structure(QueryStructure::U2, &[e(1), e(2)], &[r(0), r(4)]).unwrap();
        assert_eq!(
            q.root(),
            &Query::Union(vec![project(anchor(e(1)), r(0)), project(anchor(e(2)), r(4))])
        );
        let q = build_structure(QueryStructure::In2, &[e(1), e(2)], &[r(0), r(4)]).unwrap();
        assert_eq!(q.to_string(), "(i (p 0 (e 1)) (n (p 4 (e 2))))");
        let q = build_structure(QueryStructure::Pin, &[e(1), e(2)], &[r(0), r(2), r(4)]).unwrap();
        assert_eq!(q.to_string(), "(i (p 2 (p 0 (e 1))) (n (p 4 (e 2))))");
    }

    #[test]
    fn arity_mismatch() {
        let err = build_structure(QueryStructure::I3, &[e(1), e(2)], &[r(0), r(1), r(2)]).unwrap_err();
        assert!(matches!(err, QueryError::Arity { .. }));
    }

    #[test]
    fn every_tag_detects_itself() {
        for s in QueryStructure::ALL {
            let (na, nr) = s.arity();
            let a: Vec<_> = (0..na as u32).map(|i| e(10 + i)).collect();
            let rs: Vec<_> = (0..nr as u32).map(|i| r(2 * i)).collect();
            let q = build_structure(s, &a, &rs).unwrap();
            assert_eq!(q.anchors(), a, "{s}");
            assert_eq!(q.relations(), rs, "{s}");
            let parsed = parse_query(&q.to_string()).unwrap();
            assert_eq!(parsed.structure(), s);
            assert_eq!(parsed, q);
            assert_eq!(s.tag().parse::<QueryStructure>().unwrap(), s);
        }
    }

    #[test]
    fn parse_examples() {
        let q = parse_query("(p 4 (p 2 (e 17)))").unwrap();
        assert_eq!(q.structure(), QueryStructure::P2);
        assert_eq!(q.anchors(), vec![e(17)]);
        assert_eq!(q.relations(), vec![r(2), r(4)]);
        let q = parse_query(" ( i (p 0 (e 1))\n(n (p 2 (e 3))) ) ").unwrap();
        assert_eq!(q.structure(), QueryStructure::In2);
        assert!(matches!(
            parse_query("(p 0 (e 1)"),
            Err(QueryError::Syntax { offset: 10, .. })
        ));
        assert!(matches!(parse_query("(x 0)"), Err(QueryError::Syntax { offset: 1, .. })));
        assert!(matches!(
            parse_query("(forall (e 1))"),
            Err(QueryError::UniversalQuantifier { .. })
        ));
        assert!(matches!(
            parse_query("(n (p 0 (e 1)))"),
            Err(QueryError::UnsupportedShape(_))
        ));
        assert!(parse_query("(p 0 (e 1)) x").is_err());
    }

    #[test]
    fn permuted_children_are_normalized() {
        let q = parse_query("(i (n (p 2 (e 3))) (p 0 (e 1)))").unwrap();
        assert_eq!(q.structure(), QueryStructure::In2);
        assert_eq!(q.to_string(), "(i (p 0 (e 1)) (n (p 2 (e 3))))");
        let q = parse_query("(i (p 5 (e 9)) (p 1 (p 0 (e 1))))").unwrap();
        assert_eq!(q.structure(), QueryStructure::Pi);
        assert_eq!(q.anchors(), vec![e(1), e(9)]);
    }

    #[test]
    fn dnf_rewrites() {
        let q = parse_query("(p 2 (p 0 (e 1)))").unwrap();
        assert_eq!(q.to_dnf().unwrap().conjuncts, vec![q.root().clone()]);
        let up = build_structure(QueryStructure::Up, &[e(1), e(2)], &[r(0), r(2), r(4)]).unwrap();
        let d = up.to_dnf().unwrap();
        assert_eq!(
            d.conjuncts,
            vec![
                project(project(anchor(e(1)), r(0)), r(4)),
                project(project(anchor(e(2)), r(2)), r(4))
            ]
        );
        let u2 = build_structure(QueryStructure::U2, &[e(1), e(2)], &[r(0), r(2)]).unwrap();
        assert_eq!(u2.to_dnf().unwrap().conjuncts.len(), 2);
        let bad = negate(Query::Union(vec![anchor(e(0)), anchor(e(1))]));
        assert_eq!(bad.to_dnf(), Err(QueryError::UnionUnderNegation));
    }

    fn toy_graph() -> KnowledgeGraph {
        // a=0 b=1 c=2 d=3 e=4; r = 0, s = 2
        KnowledgeGraph::from_forward_triples(
            5,
            2,
            &[
                Triple::new(0, 0, 1),
                Triple::new(0, 0, 2),
                Triple::new(1, 2, 3),
                Triple::new(2, 2, 3),
                Triple::new(2, 2, 4),
            ],
        )
        .unwrap()
    }

    #[test]
    fn toy_answers() {
        let g = toy_graph();
        let q = parse_query("(p 2 (p 0 (e 0)))").unwrap();
        assert_eq!(ground_truth_answers(&g, q.root()), EntitySet::from(vec![3, 4]));
        let q = parse_query("(i (p 0 (e 0)) (n (p 2 (e 1))))").unwrap();
        assert_eq!(ground_truth_answers(&g, q.root()), EntitySet::from(vec![1, 2]));
        let q = parse_query("(p 0 (e 3))").unwrap();
        assert!(ground_truth_answers(&g, q.root()).is_empty());
    }

    #[test]
    fn canonical_order_is_stable() {
        let a = parse_expr("(i (p 4 (e 9)) (p 1 (p 0 (e 1))))").unwrap();
        let b = parse_expr("(i (p 1 (p 0 (e 1))) (p 4 (e 9)))").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.canonical().to_string(), "(i (p 4 (e 9)) (p 1 (p 0 (e 1))))");
    }
}
