//! Triple loading, id dictionaries, inverse augmentation and the three nested
//! graph splits.
//!
//! Relation ids follow a parity convention: a raw relation with dictionary
//! index `j` is stored as `RelationId(2 * j)` and its inverse as
//! `RelationId(2 * j + 1)`, so `inverse(r) = r ^ 1`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown {kind} `{token}`")]
    UnknownToken {
        line: usize,
        kind: &'static str,
        token: String,
    },
    #[error("relation {0} is odd; triples already contain inverse relations")]
    AlreadyAugmented(u32),
    #[error("{kind} id {id} out of range (count {count})")]
    IdOutOfRange {
        kind: &'static str,
        id: u32,
        count: usize,
    },
    #[error("malformed graph data: {0}")]
    Format(String),
}

impl KgError {
    fn io(path: &Path, source: io::Error) -> Self {
        KgError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RelationId(pub u32);

impl RelationId {
    /// Forward relation id for the raw relation at dictionary index `raw`.
    pub fn forward(raw: u32) -> Self {
        RelationId(raw * 2)
    }

    pub fn inverse(self) -> Self {
        RelationId(self.0 ^ 1)
    }

    pub fn is_inverse(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, rel: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            rel: RelationId(rel),
            tail: EntityId(tail),
        }
    }

    pub fn inverse(self) -> Self {
        Triple {
            head: self.tail,
            rel: self.rel.inverse(),
            tail: self.head,
        }
    }
}

/// Sorted, duplicate-free set of entities.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct EntitySet(Vec<EntityId>);

impl EntitySet {
    pub fn new() -> Self {
        EntitySet(Vec::new())
    }

    /// Builds a set from arbitrary ids, sorting and deduplicating.
    pub fn from_unsorted(mut ids: Vec<EntityId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        EntitySet(ids)
    }

    /// Every entity `0..count`.
    pub fn full(count: usize) -> Self {
        EntitySet((0..count as u32).map(EntityId).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[EntityId] {
        &self.0
    }

    pub fn union(&self, other: &EntitySet) -> EntitySet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        EntitySet(out)
    }

    pub fn intersection(&self, other: &EntitySet) -> EntitySet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        EntitySet(out)
    }

    pub fn difference(&self, other: &EntitySet) -> EntitySet {
        EntitySet(self.0.iter().copied().filter(|e| !other.contains(*e)).collect())
    }

    /// `{0..count} \ self`.
    pub fn complement(&self, count: usize) -> EntitySet {
        let mut out = Vec::with_capacity(count.saturating_sub(self.len()));
        let mut next = self.0.iter().peekable();
        for id in 0..count as u32 {
            if next.peek().map(|e| e.0) == Some(id) {
                next.next();
            } else {
                out.push(EntityId(id));
            }
        }
        EntitySet(out)
    }

    pub fn is_subset(&self, other: &EntitySet) -> bool {
        self.0.iter().all(|e| other.contains(*e))
    }
}

impl FromIterator<EntityId> for EntitySet {
    fn from_iter<I: IntoIterator<Item = EntityId>>(iter: I) -> Self {
        EntitySet::from_unsorted(iter.into_iter().collect())
    }
}

impl From<Vec<u32>> for EntitySet {
    fn from(ids: Vec<u32>) -> Self {
        EntitySet::from_unsorted(ids.into_iter().map(EntityId).collect())
    }
}

/// Dense name <-> id mapping in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionary {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Dictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        if let Some(id) = self.index.get(name) {
            return *id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes `id<TAB>name` lines.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (id, name) in self.names.iter().enumerate() {
            writeln!(w, "{id}\t{name}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| KgError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| KgError::io(path, e))?;
        w.flush().map_err(|e| KgError::io(path, e))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut dict = Dictionary::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| KgError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if line.is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| KgError::Parse {
                line: lineno + 1,
                message: "expected `id<TAB>name`".into(),
            })?;
            let id: usize = id.parse().map_err(|_| KgError::Parse {
                line: lineno + 1,
                message: format!("bad id `{id}`"),
            })?;
            if id != dict.len() {
                return Err(KgError::Parse {
                    line: lineno + 1,
                    message: format!("ids must be dense from 0, got {id}"),
                });
            }
            dict.get_or_insert(name);
        }
        Ok(dict)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| KgError::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionaries {
    pub entities: Dictionary,
    /// Raw relations; dictionary index `j` maps to `RelationId::forward(j)`.
    pub relations: Dictionary,
}

/// Whether unseen tokens extend the dictionaries or are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vocabulary {
    Grow,
    Fixed,
}

/// Parses tab-separated `head relation tail` lines into forward triples.
pub fn parse_triples<R: BufRead>(
    reader: R,
    dicts: &mut Dictionaries,
    vocabulary: Vocabulary,
) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| KgError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let lookup = |dict: &mut Dictionary, token: &str, kind: &'static str| match vocabulary {
            Vocabulary::Grow => Ok(dict.get_or_insert(token)),
            Vocabulary::Fixed => dict.get(token).ok_or_else(|| KgError::UnknownToken {
                line: line_no,
                kind,
                token: token.to_string(),
            }),
        };
        let head = lookup(&mut dicts.entities, fields[0], "entity")?;
        let rel = lookup(&mut dicts.relations, fields[1], "relation")?;
        let tail = lookup(&mut dicts.entities, fields[2], "entity")?;
        triples.push(Triple {
            head: EntityId(head),
            rel: RelationId::forward(rel),
            tail: EntityId(tail),
        });
    }
    Ok(triples)
}

pub fn load_triples(
    path: &Path,
    dicts: &mut Dictionaries,
    vocabulary: Vocabulary,
) -> Result<Vec<Triple>> {
    let file = File::open(path).map_err(|e| KgError::io(path, e))?;
    parse_triples(BufReader::new(file), dicts, vocabulary)
}

/// Parses integer-keyed triples: entity tokens are entity ids and relation
/// token `j` is raw relation `j`.
pub fn parse_numeric_triples<R: BufRead>(reader: R) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| KgError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let mut ids = [0u32; 3];
        for (slot, field) in ids.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| KgError::Parse {
                line: line_no,
                message: format!("`{field}` is not a non-negative integer"),
            })?;
        }
        triples.push(Triple {
            head: EntityId(ids[0]),
            rel: RelationId::forward(ids[1]),
            tail: EntityId(ids[2]),
        });
    }
    Ok(triples)
}

/// Appends `(t, r^1, h)` after every `(h, r, t)`.
pub fn augment_inverse(triples: &[Triple]) -> Result<Vec<Triple>> {
    let mut out = Vec::with_capacity(triples.len() * 2);
    for t in triples {
        if t.rel.is_inverse() {
            return Err(KgError::AlreadyAugmented(t.rel.0));
        }
        out.push(*t);
        out.push(t.inverse());
    }
    Ok(out)
}

/// Immutable adjacency index. Edges of each head are stored contiguously,
/// sorted by `(relation, tail)`; every stored edge has its inverse stored too.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entity_count: usize,
    relation_count: usize,
    offsets: Vec<usize>,
    rels: Vec<RelationId>,
    tails: Vec<EntityId>,
}

impl KnowledgeGraph {
    /// Builds a graph from forward triples (even relation ids), adding inverses.
    /// `raw_relation_count` counts forward relations; the graph has twice as many.
    pub fn from_forward_triples(
        entity_count: usize,
        raw_relation_count: usize,
        triples: &[Triple],
    ) -> Result<Self> {
        let relation_count = raw_relation_count * 2;
        for t in triples {
            check_id("entity", t.head.0, entity_count)?;
            check_id("entity", t.tail.0, entity_count)?;
            check_id("relation", t.rel.0, relation_count)?;
        }
        let augmented = augment_inverse(triples)?;
        Ok(Self::from_closed_edges(entity_count, relation_count, augmented))
    }

    fn from_closed_edges(entity_count: usize, relation_count: usize, mut edges: Vec<Triple>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        let mut offsets = vec![0usize; entity_count + 1];
        for e in &edges {
            offsets[e.head.index() + 1] += 1;
        }
        for i in 0..entity_count {
            offsets[i + 1] += offsets[i];
        }
        KnowledgeGraph {
            entity_count,
            relation_count,
            offsets,
            rels: edges.iter().map(|e| e.rel).collect(),
            tails: edges.iter().map(|e| e.tail).collect(),
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    /// Relation count including inverses.
    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    /// Stored directed edges, inverses included.
    pub fn edge_count(&self) -> usize {
        self.tails.len()
    }

    /// Distinct forward facts (half the stored edges).
    pub fn fact_count(&self) -> usize {
        self.edge_count() / 2
    }

    /// Tails reachable from `head` via `rel`, sorted ascending.
    pub fn neighbors(&self, head: EntityId, rel: RelationId) -> &[EntityId] {
        let (lo, hi) = (self.offsets[head.index()], self.offsets[head.index() + 1]);
        let rels = &self.rels[lo..hi];
        let start = rels.partition_point(|r| *r < rel);
        let end = rels.partition_point(|r| *r <= rel);
        &self.tails[lo + start..lo + end]
    }

    /// All `(relation, tail)` pairs leaving `head`.
    pub fn out_edges(&self, head: EntityId) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        let (lo, hi) = (self.offsets[head.index()], self.offsets[head.index() + 1]);
        self.rels[lo..hi].iter().copied().zip(self.tails[lo..hi].iter().copied())
    }

    pub fn out_degree(&self, head: EntityId) -> usize {
        self.offsets[head.index() + 1] - self.offsets[head.index()]
    }

    /// The `i`-th edge leaving `head`, in `(relation, tail)` order.
    pub fn out_edge(&self, head: EntityId, i: usize) -> (RelationId, EntityId) {
        let at = self.offsets[head.index()] + i;
        (self.rels[at], self.tails[at])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.neighbors(t.head, t.rel).binary_search(&t.tail).is_ok()
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        (0..self.entity_count).flat_map(move |h| {
            let head = EntityId(h as u32);
            self.out_edges(head).map(move |(rel, tail)| Triple { head, rel, tail })
        })
    }

    /// SHA-256 over the canonical binary encoding.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        hasher.update(&buf);
        hex::encode(hasher.finalize())
    }

    const MAGIC: &'static [u8; 4] = b"NKGA";
    const VERSION: u32 = 1;

    /// Little-endian CSR encoding: header, `entity_count + 1` offsets, then
    /// `(relation, tail)` u32 pairs.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.entity_count as u64).to_le_bytes())?;
        w.write_all(&(self.relation_count as u64).to_le_bytes())?;
        w.write_all(&(self.edge_count() as u64).to_le_bytes())?;
        for off in &self.offsets {
            w.write_all(&(*off as u64).to_le_bytes())?;
        }
        for (r, t) in self.rels.iter().zip(&self.tails) {
            w.write_all(&r.0.to_le_bytes())?;
            w.write_all(&t.0.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| KgError::Format(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(KgError::Format(format!("unsupported adjacency version {version}")));
        }
        let entity_count = read_u64(&mut r)? as usize;
        let relation_count = read_u64(&mut r)? as usize;
        let edge_count = read_u64(&mut r)? as usize;
        let mut offsets = Vec::with_capacity(entity_count + 1);
        for _ in 0..=entity_count {
            offsets.push(read_u64(&mut r)? as usize);
        }
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&edge_count)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(bad("inconsistent offsets"));
        }
        let mut edges = Vec::with_capacity(edge_count);
        for h in 0..entity_count {
            for _ in offsets[h]..offsets[h + 1] {
                let rel = read_u32(&mut r)?;
                let tail = read_u32(&mut r)?;
                check_id("relation", rel, relation_count)?;
                check_id("entity", tail, entity_count)?;
                edges.push(Triple::new(h as u32, rel, tail));
            }
        }
        let graph = Self::from_closed_edges(entity_count, relation_count, edges);
        if graph.edge_count() != edge_count {
            return Err(bad("duplicate edges"));
        }
        if graph.triples().any(|t| !graph.contains(&t.inverse())) {
            return Err(bad("edge without its inverse"));
        }
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| KgError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w).map_err(|e| KgError::io(path, e))?;
        w.flush().map_err(|e| KgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| KgError::io(path, e))?;
        Self::read_binary(BufReader::new(file))
    }
}

fn check_id(kind: &'static str, id: u32, count: usize) -> Result<()> {
    if (id as usize) < count {
        Ok(())
    } else {
        Err(KgError::IdOutOfRange { kind, id, count })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| KgError::Format("truncated data".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| KgError::Format("truncated data".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Train ⊆ valid ⊆ test, sharing one id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSplits {
    pub train: KnowledgeGraph,
    pub valid: KnowledgeGraph,
    pub test: KnowledgeGraph,
}

impl GraphSplits {
    pub fn graph(&self, split: Split) -> &KnowledgeGraph {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entity_count(&self) -> usize {
        self.test.entity_count()
    }

    pub fn relation_count(&self) -> usize {
        self.test.relation_count()
    }
}

/// Builds the nested graphs: valid = train ∪ valid, test = valid ∪ test.
pub fn build_splits(
    entity_count: usize,
    raw_relation_count: usize,
    train: &[Triple],
    valid: &[Triple],
    test: &[Triple],
) -> Result<GraphSplits> {
    let mut acc: Vec<Triple> = train.to_vec();
    let train_graph = KnowledgeGraph::from_forward_triples(entity_count, raw_relation_count, &acc)?;
    acc.extend_from_slice(valid);
    let valid_graph = KnowledgeGraph::from_forward_triples(entity_count, raw_relation_count, &acc)?;
    acc.extend_from_slice(test);
    let test_graph = KnowledgeGraph::from_forward_triples(entity_count, raw_relation_count, &acc)?;
    Ok(GraphSplits {
        train: train_graph,
        valid: valid_graph,
        test: test_graph,
    })
}

/// Counts implied by a set of forward triple lists.
pub fn id_extent(triples: &[&[Triple]]) -> (usize, usize) {
    let mut entities = 0usize;
    let mut raw_relations = 0usize;
    for list in triples {
        for t in *list {
            entities = entities.max(t.head.index() + 1).max(t.tail.index() + 1);
            raw_relations = raw_relations.max(t.rel.index() / 2 + 1);
        }
    }
    (entities, raw_relations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(text: &str) -> (Vec<Triple>, Dictionaries) {
        let mut dicts = Dictionaries::default();
        let triples = parse_triples(text.as_bytes(), &mut dicts, Vocabulary::Grow).unwrap();
        (triples, dicts)
    }

    #[test]
    fn toy_file_counts() {
        let (triples, dicts) = toy("a\tr\tb\na\tr\tc\nb\ts\td\n");
        assert_eq!(triples.len(), 3);
        assert_eq!(dicts.entities.len(), 4);
        assert_eq!(dicts.relations.len(), 2);
        assert_eq!(triples[2], Triple::new(1, 2, 3));
    }

    #[test]
    fn empty_file() {
        let (triples, dicts) = toy("");
        assert!(triples.is_empty());
        assert!(dicts.entities.is_empty() && dicts.relations.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut dicts = Dictionaries::default();
        let err = parse_triples("a\tr\tb\na\tr\n".as_bytes(), &mut dicts, Vocabulary::Grow).unwrap_err();
        assert!(matches!(err, KgError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn fixed_vocabulary_rejects_unknown() {
        let (_, mut dicts) = toy("a\tr\tb\n");
        let err = parse_triples("a\tr\tz\n".as_bytes(), &mut dicts, Vocabulary::Fixed).unwrap_err();
        assert!(matches!(err, KgError::UnknownToken { kind: "entity", .. }));
        let ok = parse_triples("b\tr\ta\n".as_bytes(), &mut dicts, Vocabulary::Fixed).unwrap();
        assert_eq!(ok, vec![Triple::new(1, 0, 0)]);
    }

    #[test]
    fn dictionary_roundtrip() {
        let (_, dicts) = toy("a\tr\tb\nc\ts\td\n");
        let mut buf = Vec::new();
        dicts.entities.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0\ta\n1\tb\n2\tc\n3\td\n");
        assert_eq!(Dictionary::read_from(&buf[..]).unwrap(), dicts.entities);
    }

    #[test]
    fn augmentation() {
        let out = augment_inverse(&[Triple::new(0, 0, 1)]).unwrap();
        assert_eq!(out, vec![Triple::new(0, 0, 1), Triple::new(1, 1, 0)]);
        assert!(augment_inverse(&[]).unwrap().is_empty());
        assert!(matches!(
            augment_inverse(&out),
            Err(KgError::AlreadyAugmented(1))
        ));
    }

    #[test]
    fn neighbors_and_inverse() {
        let g = KnowledgeGraph::from_forward_triples(3, 1, &[Triple::new(0, 0, 1), Triple::new(0, 0, 2)])
            .unwrap();
        assert_eq!(g.neighbors(EntityId(0), RelationId(0)), &[EntityId(1), EntityId(2)]);
        assert!(g.neighbors(EntityId(1), RelationId(0)).is_empty());
        assert_eq!(g.neighbors(EntityId(1), RelationId(1)), &[EntityId(0)]);
        assert_eq!(g.edge_count(), 4);
        assert_eq!(g.fact_count(), 2);
    }

    #[test]
    fn splits_nest_and_dedup() {
        let t1 = Triple::new(0, 0, 1);
        let t2 = Triple::new(1, 0, 2);
        let t3 = Triple::new(2, 2, 0);
        let s = build_splits(3, 2, &[t1], &[t2], &[t3]).unwrap();
        assert_eq!(
            (s.train.fact_count(), s.valid.fact_count(), s.test.fact_count()),
            (1, 2, 3)
        );
        let s = build_splits(3, 2, &[t1], &[t2], &[t2, t3, t3]).unwrap();
        assert_eq!(s.test.fact_count(), 3);
        assert!(s.train.triples().all(|t| s.valid.contains(&t) && s.test.contains(&t)));
    }

    #[test]
    fn out_of_range_rejected() {
        let err = build_splits(2, 1, &[Triple::new(0, 0, 5)], &[], &[]).unwrap_err();
        assert!(matches!(err, KgError::IdOutOfRange { kind: "entity", id: 5, .. }));
        let err = build_splits(2, 1, &[Triple::new(0, 2, 1)], &[], &[]).unwrap_err();
        assert!(matches!(err, KgError::IdOutOfRange { kind: "relation", .. }));
    }

    #[test]
    fn self_loop_keeps_both_directions() {
        let g = KnowledgeGraph::from_forward_triples(1, 1, &[Triple::new(0, 0, 0)]).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.neighbors(EntityId(0), RelationId(1)), &[EntityId(0)]);
    }

    #[test]
    fn binary_roundtrip_and_truncation() {
        let g = KnowledgeGraph::from_forward_triples(
            4,
            2,
            &[Triple::new(0, 0, 1), Triple::new(3, 2, 1), Triple::new(2, 0, 2)],
        )
        .unwrap();
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(KnowledgeGraph::read_binary(&buf[..]).unwrap(), g);
        assert!(KnowledgeGraph::read_binary(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn entity_set_ops() {
        let a = EntitySet::from(vec![3, 1, 2, 2]);
        let b = EntitySet::from(vec![2, 5]);
        assert_eq!(a.as_slice(), &[EntityId(1), EntityId(2), EntityId(3)]);
        assert_eq!(a.union(&b), EntitySet::from(vec![1, 2, 3, 5]));
        assert_eq!(a.intersection(&b), EntitySet::from(vec![2]));
        assert_eq!(a.difference(&b), EntitySet::from(vec![1, 3]));
        assert_eq!(a.complement(6), EntitySet::from(vec![0, 4, 5]));
    }
}
