//! A graph bundle directory: the three nested adjacency files, optional
//! name dictionaries and a manifest carrying their content hashes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kg::{
    build_splits, id_extent, parse_numeric_triples, parse_triples, Dictionaries, Dictionary, GraphSplits, KgError,
    KnowledgeGraph, Split, Triple, Vocabulary,
};

pub const MANIFEST: &str = "bundle.manifest";
pub const ENTITY_DICT: &str = "entities.dict";
pub const RELATION_DICT: &str = "relations.dict";
const FORMAT: &str = "nnkg-bundle";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{}: {source}", path.display())]
    Kg {
        path: PathBuf,
        #[source]
        source: KgError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing file {}", .0.display())]
    Missing(PathBuf),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("{split} graph does not match its manifest hash")]
    Integrity { split: Split },
}

pub type Result<T, E = BundleError> = std::result::Result<T, E>;

fn kg_err(path: &Path) -> impl FnOnce(KgError) -> BundleError + '_ {
    move |source| BundleError::Kg {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Name of the triple file of `split` in an ingest directory.
pub fn triple_file(split: Split) -> String {
    format!("{split}.txt")
}

fn graph_file(split: Split) -> String {
    format!("{split}.adj")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub splits: GraphSplits,
    /// Absent for integer-keyed datasets.
    pub dictionaries: Option<Dictionaries>,
}

impl Bundle {
    /// Reads `train.txt`, `valid.txt` and `test.txt` from `dir`. Files whose
    /// tokens are all integers are read as ids; otherwise names get ids in
    /// first-seen order over train, valid, test.
    pub fn ingest(dir: &Path) -> Result<Self> {
        let mut texts = Vec::with_capacity(3);
        for split in Split::ALL {
            let path = dir.join(triple_file(split));
            if !path.is_file() {
                return Err(BundleError::Missing(path));
            }
            texts.push((fs::read_to_string(&path).map_err(io_err(&path))?, path));
        }
        let numeric: Option<Vec<Vec<Triple>>> = texts
            .iter()
            .map(|(t, _)| parse_numeric_triples(t.as_bytes()).ok())
            .collect();
        let (parts, dictionaries) = match numeric {
            Some(parts) => (parts, None),
            None => {
                let mut dicts = Dictionaries::default();
                let mut parts = Vec::with_capacity(3);
                for (text, path) in &texts {
                    parts.push(parse_triples(text.as_bytes(), &mut dicts, Vocabulary::Grow).map_err(kg_err(path))?);
                }
                (parts, Some(dicts))
            }
        };
        let parts: [Vec<Triple>; 3] = parts.try_into().expect("three splits");
        let (entities, relations) = match &dictionaries {
            Some(d) => (d.entities.len(), d.relations.len()),
            None => id_extent(&[&parts[0], &parts[1], &parts[2]]),
        };
        Self::from_triples(entities, relations, &parts, dictionaries).map_err(kg_err(dir))
    }

    pub fn from_triples(
        entity_count: usize,
        raw_relation_count: usize,
        parts: &[Vec<Triple>; 3],
        dictionaries: Option<Dictionaries>,
    ) -> Result<Self, KgError> {
        let splits = build_splits(entity_count, raw_relation_count, &parts[0], &parts[1], &parts[2])?;
        Ok(Bundle { splits, dictionaries })
    }

    pub fn entity_count(&self) -> usize {
        self.splits.entity_count()
    }

    /// Relation ids including inverses.
    pub fn relation_count(&self) -> usize {
        self.splits.relation_count()
    }

    pub fn raw_relation_count(&self) -> usize {
        self.relation_count() / 2
    }

    /// Display name of an entity: its dictionary name, or the id.
    pub fn entity_name(&self, id: u32) -> String {
        self.dictionaries
            .as_ref()
            .and_then(|d| d.entities.name(id))
            .map_or_else(|| id.to_string(), str::to_string)
    }

    pub fn manifest(&self) -> String {
        let mut lines = vec![
            format!("format={FORMAT}"),
            format!("version={VERSION}"),
            format!("entities={}", self.entity_count()),
            format!("relations={}", self.raw_relation_count()),
            format!("dictionaries={}", self.dictionaries.is_some()),
        ];
        for split in Split::ALL {
            let g = self.splits.graph(split);
            lines.push(format!("{split}_facts={}", g.fact_count()));
            lines.push(format!("{split}_sha256={}", g.content_hash()));
        }
        lines.join("\n") + "\n"
    }

    /// Dataset statistics: sizes of the id spaces and of each nested graph.
    pub fn stats(&self) -> String {
        let mut s = format!(
            "entities={} relations={}\n",
            self.entity_count(),
            self.raw_relation_count()
        );
        for split in Split::ALL {
            s += &format!("{split}_facts={}\n", self.splits.graph(split).fact_count());
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for split in Split::ALL {
            let path = dir.join(graph_file(split));
            self.splits.graph(split).save(&path).map_err(kg_err(&path))?;
        }
        if let Some(d) = &self.dictionaries {
            for (name, dict) in [(ENTITY_DICT, &d.entities), (RELATION_DICT, &d.relations)] {
                let path = dir.join(name);
                dict.save(&path).map_err(kg_err(&path))?;
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest()).map_err(io_err(&path))
    }

    /// Loads a saved bundle, verifying every graph against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(BundleError::Missing(path));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| BundleError::Manifest(format!("missing `{key}`")))
        };
        if field("format")? != FORMAT {
            return Err(BundleError::Manifest("not a graph bundle".into()));
        }
        if field("version")? != VERSION.to_string() {
            return Err(BundleError::Manifest(format!("unsupported version {}", field("version")?)));
        }
        let mut graphs: Vec<KnowledgeGraph> = Vec::with_capacity(3);
        for split in Split::ALL {
            let path = dir.join(graph_file(split));
            let g = KnowledgeGraph::load(&path).map_err(kg_err(&path))?;
            if g.content_hash() != field(&format!("{split}_sha256"))? {
                return Err(BundleError::Integrity { split });
            }
            graphs.push(g);
        }
        let dictionaries = if field("dictionaries")? == "true" {
            let load = |name: &str| -> Result<Dictionary> {
                let p = dir.join(name);
                Dictionary::load(&p).map_err(kg_err(&p))
            };
            Some(Dictionaries {
                entities: load(ENTITY_DICT)?,
                relations: load(RELATION_DICT)?,
            })
        } else {
            None
        };
        let test = graphs.pop().expect("three graphs");
        let valid = graphs.pop().expect("three graphs");
        let train = graphs.pop().expect("three graphs");
        if field("entities")? != test.entity_count().to_string() {
            return Err(BundleError::Manifest("entity count disagrees with the graphs".into()));
        }
        Ok(Bundle {
            splits: GraphSplits { train, valid, test },
            dictionaries,
        })
    }
}
