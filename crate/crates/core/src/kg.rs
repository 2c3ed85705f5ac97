//! In-memory knowledge graph with interned entity and relation ids.
//!
//! Ids are assigned in lexicographic label order when a graph is built, so
//! ordering by id is ordering by label. Every list the store returns is sorted
//! and the output does not depend on the order triples were supplied in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("entity {entity} is not an endpoint of triple {triple}")]
    NotAnEndpoint { entity: String, triple: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Directed fact. Field order gives the (head, relation, tail) sort order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    pub fn touches(&self, e: EntityId) -> bool {
        self.head == e || self.tail == e
    }
}

/// A triple spelled out with labels; the interchange form for files and tests.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl LabelTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for LabelTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Triple list serialized as `[head, relation, tail]` arrays inside question records.
pub(crate) mod triple_array {
    use super::LabelTriple;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[LabelTriple], s: S) -> Result<S::Ok, S::Error> {
        let arrays: Vec<[&str; 3]> = v
            .iter()
            .map(|t| [t.head.as_str(), t.relation.as_str(), t.tail.as_str()])
            .collect();
        arrays.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<LabelTriple>, D::Error> {
        let arrays: Vec<[String; 3]> = Vec::deserialize(d)?;
        Ok(arrays
            .into_iter()
            .map(|[h, r, t]| LabelTriple::new(h, r, t))
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Catalog {
    labels: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Catalog {
    fn from_sorted(labels: BTreeSet<String>) -> Self {
        let labels: Vec<String> = labels.into_iter().collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
        Self { labels, index }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Catalog,
    relations: Catalog,
    triples: Vec<Triple>,
    /// Per entity, indices into `triples` of every triple touching it, ascending.
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from label triples; duplicates collapse.
    pub fn from_label_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = &'a LabelTriple>,
    {
        let mut builder = GraphBuilder::default();
        for t in triples {
            builder.add(t.clone());
        }
        builder.build()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.labels.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.num_relations() as u32).map(RelationId)
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entities.labels[e.index()]
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relations.labels[r.index()]
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entities.index.get(label).copied().map(EntityId)
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relations.index.get(label).copied().map(RelationId)
    }

    pub fn require_entity(&self, label: &str) -> Result<EntityId, KgError> {
        self.entity_id(label)
            .ok_or_else(|| KgError::UnknownEntity(label.to_string()))
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.binary_search(t).is_ok()
    }

    /// Triples incident to `e` in either direction, in (head, relation, tail) order.
    pub fn neighbors(&self, e: EntityId) -> impl Iterator<Item = &Triple> + '_ {
        self.adjacency[e.index()].iter().map(move |&i| &self.triples[i])
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency[e.index()].len()
    }

    /// Position of each triple incident to `e` within [`Self::triples`].
    pub fn incident_indices(&self, e: EntityId) -> &[usize] {
        &self.adjacency[e.index()]
    }

    /// The endpoint of `t` opposite to `e`; `e` itself for a self-loop.
    pub fn get_tail(&self, t: &Triple, e: EntityId) -> Result<EntityId, KgError> {
        if t.head == e {
            Ok(t.tail)
        } else if t.tail == e {
            Ok(t.head)
        } else {
            Err(KgError::NotAnEndpoint {
                entity: self.entity_label(e).to_string(),
                triple: self.labels_of(t).to_string(),
            })
        }
    }

    pub fn labels_of(&self, t: &Triple) -> LabelTriple {
        LabelTriple::new(
            self.entity_label(t.head),
            self.relation_label(t.relation),
            self.entity_label(t.tail),
        )
    }

    pub fn to_label_triples(&self) -> Vec<LabelTriple> {
        self.triples.iter().map(|t| self.labels_of(t)).collect()
    }

    pub fn lookup(&self, t: &LabelTriple) -> Option<Triple> {
        let found = Triple::new(
            self.entity_id(&t.head)?,
            self.relation_id(&t.relation)?,
            self.entity_id(&t.tail)?,
        );
        self.contains(&found).then_some(found)
    }

    /// Subgraph induced by `keep`, re-interned.
    pub fn induced(&self, keep: &BTreeSet<EntityId>) -> KnowledgeGraph {
        let kept: Vec<LabelTriple> = self
            .triples
            .iter()
            .filter(|t| keep.contains(&t.head) && keep.contains(&t.tail))
            .map(|t| self.labels_of(t))
            .collect();
        KnowledgeGraph::from_label_triples(&kept)
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    triples: BTreeSet<LabelTriple>,
}

impl GraphBuilder {
    pub fn add(&mut self, t: LabelTriple) {
        self.triples.insert(t);
    }

    pub fn build(self) -> KnowledgeGraph {
        let mut ents = BTreeSet::new();
        let mut rels = BTreeSet::new();
        for t in &self.triples {
            ents.insert(t.head.clone());
            ents.insert(t.tail.clone());
            rels.insert(t.relation.clone());
        }
        let entities = Catalog::from_sorted(ents);
        let relations = Catalog::from_sorted(rels);
        let mut triples: Vec<Triple> = self
            .triples
            .iter()
            .map(|t| {
                Triple::new(
                    EntityId(entities.index[&t.head]),
                    RelationId(relations.index[&t.relation]),
                    EntityId(entities.index[&t.tail]),
                )
            })
            .collect();
        triples.sort();
        let mut adjacency = vec![Vec::new(); entities.labels.len()];
        for (i, t) in triples.iter().enumerate() {
            adjacency[t.head.index()].push(i);
            if t.tail != t.head {
                adjacency[t.tail.index()].push(i);
            }
        }
        KnowledgeGraph {
            entities,
            relations,
            triples,
            adjacency,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KgError + '_ {
    move |source| KgError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses one triple-file line: three tab-separated fields or a JSON object.
pub fn parse_triple_line(line: &str) -> Result<LabelTriple, String> {
    let trimmed = line.trim();
    let t = if trimmed.starts_with('{') {
        serde_json::from_str::<LabelTriple>(trimmed).map_err(|e| format!("invalid JSON triple: {e}"))?
    } else {
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
        }
        LabelTriple::new(fields[0].trim(), fields[1].trim(), fields[2].trim())
    };
    if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
        return Err("empty triple field".to_string());
    }
    Ok(t)
}

pub fn load_triples(path: &Path) -> Result<KnowledgeGraph, KgError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut builder = GraphBuilder::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_triple_line(&line).map_err(|message| KgError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?;
        builder.add(t);
    }
    Ok(builder.build())
}

/// Writes the graph as JSON lines in sorted triple order.
pub fn write_triples(g: &KnowledgeGraph, path: &Path) -> Result<(), KgError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in g.to_label_triples() {
        let line = serde_json::to_string(&t).expect("label triple serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One question with its inline subgraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub question_entities: Vec<String>,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, with = "triple_array")]
    pub ground_truth_path: Vec<LabelTriple>,
    #[serde(with = "triple_array")]
    pub triples: Vec<LabelTriple>,
}

/// A question record with its graph built and question entities resolved.
#[derive(Debug, Clone)]
pub struct QuestionInstance {
    pub record: QuestionRecord,
    pub graph: KnowledgeGraph,
    pub question_entities: Vec<EntityId>,
}

impl QuestionInstance {
    pub fn from_record(record: QuestionRecord) -> Result<Self, KgError> {
        let graph = KnowledgeGraph::from_label_triples(&record.triples);
        let question_entities = record
            .question_entities
            .iter()
            .map(|label| graph.require_entity(label))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            record,
            graph,
            question_entities,
        })
    }
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>, KgError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(&line).map_err(|e| KgError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("invalid question record: {e}"),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_questions(records: &[QuestionRecord], path: &Path) -> Result<(), KgError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("question record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
