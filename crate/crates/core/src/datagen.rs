//! Synthetic question generation from sampled, masked knowledge-graph walks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, LabelTriple, QuestionRecord, Triple};
use crate::llm::{ChatClient, ChatRequest, ClientError};
use crate::projection::{first_list_atoms, render_assertions, Strategy};
use crate::prompts::{PromptError, PromptKind};
use crate::text::is_placeholder;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("graph has no triples")]
    EmptyGraph,
    #[error("walk length must be at least 1")]
    ZeroLength,
    #[error("no walk of {length} distinct triples found after {attempts} restarts")]
    Sampling { length: usize, attempts: usize },
    #[error("cannot mask {requested} of {available} entities and keep a concrete anchor")]
    Mask { requested: usize, available: usize },
    #[error("answer placeholder {0} does not occur in the triples")]
    MissingAnswer(String),
    #[error("unparseable generation after {attempts} attempts: {last}")]
    Parse { attempts: usize, last: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Dead ends tolerated before the walk restarts from a fresh entity.
pub const DEAD_END_RETRIES: usize = 3;
/// Fresh restarts before sampling gives up.
pub const MAX_RESTARTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    /// Triples in the order they were collected.
    pub triples: Vec<Triple>,
    pub entities: BTreeSet<EntityId>,
}

/// Seeded walk over undirected adjacency collecting `length` distinct
/// triples. A dead end jumps back to an already visited entity; after
/// [`DEAD_END_RETRIES`] consecutive dead ends the walk starts over.
pub fn sample_walk(g: &KnowledgeGraph, length: usize, rng: &mut ChaCha8Rng) -> Result<Walk, DatagenError> {
    if g.num_triples() == 0 {
        return Err(DatagenError::EmptyGraph);
    }
    if length == 0 {
        return Err(DatagenError::ZeroLength);
    }
    let starts: Vec<EntityId> = g.entity_ids().filter(|&e| g.degree(e) > 0).collect();
    for _ in 0..MAX_RESTARTS {
        let mut current = *starts.choose(rng).expect("non-empty graph has a start");
        let mut taken: BTreeSet<usize> = BTreeSet::new();
        let mut order = Vec::new();
        let mut visited = vec![current];
        let mut dead_ends = 0;
        while order.len() < length && dead_ends <= DEAD_END_RETRIES {
            let next = g
                .incident_indices(current)
                .iter()
                .filter(|i| !taken.contains(i))
                .choose(rng)
                .copied();
            match next {
                Some(i) => {
                    taken.insert(i);
                    order.push(i);
                    let t = &g.triples()[i];
                    current = if t.head == current { t.tail } else { t.head };
                    visited.push(current);
                    dead_ends = 0;
                }
                None => {
                    dead_ends += 1;
                    current = *visited.choose(rng).expect("walk has visited its start");
                }
            }
        }
        if order.len() == length {
            let triples: Vec<Triple> = order.iter().map(|&i| g.triples()[i]).collect();
            let entities = triples.iter().flat_map(|t| [t.head, t.tail]).collect();
            return Ok(Walk { triples, entities });
        }
    }
    Err(DatagenError::Sampling {
        length,
        attempts: MAX_RESTARTS,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masked {
    pub triples: Vec<LabelTriple>,
    /// Placeholder to original entity label.
    pub answer_map: BTreeMap<String, String>,
    /// The highest-numbered placeholder; the others are intermediate.
    pub answer_placeholder: String,
}

impl Masked {
    pub fn restore(&self) -> Vec<LabelTriple> {
        let get = |s: &String| self.answer_map.get(s).cloned().unwrap_or_else(|| s.clone());
        self.triples
            .iter()
            .map(|t| LabelTriple::new(get(&t.head), t.relation.clone(), get(&t.tail)))
            .collect()
    }

    pub fn concrete_entities(&self) -> BTreeSet<String> {
        self.triples
            .iter()
            .flat_map(|t| [&t.head, &t.tail])
            .filter(|s| !is_placeholder(s))
            .cloned()
            .collect()
    }
}

/// Replaces each listed entity everywhere with `[ENTk]`, numbered by first
/// appearance in triple order.
pub fn mask_entities(triples: &[LabelTriple], masked: &BTreeSet<String>) -> Result<Masked, DatagenError> {
    let mut ids: BTreeMap<String, String> = BTreeMap::new();
    let mut answer_map = BTreeMap::new();
    let mut name = |e: &str| -> String {
        if !masked.contains(e) {
            return e.to_string();
        }
        let next = ids.len() + 1;
        ids.entry(e.to_string())
            .or_insert_with(|| {
                let p = format!("[ENT{next}]");
                answer_map.insert(p.clone(), e.to_string());
                p
            })
            .clone()
    };
    let out: Vec<LabelTriple> = triples
        .iter()
        .map(|t| {
            let h = name(&t.head);
            let x = name(&t.tail);
            LabelTriple::new(h, t.relation.clone(), x)
        })
        .collect();
    let answer_placeholder = format!("[ENT{}]", answer_map.len());
    if answer_map.is_empty() {
        return Err(DatagenError::MissingAnswer(answer_placeholder));
    }
    Ok(Masked {
        triples: out,
        answer_map,
        answer_placeholder,
    })
}

/// Masks `count` distinct entities chosen at random, keeping at least one
/// concrete entity.
pub fn mask(triples: &[LabelTriple], count: usize, rng: &mut ChaCha8Rng) -> Result<Masked, DatagenError> {
    let entities: BTreeSet<&str> = triples.iter().flat_map(|t| [t.head.as_str(), t.tail.as_str()]).collect();
    if count == 0 || count >= entities.len() {
        return Err(DatagenError::Mask {
            requested: count,
            available: entities.len(),
        });
    }
    let chosen: BTreeSet<String> = entities
        .iter()
        .copied()
        .choose_multiple(rng, count)
        .into_iter()
        .map(str::to_string)
        .collect();
    mask_entities(triples, &chosen)
}

/// Upper bound on enumerated pattern matches.
pub const MAX_MATCHES: usize = 1000;

/// Labels the answer placeholder takes over all matches of the masked
/// pattern in `g`, with distinct placeholders bound to distinct entities
/// outside the concrete ones.
pub fn collect_answers(g: &KnowledgeGraph, masked: &Masked) -> Vec<String> {
    struct Search<'a> {
        g: &'a KnowledgeGraph,
        triples: &'a [LabelTriple],
        concrete: BTreeSet<EntityId>,
        answer: &'a str,
        found: BTreeSet<EntityId>,
        matches: usize,
    }
    impl Search<'_> {
        fn resolve(&self, s: &str, b: &BTreeMap<String, EntityId>) -> Option<Option<EntityId>> {
            if is_placeholder(s) {
                Some(b.get(s).copied())
            } else {
                self.g.entity_id(s).map(Some)
            }
        }

        fn go(&mut self, done: &mut Vec<bool>, b: &mut BTreeMap<String, EntityId>) {
            if self.matches >= MAX_MATCHES {
                return;
            }
            let next = (0..self.triples.len()).filter(|&i| !done[i]).find(|&i| {
                let t = &self.triples[i];
                matches!(self.resolve(&t.head, b), Some(Some(_))) || matches!(self.resolve(&t.tail, b), Some(Some(_)))
            });
            let Some(i) = next else {
                if done.iter().all(|&d| d) {
                    self.matches += 1;
                    if let Some(&e) = b.get(self.answer) {
                        self.found.insert(e);
                    }
                }
                return;
            };
            let t = &self.triples[i];
            let Some(rel) = self.g.relation_id(&t.relation) else { return };
            let (Some(h), Some(x)) = (self.resolve(&t.head, b), self.resolve(&t.tail, b)) else { return };
            let options: Vec<(EntityId, EntityId)> = match (h, x) {
                (Some(h), Some(x)) => vec![(h, x)],
                (Some(h), None) => self.g.neighbors(h).filter(|k| k.head == h).map(|k| (h, k.tail)).collect(),
                (None, Some(x)) => self.g.neighbors(x).filter(|k| k.tail == x).map(|k| (k.head, x)).collect(),
                (None, None) => unreachable!("selected triples have a bound endpoint"),
            };
            let options: Vec<_> = options
                .into_iter()
                .filter(|&(a, c)| self.g.contains(&Triple::new(a, rel, c)))
                .collect();
            done[i] = true;
            for (a, c) in options {
                let mut added = Vec::new();
                let mut ok = true;
                for (slot, e) in [(&t.head, a), (&t.tail, c)] {
                    if !is_placeholder(slot) || b.contains_key(slot.as_str()) {
                        continue;
                    }
                    if self.concrete.contains(&e) || b.values().any(|&v| v == e) {
                        ok = false;
                        break;
                    }
                    b.insert(slot.clone(), e);
                    added.push(slot.clone());
                }
                if ok {
                    self.go(done, b);
                }
                for s in added {
                    b.remove(&s);
                }
            }
            done[i] = false;
        }
    }
    let concrete: BTreeSet<EntityId> = masked
        .concrete_entities()
        .iter()
        .filter_map(|s| g.entity_id(s))
        .collect();
    let mut s = Search {
        g,
        triples: &masked.triples,
        concrete,
        answer: &masked.answer_placeholder,
        found: BTreeSet::new(),
        matches: 0,
    };
    s.go(&mut vec![false; masked.triples.len()], &mut BTreeMap::new());
    s.found.iter().map(|&e| g.entity_label(e).to_string()).collect()
}

/// `[("h", "r", "t"), ...]` with JSON string quoting.
pub fn render_triple_list(triples: &[LabelTriple]) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("strings serialize");
    let items: Vec<String> = triples
        .iter()
        .map(|t| format!("({}, {}, {})", q(&t.head), q(&t.relation), q(&t.tail)))
        .collect();
    format!("[{}]", items.join(", "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub question: String,
    pub assertions: Vec<String>,
}

pub const NO_SOLUTION: &str = "No Solution";

/// Parses `[(Sentence_1, ...), Question]`; `Ok(None)` for a refusal.
pub fn parse_generation(text: &str, expected_sentences: usize) -> Result<Option<Generated>, String> {
    let body = text.trim();
    if body.trim_matches(|c: char| !c.is_alphanumeric()).eq_ignore_ascii_case(NO_SOLUTION) {
        return Ok(None);
    }
    let sentences = first_list_atoms(body).ok_or_else(|| "no sentence tuple".to_string())?;
    if sentences.len() != expected_sentences {
        return Err(format!("{} sentences for {expected_sentences} triples", sentences.len()));
    }
    let close = body.rfind(')').ok_or_else(|| "no sentence tuple".to_string())?;
    let question = body[close + 1..]
        .trim()
        .trim_start_matches(',')
        .trim()
        .trim_end_matches(']')
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\''))
        .trim()
        .to_string();
    if question.is_empty() {
        return Err("missing question".into());
    }
    Ok(Some(Generated {
        question,
        assertions: sentences.into_iter().map(|s| s.trim().to_string()).collect(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_attempts: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_attempts: 3,
        }
    }
}

pub fn synthesis_prompt(masked: &Masked) -> Result<String, PromptError> {
    PromptKind::Synthesize.render(&[
        ("Triples", &render_triple_list(&masked.triples)),
        ("Answer Entity", &masked.answer_placeholder),
    ])
}

/// Question and one assertion per masked triple; `Ok(None)` when the model
/// declines.
pub fn reverse_generate(
    client: &dyn ChatClient,
    masked: &Masked,
    cfg: &GenerationConfig,
) -> Result<Option<Generated>, DatagenError> {
    let mentioned = masked
        .triples
        .iter()
        .any(|t| t.head == masked.answer_placeholder || t.tail == masked.answer_placeholder);
    if !mentioned {
        return Err(DatagenError::MissingAnswer(masked.answer_placeholder.clone()));
    }
    let prompt = synthesis_prompt(masked)?;
    let attempts = cfg.max_attempts.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        let completion = client
            .complete(&ChatRequest::new(prompt.clone(), cfg.temperature, 1))?
            .into_iter()
            .next()
            .unwrap_or_default();
        match parse_generation(&completion, masked.triples.len()) {
            Ok(g) => return Ok(g),
            Err(e) => last = e,
        }
    }
    Err(DatagenError::Parse { attempts, last })
}

pub fn label_strategy(answers: &[String]) -> Strategy {
    if answers.len() == 1 {
        Strategy::Precision
    } else {
        Strategy::Breadth
    }
}

pub fn label_strategy_llm(
    client: &dyn ChatClient,
    question: &str,
    assertions: &[String],
) -> Result<Strategy, DatagenError> {
    let prompt = PromptKind::Strategy.render(&[("Question", question), ("Assertions", &render_assertions(assertions))])?;
    let completion = client
        .complete(&ChatRequest::new(prompt, 0.0, 1))?
        .into_iter()
        .next()
        .unwrap_or_default();
    Strategy::parse(&completion).map_err(|e| DatagenError::Parse {
        attempts: 1,
        last: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    #[serde(flatten)]
    pub record: QuestionRecord,
    pub source: String,
    pub sampled_entities: Vec<String>,
    #[serde(with = "crate::kg::triple_array")]
    pub masked_triples: Vec<LabelTriple>,
    pub answer_placeholder: String,
    pub assertions: Vec<String>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone)]
pub struct DatagenConfig {
    pub samples: usize,
    /// Walk lengths drawn uniformly per sample.
    pub lengths: Vec<usize>,
    pub masked_entities: usize,
    pub seed: u64,
    pub generation: GenerationConfig,
    pub llm_strategy: bool,
    pub source: String,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            lengths: vec![1, 2, 3],
            masked_entities: 1,
            seed: 0,
            generation: GenerationConfig::default(),
            llm_strategy: false,
            source: "graph".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatagenStats {
    pub requested: usize,
    pub emitted: usize,
    pub no_solution: usize,
    pub failed: usize,
    /// Emitted records by walk length.
    pub hops: BTreeMap<usize, usize>,
    pub strategies: BTreeMap<String, usize>,
}

enum Outcome {
    Record(Box<SyntheticRecord>),
    NoSolution,
    Failed(String),
}

fn one_sample(g: &KnowledgeGraph, client: &dyn ChatClient, cfg: &DatagenConfig, i: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    let run = || -> Result<Option<SyntheticRecord>, DatagenError> {
        let mut rng = rng;
        let length = match cfg.lengths.as_slice() {
            [] => 1,
            ls => ls[rng.gen_range(0..ls.len())],
        };
        let walk = sample_walk(g, length, &mut rng)?;
        let labelled: Vec<LabelTriple> = walk.triples.iter().map(|t| g.labels_of(t)).collect();
        let masked = mask(&labelled, cfg.masked_entities, &mut rng)?;
        let Some(generated) = reverse_generate(client, &masked, &cfg.generation)? else {
            return Ok(None);
        };
        let answers = collect_answers(g, &masked);
        let strategy = if cfg.llm_strategy {
            label_strategy_llm(client, &generated.question, &generated.assertions)?
        } else {
            label_strategy(&answers)
        };
        let question_entities: Vec<String> = masked.concrete_entities().into_iter().collect();
        let neighborhood: Vec<LabelTriple> = g
            .triples()
            .iter()
            .filter(|t| walk.entities.contains(&t.head) || walk.entities.contains(&t.tail))
            .map(|t| g.labels_of(t))
            .collect();
        Ok(Some(SyntheticRecord {
            record: QuestionRecord {
                id: format!("{}-{i:06}", cfg.source),
                question: generated.question,
                question_entities,
                answers,
                ground_truth_path: labelled,
                triples: neighborhood,
            },
            source: cfg.source.clone(),
            sampled_entities: walk.entities.iter().map(|&e| g.entity_label(e).to_string()).collect(),
            masked_triples: masked.triples,
            answer_placeholder: masked.answer_placeholder,
            assertions: generated.assertions,
            strategy,
        }))
    };
    match run() {
        Ok(Some(r)) => Outcome::Record(Box::new(r)),
        Ok(None) => Outcome::NoSolution,
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

/// Records in sample order; each sample draws from its own seeded stream.
pub fn generate_dataset(
    g: &KnowledgeGraph,
    client: &dyn ChatClient,
    cfg: &DatagenConfig,
) -> (Vec<SyntheticRecord>, DatagenStats) {
    let outcomes: Vec<Outcome> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| one_sample(g, client, cfg, i))
        .collect();
    let mut stats = DatagenStats {
        requested: cfg.samples,
        ..Default::default()
    };
    let mut records = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Record(r) => {
                *stats.hops.entry(r.record.ground_truth_path.len()).or_default() += 1;
                *stats.strategies.entry(r.strategy.to_string()).or_default() += 1;
                records.push(*r);
            }
            Outcome::NoSolution => stats.no_solution += 1,
            Outcome::Failed(e) => {
                log::warn!("sample {i}: {e}");
                stats.failed += 1;
            }
        }
    }
    stats.emitted = records.len();
    (records, stats)
}
