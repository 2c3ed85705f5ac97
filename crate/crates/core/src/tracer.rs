//! Structure-tracing retrieval: anchor a schema graph in the knowledge graph
//! and extend the match edge by edge.
//!
//! Search state per branch:
//! - a binding from schema nodes to entities, kept injective, so a schema node
//!   never rebinds to a different entity;
//! - the set of schema edges already attempted, each matched at most once.
//!
//! The matched-triple list is shared by every branch of one anchored search,
//! so no knowledge-graph triple is committed twice. Placeholders match any
//! entity; concrete schema nodes other than the anchor constrain candidates
//! only through similarity. Entity bias applies at anchoring only; triple
//! bias applies to every step score.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, verbalize_triple, EmbeddingError, Encoder, EntityIndex, Vector};
use crate::guidance::GuidanceGraph;
use crate::kg::{EntityId, KnowledgeGraph, LabelTriple};
use crate::projection::{SchemaGraph, Strategy};
use crate::text::fuzzy_ratio;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("schema graph has no concrete node to anchor on")]
    NoConcreteNode,
    #[error("no anchor candidate for `{0}`")]
    NoCandidate(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    /// Multiplier for anchor candidates inside the guidance subgraph.
    pub entity_bias: f64,
    /// Added to the step score of triples inside the guidance subgraph.
    pub triple_bias: f64,
    /// Minimum step score a Breadth candidate needs.
    pub threshold: f64,
    pub anchor_top_n: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            entity_bias: 1.5,
            triple_bias: 0.5,
            threshold: 0.6,
            anchor_top_n: 50,
        }
    }
}

/// Semantic similarity plus the guidance bonus.
pub fn t_score(similarity: f64, in_guidance: bool, cfg: &BiasConfig) -> f64 {
    if in_guidance {
        similarity + cfg.triple_bias
    } else {
        similarity
    }
}

/// Multiplies guidance entities by the entity bias and re-sorts, score
/// descending then id ascending.
pub fn rectify_entity_scores(
    mut scores: Vec<(EntityId, f64)>,
    guidance: &GuidanceGraph,
    cfg: &BiasConfig,
) -> Vec<(EntityId, f64)> {
    for (e, s) in scores.iter_mut() {
        if guidance.contains_entity(*e) {
            *s *= cfg.entity_bias;
        }
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scores
}

/// Precomputed vectors for one question subgraph.
pub struct TraceContext<'a> {
    pub graph: &'a KnowledgeGraph,
    pub encoder: &'a dyn Encoder,
    pub index: EntityIndex,
    triple_vectors: Vec<Vector>,
    pub cfg: BiasConfig,
}

impl<'a> TraceContext<'a> {
    pub fn new(graph: &'a KnowledgeGraph, encoder: &'a dyn Encoder, cfg: BiasConfig) -> Result<Self, TraceError> {
        let index = EntityIndex::build(graph, encoder)?;
        let texts: Vec<String> = graph
            .triples()
            .iter()
            .map(|t| {
                verbalize_triple(
                    graph.entity_label(t.head),
                    graph.relation_label(t.relation),
                    graph.entity_label(t.tail),
                )
            })
            .collect();
        let triple_vectors = encoder.encode_batch(&texts)?;
        Ok(Self {
            graph,
            encoder,
            index,
            triple_vectors,
            cfg,
        })
    }

    pub fn schema_vectors(&self, schema: &SchemaGraph) -> Result<Vec<Vector>, TraceError> {
        let texts: Vec<String> = schema
            .label_triples()
            .iter()
            .map(|t| verbalize_triple(&t.head, &t.relation, &t.tail))
            .collect();
        Ok(self.encoder.encode_batch(&texts)?)
    }

    pub fn similarity(&self, schema_vector: &[f64], triple_idx: usize) -> f64 {
        cosine(schema_vector, &self.triple_vectors[triple_idx])
    }

    /// Anchors the question entity on both sides.
    pub fn anchor(
        &self,
        schema: &SchemaGraph,
        question_entity: &str,
        guidance: &GuidanceGraph,
    ) -> Result<Anchor, TraceError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, label) in schema.concrete_nodes() {
            let r = fuzzy_ratio(question_entity, label);
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((i, r));
            }
        }
        let (schema_node, _) = best.ok_or(TraceError::NoConcreteNode)?;
        let query = self.encoder.encode(question_entity)?;
        let top = self.index.top_n(&query, self.cfg.anchor_top_n);
        let rectified = rectify_entity_scores(top, guidance, &self.cfg);
        let (entity, score) = *rectified
            .first()
            .ok_or_else(|| TraceError::NoCandidate(question_entity.to_string()))?;
        Ok(Anchor {
            schema_node,
            entity,
            score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub schema_node: usize,
    pub entity: EntityId,
    /// Rectified anchor score; the initial cumulative score.
    pub score: f64,
}

/// A scored knowledge-graph triple that could extend the match by one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCandidate {
    pub triple_idx: usize,
    /// Endpoint reached through the triple.
    pub entity: EntityId,
    pub similarity: f64,
    pub t_score: f64,
}

/// Strictly greater than the best so far, starting from -1; the first of
/// equal scores wins, which in neighbor order is the lexicographically
/// smallest triple.
pub fn select_precision(cumulative: f64, candidates: &[StepCandidate]) -> Option<(StepCandidate, f64)> {
    let mut max_score = -1.0;
    let mut best = None;
    for c in candidates {
        let s = cumulative + c.t_score;
        if s > max_score {
            max_score = s;
            best = Some(*c);
        }
    }
    best.map(|c| (c, max_score))
}

/// Every candidate whose step score reaches the threshold.
pub fn select_breadth(candidates: &[StepCandidate], threshold: f64) -> Vec<StepCandidate> {
    candidates.iter().filter(|c| c.t_score >= threshold).copied().collect()
}

#[derive(Debug, Clone, Default)]
struct Branch {
    node_binding: BTreeMap<usize, EntityId>,
    entity_binding: BTreeMap<EntityId, usize>,
    visited: BTreeSet<usize>,
}

impl Branch {
    fn bind(&mut self, node: usize, e: EntityId) {
        self.node_binding.insert(node, e);
        self.entity_binding.insert(e, node);
    }
}

/// One committed triple with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedTriple {
    pub triple: LabelTriple,
    pub schema_edge: LabelTriple,
    pub step_score: f64,
    pub cumulative_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub triple: LabelTriple,
    pub similarity: f64,
    pub bias: f64,
    pub t_score: f64,
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub schema_edge: LabelTriple,
    pub from_entity: String,
    pub cumulative_score: f64,
    pub candidates: Vec<CandidateTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the graph's triples, in commit order.
    pub triples: Vec<usize>,
    pub matched: Vec<MatchedTriple>,
    pub trace: Vec<TraceStep>,
}

struct Search<'s, 'a> {
    ctx: &'s TraceContext<'a>,
    schema: &'s SchemaGraph,
    schema_vectors: &'s [Vector],
    guidance: &'s GuidanceGraph,
    strategy: Strategy,
    final_list: BTreeSet<usize>,
    result: MatchResult,
    keep_trace: bool,
}

impl Search<'_, '_> {
    fn candidates(&self, branch: &Branch, edge: usize, node: usize, entity: EntityId) -> Vec<StepCandidate> {
        let g = self.ctx.graph;
        let other = self.schema.other_end(edge, node);
        let mut out = Vec::new();
        for &ti in g.incident_indices(entity) {
            if self.final_list.contains(&ti) {
                continue;
            }
            let t = &g.triples()[ti];
            let reached = g.get_tail(t, entity).expect("incident triple touches entity");
            let consistent = match branch.node_binding.get(&other) {
                Some(&bound) => bound == reached,
                None => !branch.entity_binding.contains_key(&reached),
            };
            if !consistent {
                continue;
            }
            let similarity = self.ctx.similarity(&self.schema_vectors[edge], ti);
            out.push(StepCandidate {
                triple_idx: ti,
                entity: reached,
                similarity,
                t_score: t_score(similarity, self.guidance.contains_triple(t), &self.ctx.cfg),
            });
        }
        out
    }

    fn commit(&mut self, edge: usize, c: &StepCandidate, cumulative: f64) {
        self.final_list.insert(c.triple_idx);
        self.result.triples.push(c.triple_idx);
        let g = self.ctx.graph;
        self.result.matched.push(MatchedTriple {
            triple: g.labels_of(&g.triples()[c.triple_idx]),
            schema_edge: self.schema.edge_labels(edge),
            step_score: c.t_score,
            cumulative_score: cumulative,
        });
    }

    fn record(&mut self, edge: usize, entity: EntityId, cumulative: f64, cands: &[StepCandidate], committed: &[usize]) {
        if !self.keep_trace {
            return;
        }
        let g = self.ctx.graph;
        self.result.trace.push(TraceStep {
            schema_edge: self.schema.edge_labels(edge),
            from_entity: g.entity_label(entity).to_string(),
            cumulative_score: cumulative,
            candidates: cands
                .iter()
                .map(|c| CandidateTrace {
                    triple: g.labels_of(&g.triples()[c.triple_idx]),
                    similarity: c.similarity,
                    bias: c.t_score - c.similarity,
                    t_score: c.t_score,
                    committed: committed.contains(&c.triple_idx),
                })
                .collect(),
        });
    }

    fn match_node(&mut self, branch: &mut Branch, node: usize, entity: EntityId, score: f64, last_visit: Option<usize>) {
        for &edge in self.schema.incident(node) {
            if Some(edge) == last_visit || branch.visited.contains(&edge) {
                continue;
            }
            branch.visited.insert(edge);
            match self.strategy {
                Strategy::Precision => self.step_precision(branch, edge, node, entity, score),
                Strategy::Breadth => self.step_breadth(branch, edge, node, entity, score),
            }
        }
    }

    fn step_precision(&mut self, branch: &mut Branch, edge: usize, node: usize, entity: EntityId, score: f64) {
        let cands = self.candidates(branch, edge, node, entity);
        let pick = select_precision(score, &cands);
        self.record(edge, entity, score, &cands, &pick.iter().map(|(c, _)| c.triple_idx).collect::<Vec<_>>());
        if let Some((c, max_score)) = pick {
            self.commit(edge, &c, max_score);
            let other = self.schema.other_end(edge, node);
            branch.bind(other, c.entity);
            self.match_node(branch, other, c.entity, max_score, Some(edge));
        }
    }

    fn step_breadth(&mut self, branch: &mut Branch, edge: usize, node: usize, entity: EntityId, score: f64) {
        let cands = self.candidates(branch, edge, node, entity);
        let picks = select_breadth(&cands, self.ctx.cfg.threshold);
        self.record(edge, entity, score, &cands, &picks.iter().map(|c| c.triple_idx).collect::<Vec<_>>());
        for c in &picks {
            self.commit(edge, c, score + c.t_score);
        }
        let other = self.schema.other_end(edge, node);
        for c in &picks {
            let mut child = branch.clone();
            child.bind(other, c.entity);
            self.match_node(&mut child, other, c.entity, score + c.t_score, Some(edge));
            branch.visited.extend(child.visited);
        }
    }
}

/// Matches the schema graph outward from an anchor.
pub fn match_from(
    ctx: &TraceContext,
    schema: &SchemaGraph,
    schema_vectors: &[Vector],
    guidance: &GuidanceGraph,
    anchor: &Anchor,
    strategy: Strategy,
    keep_trace: bool,
) -> MatchResult {
    let mut search = Search {
        ctx,
        schema,
        schema_vectors,
        guidance,
        strategy,
        final_list: BTreeSet::new(),
        result: MatchResult {
            triples: Vec::new(),
            matched: Vec::new(),
            trace: Vec::new(),
        },
        keep_trace,
    };
    let mut branch = Branch::default();
    branch.bind(anchor.schema_node, anchor.entity);
    search.match_node(&mut branch, anchor.schema_node, anchor.entity, anchor.score, None);
    search.result
}

/// A plan ready for retrieval.
pub struct GuidedPlan<'p> {
    pub schema: &'p SchemaGraph,
    pub strategy: Strategy,
    pub guidance: &'p GuidanceGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
    pub plan_idx: usize,
    pub anchor: String,
}

impl EvidenceTriple {
    pub fn labels(&self) -> LabelTriple {
        LabelTriple::new(&self.head, &self.relation, &self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub plan_idx: usize,
    pub anchor: String,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFailure {
    pub plan_idx: usize,
    pub question_entity: String,
    pub reason: String,
}

/// Union of all anchored matches for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// Sorted by triple; the first provenance in (plan, anchor) order is kept.
    pub triples: Vec<EvidenceTriple>,
    pub traces: Vec<SearchTrace>,
    pub failures: Vec<AnchorFailure>,
}

impl Evidence {
    pub fn label_triples(&self) -> Vec<LabelTriple> {
        self.triples.iter().map(EvidenceTriple::labels).collect()
    }
}

/// Anchors every plan on every question entity and merges the matches.
pub fn retrieve(
    ctx: &TraceContext,
    plans: &[GuidedPlan],
    question_entities: &[String],
    keep_trace: bool,
) -> Result<Evidence, TraceError> {
    let schema_vectors: Vec<Vec<Vector>> = plans
        .iter()
        .map(|p| ctx.schema_vectors(p.schema))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|p| (0..question_entities.len()).map(move |q| (p, q)))
        .collect();
    let outcomes: Vec<Result<(MatchResult, Anchor), TraceError>> = jobs
        .par_iter()
        .map(|&(p, q)| {
            let plan = &plans[p];
            let anchor = ctx.anchor(plan.schema, &question_entities[q], plan.guidance)?;
            let m = match_from(ctx, plan.schema, &schema_vectors[p], plan.guidance, &anchor, plan.strategy, keep_trace);
            Ok((m, anchor))
        })
        .collect();

    let mut by_triple: BTreeMap<LabelTriple, EvidenceTriple> = BTreeMap::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (&(p, q), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((m, anchor)) => {
                let anchor_label = ctx.graph.entity_label(anchor.entity).to_string();
                for mt in &m.matched {
                    by_triple.entry(mt.triple.clone()).or_insert_with(|| EvidenceTriple {
                        head: mt.triple.head.clone(),
                        relation: mt.triple.relation.clone(),
                        tail: mt.triple.tail.clone(),
                        score: mt.step_score,
                        plan_idx: p,
                        anchor: anchor_label.clone(),
                    });
                }
                if keep_trace {
                    traces.push(SearchTrace {
                        plan_idx: p,
                        anchor: anchor_label,
                        steps: m.trace,
                    });
                }
            }
            Err(e) => failures.push(AnchorFailure {
                plan_idx: p,
                question_entity: question_entities[q].clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(Evidence {
        triples: by_triple.into_values().collect(),
        traces,
        failures,
    })
}
