//! Entity scoring with the triple-conditioned GNN and top-K guidance
//! subgraph selection.

pub mod checkpoint;
pub mod model;
pub mod params;
pub mod train;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::kg::{EntityId, KnowledgeGraph, Triple};

pub use model::{bce_loss, forward, grad_check, loss_and_grad, GnnInput, GradCheckReport, LossKind};
pub use params::{Activation, GnnConfig, GnnParams};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("non-finite values after layer {layer}")]
    NonFinite { layer: usize },
    #[error("probability {0} outside (0, 1)")]
    ProbabilityDomain(f64),
    #[error("guidance needs at least one schema triple")]
    EmptySchema,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Number of entities kept for a schema graph with `num_schema_triples` triples.
pub fn guidance_k(num_schema_triples: usize, num_entities: usize) -> usize {
    (4 * num_schema_triples).min(num_entities)
}

/// Top-K entities of the question subgraph and the triples among them.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceGraph {
    pub probabilities: Vec<f64>,
    pub selected: BTreeSet<EntityId>,
    pub k: usize,
}

impl GuidanceGraph {
    /// Keeps the `K` most probable entities, ties broken by smaller id.
    pub fn select(probabilities: Vec<f64>, num_schema_triples: usize) -> Self {
        let k = guidance_k(num_schema_triples, probabilities.len());
        let mut order: Vec<usize> = (0..probabilities.len()).collect();
        order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
        let selected = order[..k].iter().map(|&i| EntityId(i as u32)).collect();
        Self {
            probabilities,
            selected,
            k,
        }
    }

    /// Every entity scores 0.5; selection falls back to id order.
    pub fn uniform(num_entities: usize, num_schema_triples: usize) -> Self {
        Self::select(vec![0.5; num_entities], num_schema_triples)
    }

    pub fn contains_entity(&self, e: EntityId) -> bool {
        self.selected.contains(&e)
    }

    /// Membership in the induced subgraph.
    pub fn contains_triple(&self, t: &Triple) -> bool {
        self.selected.contains(&t.head) && self.selected.contains(&t.tail)
    }

    pub fn triples<'g>(&'g self, g: &'g KnowledgeGraph) -> impl Iterator<Item = &'g Triple> + 'g {
        g.triples().iter().filter(move |t| self.contains_triple(t))
    }
}

/// Scores every entity of the input graph and selects the guidance subgraph.
pub fn guide(params: &GnnParams, input: &GnnInput) -> Result<GuidanceGraph, GnnError> {
    let f = forward(params, input)?;
    Ok(GuidanceGraph::select(f.probabilities, input.triple_features.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_rule() {
        assert_eq!(guidance_k(1, 50), 4);
        assert_eq!(guidance_k(3, 50), 12);
        assert_eq!(guidance_k(3, 7), 7);
    }

    #[test]
    fn selection_breaks_ties_by_id() {
        let g = GuidanceGraph::select(vec![0.2, 0.9, 0.2, 0.2, 0.1], 1);
        let ids: Vec<u32> = g.selected.iter().map(|e| e.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
}
