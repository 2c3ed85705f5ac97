//! Gradient-descent training over per-question instances.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, GnnInput, LossKind};
use super::params::GnnParams;
use super::GnnError;
use crate::kg::KnowledgeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            learning_rate: 1e-5,
            loss: LossKind::PositiveOnly,
            seed: 0,
        }
    }
}

/// Entities of one training question that should be scored as relevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub question_id: String,
    pub positive_entity_ids: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, GnnError> {
    let err = |message: String| GnnError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// One-hot labels over the entities of `g`.
pub fn labels_for(g: &KnowledgeGraph, positives: &[String]) -> Vec<f64> {
    let set: BTreeSet<&str> = positives.iter().map(String::as_str).collect();
    g.entity_ids()
        .map(|e| if set.contains(g.entity_label(e)) { 1.0 } else { 0.0 })
        .collect()
}

pub struct TrainingExample<'g> {
    pub input: GnnInput<'g>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Loss before each parameter update, in update order.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// One plain gradient step per example, examples shuffled per epoch.
pub fn train(
    params: &mut GnnParams,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<TrainReport, GnnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            let (loss, grad) = loss_and_grad(params, &ex.input, &ex.labels, cfg.loss)?;
            if !loss.is_finite() {
                return Err(GnnError::Divergence {
                    step: losses.len(),
                    loss,
                });
            }
            losses.push(loss);
            params.add_scaled(-cfg.learning_rate, &grad);
        }
    }
    Ok(TrainReport {
        steps: losses.len(),
        losses,
    })
}
