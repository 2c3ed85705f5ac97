//! Per-question pipeline: decompose, ground, guide, retrieve, answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answerer::{generate_answer, linearize, AnswerError};
use crate::embedding::Encoder;
use crate::guidance::{guide, GnnError, GnnInput, GnnParams, GuidanceGraph};
use crate::kg::{KgError, LabelTriple, QuestionInstance, QuestionRecord};
use crate::llm::ChatClient;
use crate::projection::{decompose, ground, DecomposeConfig, PlanCandidate, ProjectionError, SchemaGraph, Strategy};
use crate::tracer::{retrieve, AnchorFailure, BiasConfig, EvidenceTriple, GuidedPlan, SearchTrace, TraceContext, TraceError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
}

pub struct Pipeline<'a> {
    pub chat: &'a dyn ChatClient,
    pub encoder: &'a dyn Encoder,
    /// Without parameters every entity gets probability 0.5.
    pub gnn: Option<&'a GnnParams>,
    pub bias: BiasConfig,
    pub decompose: DecomposeConfig,
    pub keep_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub assertions: Vec<String>,
    pub strategy: Strategy,
    #[serde(with = "crate::kg::triple_array")]
    pub schema: Vec<LabelTriple>,
    /// Set when grounding failed; such a plan retrieves nothing.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub guidance_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub question_id: String,
    pub plans: Vec<PlanOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub question_id: String,
    pub triples: Vec<EvidenceTriple>,
    /// Strategy of the top-ranked plan.
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub answers: Vec<String>,
    pub chains_used: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub parse_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    pub searches: Vec<SearchTrace>,
    pub failures: Vec<AnchorFailure>,
    pub chains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionOutput {
    pub plans: PlanRecord,
    pub evidence: EvidenceRecord,
    pub answer: AnswerRecord,
    pub trace: TraceRecord,
}

impl Pipeline<'_> {
    fn guidance(&self, inst: &QuestionInstance, schema: &SchemaGraph) -> Result<GuidanceGraph, PipelineError> {
        let t = schema.edges().len();
        Ok(match self.gnn {
            Some(params) => {
                let input = GnnInput::build(&inst.graph, &inst.question_entities, &schema.label_triples(), self.encoder)?;
                guide(params, &input)?
            }
            None => GuidanceGraph::uniform(inst.graph.num_entities(), t),
        })
    }

    pub fn run(&self, record: &QuestionRecord) -> Result<QuestionOutput, PipelineError> {
        let qid = record.id.clone();
        let inst = QuestionInstance::from_record(record.clone())?;
        let candidates: Vec<PlanCandidate> = decompose(self.chat, &record.question, &self.decompose)?;

        let mut outcomes = Vec::new();
        let mut grounded: Vec<(usize, SchemaGraph, GuidanceGraph)> = Vec::new();
        for plan in &candidates {
            match ground(self.chat, plan) {
                Ok(schema) => {
                    let guidance = self.guidance(&inst, &schema)?;
                    outcomes.push(PlanOutcome {
                        assertions: plan.assertions.clone(),
                        strategy: plan.strategy,
                        schema: schema.label_triples(),
                        error: None,
                        guidance_k: guidance.k,
                    });
                    grounded.push((outcomes.len() - 1, schema, guidance));
                }
                Err(e) => {
                    log::warn!("{qid}: plan not grounded: {e}");
                    outcomes.push(PlanOutcome {
                        assertions: plan.assertions.clone(),
                        strategy: plan.strategy,
                        schema: Vec::new(),
                        error: Some(e.to_string()),
                        guidance_k: 0,
                    });
                }
            }
        }

        let ctx = TraceContext::new(&inst.graph, self.encoder, self.bias)?;
        let guided: Vec<GuidedPlan> = grounded
            .iter()
            .map(|(i, schema, guidance)| GuidedPlan {
                schema,
                strategy: candidates[*i].strategy,
                guidance,
            })
            .collect();
        let mut evidence = retrieve(&ctx, &guided, &record.question_entities, self.keep_trace)?;
        // Provenance refers to the position among all candidate plans.
        for t in &mut evidence.triples {
            t.plan_idx = grounded[t.plan_idx].0;
        }
        for s in &mut evidence.traces {
            s.plan_idx = grounded[s.plan_idx].0;
        }
        for f in &mut evidence.failures {
            f.plan_idx = grounded[f.plan_idx].0;
        }

        let chains = linearize(&evidence.label_triples(), &record.question_entities);
        let generated = generate_answer(self.chat, &record.question, &chains)?;
        let strategy = candidates.first().map(|p| p.strategy).unwrap_or(Strategy::Precision);
        Ok(QuestionOutput {
            plans: PlanRecord {
                question_id: qid.clone(),
                plans: outcomes,
            },
            evidence: EvidenceRecord {
                question_id: qid.clone(),
                triples: evidence.triples,
                strategy,
            },
            answer: AnswerRecord {
                question_id: qid.clone(),
                answers: generated.answers,
                chains_used: chains.len(),
                parse_warning: generated.parse_warning,
            },
            trace: TraceRecord {
                question_id: qid,
                searches: evidence.traces,
                failures: evidence.failures,
                chains: chains.chains.iter().map(|c| c.verbalize()).collect(),
            },
        })
    }
}
