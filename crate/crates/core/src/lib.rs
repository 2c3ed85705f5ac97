//! Schema-guided evidence retrieval for knowledge-graph question answering.
//!
//! A question is decomposed into assertion plans, each plan is grounded into a
//! schema graph, a triple-conditioned GNN scores entities of the question
//! subgraph, and a structure-tracing search aligns the schema graph with the
//! knowledge graph to collect evidence for answer generation.

pub mod answerer;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod embedding;
pub mod eval;
pub mod kg;
pub mod llm;
pub mod pipeline;
pub mod projection;
pub mod prompts;
pub mod text;
pub mod guidance;
pub mod tracer;
