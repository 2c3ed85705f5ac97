//! Command-line surface: `index`, `run`, `eval`, `train-gnn`, `datagen`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::datagen::{generate_dataset, DatagenConfig, GenerationConfig};
use crate::embedding::{CachedEncoder, EntityIndex, Encoder};
use crate::eval::{report, score_question, write_csv, QuestionOutcome, QuestionScores};
use crate::guidance::checkpoint;
use crate::guidance::train::{labels_for, load_manifest, train, TrainConfig, TrainingExample};
use crate::guidance::{grad_check, GnnInput, GnnParams};
use crate::kg::{load_questions, load_triples, GraphBuilder, KnowledgeGraph, QuestionInstance, QuestionRecord};
use crate::pipeline::{AnswerRecord, EvidenceRecord, Pipeline, PlanRecord, QuestionOutput};
use crate::projection::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum Exit {
    Ok = 0,
    Validation = 1,
    Runtime = 2,
    Partial = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

fn validation(e: impl std::fmt::Display) -> Failure {
    Failure {
        exit: Exit::Validation,
        message: e.to_string(),
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        exit: Exit::Runtime,
        message: e.to_string(),
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        validation(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "schematrace", version, about = "Schema-guided evidence retrieval for KGQA")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write per-step candidate traces.
    #[arg(long, global = true)]
    pub trace: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed every entity label into the vector cache.
    Index,
    /// Answer questions end to end.
    Run(RunArgs),
    /// Score a run directory against the question file.
    Eval(EvalArgs),
    /// Train the guidance GNN from a manifest of positive entities.
    TrainGnn,
    /// Synthesize questions from random walks over the graph.
    Datagen(DatagenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Only these question ids; all questions when omitted.
    pub question_ids: Vec<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `run`; defaults to `paths.output`.
    pub run_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub const PLANS_FILE: &str = "plans.jsonl";
pub const EVIDENCE_FILE: &str = "evidence.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Validation as i32 } else { Exit::Ok as i32 };
        }
    };
    match execute(&cli) {
        Ok(exit) => exit as i32,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.exit as i32
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.trace {
        cfg.trace = true;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<Exit, Failure> {
    let cfg = load_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(runtime)?;
    pool.install(|| match &cli.command {
        Command::Index => cmd_index(&cfg),
        Command::Run(a) => cmd_run(&cfg, &a.question_ids, a.output.as_deref()),
        Command::Eval(a) => cmd_eval(&cfg, a.run_output.as_deref()),
        Command::TrainGnn => cmd_train_gnn(&cfg),
        Command::Datagen(a) => cmd_datagen(&cfg, a.samples, a.output.as_deref()),
    })
}

fn encoder(cfg: &RunConfig) -> Result<CachedEncoder<crate::config::AnyEncoder>, Failure> {
    let inner = cfg.build_encoder()?;
    match &cfg.paths.cache {
        Some(p) => CachedEncoder::with_file(inner, p).map_err(runtime),
        None => Ok(CachedEncoder::in_memory(inner)),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(runtime)?;
        writeln!(w, "{line}").map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let file = File::open(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| validation(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| validation(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn index_graph(cfg: &RunConfig) -> Result<KnowledgeGraph, Failure> {
    if cfg.paths.graph.is_some() {
        let p = cfg.require_path("graph", &cfg.paths.graph)?;
        return load_triples(&p).map_err(validation);
    }
    let p = cfg.require_path("questions", &cfg.paths.questions)?;
    let mut b = GraphBuilder::default();
    for q in load_questions(&p).map_err(validation)? {
        for t in q.triples {
            b.add(t);
        }
    }
    Ok(b.build())
}

pub fn cmd_index(cfg: &RunConfig) -> Result<Exit, Failure> {
    if cfg.paths.cache.is_none() {
        return Err(validation("paths.cache is required for index"));
    }
    let g = index_graph(cfg)?;
    let enc = encoder(cfg)?;
    let report = enc.load_report();
    let index = EntityIndex::build(&g, &enc).map_err(runtime)?;
    println!(
        "indexed {} entities: {} new encodings, {} cached vectors, {} corrupt records dropped",
        index.len(),
        enc.new_encodings(),
        enc.cached_len(),
        report.dropped
    );
    Ok(Exit::Ok)
}

fn load_gnn(cfg: &RunConfig, dim: usize) -> Result<Option<GnnParams>, Failure> {
    let Some(path) = cfg.paths.checkpoint.as_ref().filter(|p| p.exists()) else {
        log::warn!("no guidance checkpoint; every entity gets probability 0.5");
        return Ok(None);
    };
    let params = checkpoint::load(path).map_err(validation)?;
    if params.config.input_dim != dim {
        return Err(validation(format!(
            "checkpoint input dimension {} does not match encoder dimension {dim}",
            params.config.input_dim
        )));
    }
    Ok(Some(params))
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    question_id: &'a str,
    error: String,
}

pub fn cmd_run(cfg: &RunConfig, question_ids: &[String], output: Option<&Path>) -> Result<Exit, Failure> {
    let qpath = cfg.require_path("questions", &cfg.paths.questions)?;
    let out_dir = output
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| validation("no output directory (paths.output or --output)"))?;
    let mut questions = load_questions(&qpath).map_err(validation)?;
    if !question_ids.is_empty() {
        let wanted: BTreeSet<&str> = question_ids.iter().map(String::as_str).collect();
        let known: BTreeSet<&str> = questions.iter().map(|q| q.id.as_str()).collect();
        if let Some(missing) = wanted.difference(&known).next() {
            return Err(validation(format!("unknown question id `{missing}`")));
        }
        questions.retain(|q| wanted.contains(q.id.as_str()));
    }
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    let chat = cfg.build_chat()?;
    let enc = encoder(cfg)?;
    let gnn = load_gnn(cfg, enc.dimension())?;
    let pipeline = Pipeline {
        chat: &chat,
        encoder: &enc,
        gnn: gnn.as_ref(),
        bias: cfg.bias,
        decompose: cfg.decompose(),
        keep_trace: cfg.trace,
    };
    let results: Vec<Result<QuestionOutput, String>> = questions
        .par_iter()
        .map(|q| pipeline.run(q).map_err(|e| e.to_string()))
        .collect();

    let mut plans = Vec::new();
    let mut evidence = Vec::new();
    let mut answers = Vec::new();
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for (q, r) in questions.iter().zip(results) {
        match r {
            Ok(o) => {
                plans.push(o.plans);
                evidence.push(o.evidence);
                answers.push(o.answer);
                traces.push(o.trace);
            }
            Err(e) => {
                log::error!("{}: {e}", q.id);
                errors.push(ErrorRecord {
                    question_id: &q.id,
                    error: e,
                });
            }
        }
    }
    write_jsonl(&out_dir.join(PLANS_FILE), &plans)?;
    write_jsonl(&out_dir.join(EVIDENCE_FILE), &evidence)?;
    write_jsonl(&out_dir.join(ANSWERS_FILE), &answers)?;
    write_jsonl(&out_dir.join(ERRORS_FILE), &errors)?;
    if cfg.trace {
        write_jsonl(&out_dir.join(TRACES_FILE), &traces)?;
    }
    if let Some(p) = &cfg.paths.record_fixtures {
        chat.save_recording(p).map_err(runtime)?;
    }
    println!(
        "answered {} of {} questions into {}",
        answers.len(),
        questions.len(),
        out_dir.display()
    );
    Ok(if errors.is_empty() { Exit::Ok } else { Exit::Partial })
}

fn gold_strategies(path: &Path) -> Result<BTreeMap<String, Strategy>, Failure> {
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    Ok(rows
        .iter()
        .filter_map(|v| {
            let id = v.get("id")?.as_str()?;
            let s = Strategy::parse(v.get("strategy")?.as_str()?).ok()?;
            Some((id.to_string(), s))
        })
        .collect())
}

pub fn cmd_eval(cfg: &RunConfig, run_output: Option<&Path>) -> Result<Exit, Failure> {
    let qpath = cfg.require_path("questions", &cfg.paths.questions)?;
    let dir = run_output
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| validation("no run directory"))?;
    let questions: BTreeMap<String, QuestionRecord> = load_questions(&qpath)
        .map_err(validation)?
        .into_iter()
        .map(|q| (q.id.clone(), q))
        .collect();
    let gold_strategy = gold_strategies(&qpath)?;
    let answers: Vec<AnswerRecord> = read_jsonl(&dir.join(ANSWERS_FILE))?;
    if answers.is_empty() {
        return Err(validation(format!("{} has no answers", dir.join(ANSWERS_FILE).display())));
    }
    let evidence: BTreeMap<String, EvidenceRecord> = read_jsonl::<EvidenceRecord>(&dir.join(EVIDENCE_FILE))?
        .into_iter()
        .map(|e| (e.question_id.clone(), e))
        .collect();
    let plans: BTreeMap<String, PlanRecord> = read_jsonl::<PlanRecord>(&dir.join(PLANS_FILE))?
        .into_iter()
        .map(|p| (p.question_id.clone(), p))
        .collect();

    let mut scores: Vec<QuestionScores> = Vec::new();
    for a in &answers {
        let q = questions
            .get(&a.question_id)
            .ok_or_else(|| validation(format!("answer for unknown question `{}`", a.question_id)))?;
        let ev = evidence
            .get(&a.question_id)
            .ok_or_else(|| validation(format!("no evidence record for `{}`", a.question_id)))?;
        let schema: Vec<_> = plans
            .get(&a.question_id)
            .map(|p| {
                p.plans
                    .iter()
                    .flat_map(|pl| pl.schema.iter().cloned())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .unwrap_or_default();
        scores.push(score_question(
            &QuestionOutcome {
                question_id: a.question_id.clone(),
                predicted: a.answers.clone(),
                gold: q.answers.clone(),
                ground_truth_path: q.ground_truth_path.clone(),
                evidence: ev.triples.iter().map(|t| t.labels()).collect(),
                schema,
                strategy: Some(ev.strategy),
                gold_strategy: gold_strategy.get(&a.question_id).copied(),
            },
            cfg.coverage_mode,
        ));
    }
    let metrics = report(&scores, cfg.coverage_mode);
    let json = serde_json::to_string_pretty(&metrics).map_err(runtime)?;
    std::fs::write(dir.join("metrics.json"), json + "\n").map_err(runtime)?;
    let csv = File::create(dir.join("metrics.csv")).map_err(runtime)?;
    write_csv(&scores, csv).map_err(runtime)?;
    print!("{}", metrics.table());
    Ok(Exit::Ok)
}

pub fn cmd_train_gnn(cfg: &RunConfig) -> Result<Exit, Failure> {
    let manifest_path = cfg.require_path("manifest", &cfg.paths.manifest)?;
    let qpath = cfg.require_path("questions", &cfg.paths.questions)?;
    let out = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| validation("paths.checkpoint is required for train-gnn"))?;
    let manifest = load_manifest(&manifest_path).map_err(validation)?;
    let questions: BTreeMap<String, QuestionRecord> = load_questions(&qpath)
        .map_err(validation)?
        .into_iter()
        .map(|q| (q.id.clone(), q))
        .collect();
    let enc = encoder(cfg)?;
    let instances: Vec<(QuestionInstance, Vec<String>)> = manifest
        .iter()
        .map(|m| {
            let q = questions
                .get(&m.question_id)
                .ok_or_else(|| validation(format!("manifest names unknown question `{}`", m.question_id)))?;
            if q.ground_truth_path.is_empty() {
                return Err(validation(format!("question `{}` has no ground-truth path", q.id)));
            }
            Ok((QuestionInstance::from_record(q.clone()).map_err(validation)?, m.positive_entity_ids.clone()))
        })
        .collect::<Result<_, _>>()?;
    let examples: Vec<TrainingExample> = instances
        .iter()
        .map(|(inst, positives)| {
            let input = GnnInput::build(&inst.graph, &inst.question_entities, &inst.record.ground_truth_path, &enc)
                .map_err(runtime)?;
            Ok(TrainingExample {
                input,
                labels: labels_for(&inst.graph, positives),
            })
        })
        .collect::<Result<_, Failure>>()?;

    let gnn_cfg = cfg.gnn_config()?;
    let mut params = GnnParams::init(gnn_cfg, cfg.seed);
    let tc = TrainConfig {
        epochs: cfg.gnn.epochs,
        learning_rate: cfg.gnn.learning_rate,
        loss: cfg.gnn.loss()?,
        seed: cfg.seed,
    };
    let report = train(&mut params, &examples, &tc).map_err(runtime)?;
    for (i, l) in report.losses.iter().enumerate() {
        println!("step {i:>6}  loss {l:.6}");
    }
    if let Some(ex) = examples.first() {
        let gc = grad_check(&params, &ex.input, &ex.labels, tc.loss, 1e-4, Some(8)).map_err(runtime)?;
        println!(
            "grad check: max relative error {:.3e} over {} probes",
            gc.max_relative_error, gc.checked
        );
        if gc.max_relative_error >= cfg.gnn.grad_check_tolerance {
            return Err(runtime(format!(
                "grad check failed: {:.3e} >= {:.1e}; checkpoint not written",
                gc.max_relative_error, cfg.gnn.grad_check_tolerance
            )));
        }
    }
    checkpoint::save(&params, &out).map_err(runtime)?;
    let curve = out.with_extension("losses.json");
    std::fs::write(&curve, serde_json::to_string(&report).map_err(runtime)? + "\n").map_err(runtime)?;
    println!("{} steps; checkpoint {}", report.steps, out.display());
    Ok(Exit::Ok)
}

pub fn cmd_datagen(cfg: &RunConfig, samples: Option<usize>, output: Option<&Path>) -> Result<Exit, Failure> {
    let gpath = cfg.require_path("graph", &cfg.paths.graph)?;
    let out_dir = output
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| validation("no output directory (paths.output or --output)"))?;
    let g = load_triples(&gpath).map_err(validation)?;
    let chat = cfg.build_chat()?;
    let d = &cfg.datagen;
    let dc = DatagenConfig {
        samples: samples.unwrap_or(d.samples),
        lengths: d.lengths.clone(),
        masked_entities: d.masked_entities,
        seed: cfg.seed,
        generation: GenerationConfig {
            temperature: d.temperature,
            max_attempts: d.max_attempts,
        },
        llm_strategy: d.llm_strategy,
        source: gpath
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "graph".into()),
    };
    let (records, stats) = generate_dataset(&g, &chat, &dc);
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    write_jsonl(&out_dir.join("synthetic.jsonl"), &records)?;
    std::fs::write(
        out_dir.join("datagen_stats.json"),
        serde_json::to_string_pretty(&stats).map_err(runtime)? + "\n",
    )
    .map_err(runtime)?;
    if let Some(p) = &cfg.paths.record_fixtures {
        chat.save_recording(p).map_err(runtime)?;
    }
    println!(
        "emitted {} of {} samples ({} no solution, {} failed)",
        stats.emitted, stats.requested, stats.no_solution, stats.failed
    );
    for (hops, n) in &stats.hops {
        println!("  {hops}-hop: {n}");
    }
    for (s, n) in &stats.strategies {
        println!("  {s}: {n}");
    }
    if stats.emitted == 0 && stats.requested > 0 {
        return Err(runtime("no record was emitted"));
    }
    Ok(Exit::Ok)
}
