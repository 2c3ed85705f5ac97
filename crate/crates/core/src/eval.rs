//! Answer, coverage, schema and attribution metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kg::LabelTriple;
use crate::projection::Strategy;
use crate::text::{is_placeholder, normalize_answer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageMode {
    #[default]
    Exact,
    /// `(h, r, t)` and `(t, r, h)` count as the same triple.
    Undirected,
}

fn key(t: &LabelTriple, mode: CoverageMode) -> (String, String, String) {
    let (h, r, x) = (t.head.trim(), t.relation.trim(), t.tail.trim());
    match mode {
        CoverageMode::Undirected if x < h => (x.into(), r.into(), h.into()),
        _ => (h.into(), r.into(), x.into()),
    }
}

/// Fraction of distinct ground-truth triples present in the evidence;
/// `None` for an empty ground truth.
pub fn coverage_rate(ground_truth: &[LabelTriple], evidence: &[LabelTriple], mode: CoverageMode) -> Option<f64> {
    let gt: BTreeSet<_> = ground_truth.iter().map(|t| key(t, mode)).collect();
    if gt.is_empty() {
        return None;
    }
    let ev: BTreeSet<_> = evidence.iter().map(|t| key(t, mode)).collect();
    Some(gt.intersection(&ev).count() as f64 / gt.len() as f64)
}

fn answer_set(answers: &[String]) -> BTreeSet<String> {
    answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect()
}

pub fn hit_at_1(predicted: &[String], gold: &[String]) -> f64 {
    let gold = answer_set(gold);
    match predicted.first() {
        Some(p) if gold.contains(&normalize_answer(p)) => 1.0,
        _ => 0.0,
    }
}

pub fn answer_f1(predicted: &[String], gold: &[String]) -> f64 {
    let (p, g) = (answer_set(predicted), answer_set(gold));
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let hits = p.intersection(&g).count() as f64;
    f1(hits / p.len() as f64, hits / g.len() as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when either side was empty; the scores are then 0.
    pub defined: bool,
}

fn slot_matches(schema: &str, truth: &str) -> bool {
    is_placeholder(schema.trim()) || normalize_answer(schema) == normalize_answer(truth)
}

/// Same orientation, identical relation, entity slots equal after answer
/// normalization unless the schema slot is a placeholder.
pub fn schema_triple_matches(schema: &LabelTriple, truth: &LabelTriple) -> bool {
    schema.relation.trim() == truth.relation.trim()
        && slot_matches(&schema.head, &truth.head)
        && slot_matches(&schema.tail, &truth.tail)
}

pub fn schema_prf(ground_truth_path: &[LabelTriple], schema: &[LabelTriple]) -> Prf {
    if ground_truth_path.is_empty() || schema.is_empty() {
        return Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            defined: false,
        };
    }
    let matched_schema = schema
        .iter()
        .filter(|s| ground_truth_path.iter().any(|g| schema_triple_matches(s, g)))
        .count();
    let matched_truth = ground_truth_path
        .iter()
        .filter(|g| schema.iter().any(|s| schema_triple_matches(s, g)))
        .count();
    let precision = matched_schema as f64 / schema.len() as f64;
    let recall = matched_truth as f64 / ground_truth_path.len() as f64;
    Prf {
        precision,
        recall,
        f1: f1(precision, recall),
        defined: true,
    }
}

/// `None` when no question has a reference strategy.
pub fn strategy_accuracy(pairs: &[(Strategy, Strategy)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub schema_ok: bool,
    pub evidence_ok: bool,
    pub answer_ok: bool,
}

/// Row: stage valid or invalid. Column: answer correct or incorrect.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Matrix2 {
    pub valid_correct: f64,
    pub valid_incorrect: f64,
    pub invalid_correct: f64,
    pub invalid_incorrect: f64,
}

impl Matrix2 {
    pub fn total(&self) -> f64 {
        self.valid_correct + self.valid_incorrect + self.invalid_correct + self.invalid_incorrect
    }

    fn from_flags(flags: impl Iterator<Item = (bool, bool)>) -> Self {
        let mut counts = [0usize; 4];
        let mut n = 0usize;
        for (stage, answer) in flags {
            counts[usize::from(!stage) * 2 + usize::from(!answer)] += 1;
            n += 1;
        }
        let f = |c: usize| c as f64 / n as f64;
        Self {
            valid_correct: f(counts[0]),
            valid_incorrect: f(counts[1]),
            invalid_correct: f(counts[2]),
            invalid_incorrect: f(counts[3]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub schema_vs_answer: Matrix2,
    pub evidence_vs_answer: Matrix2,
}

/// `None` for an empty record list.
pub fn attribution(records: &[AttributionRecord]) -> Option<Attribution> {
    if records.is_empty() {
        return None;
    }
    Some(Attribution {
        schema_vs_answer: Matrix2::from_flags(records.iter().map(|r| (r.schema_ok, r.answer_ok))),
        evidence_vs_answer: Matrix2::from_flags(records.iter().map(|r| (r.evidence_ok, r.answer_ok))),
    })
}

/// Everything needed to score one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
    pub ground_truth_path: Vec<LabelTriple>,
    pub evidence: Vec<LabelTriple>,
    /// Union of the schema triples of all plans.
    pub schema: Vec<LabelTriple>,
    pub strategy: Option<Strategy>,
    pub gold_strategy: Option<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScores {
    pub question_id: String,
    pub hit_at_1: f64,
    pub f1: f64,
    pub coverage: Option<f64>,
    pub schema: Prf,
    pub schema_ok: bool,
    pub evidence_ok: bool,
    pub answer_ok: bool,
    pub strategy_ok: Option<bool>,
}

/// A stage counts as valid when it covers the whole ground-truth path; the
/// answer is correct when its first item hits.
pub fn score_question(o: &QuestionOutcome, mode: CoverageMode) -> QuestionScores {
    let hit = hit_at_1(&o.predicted, &o.gold);
    let coverage = coverage_rate(&o.ground_truth_path, &o.evidence, mode);
    let schema = schema_prf(&o.ground_truth_path, &o.schema);
    QuestionScores {
        question_id: o.question_id.clone(),
        hit_at_1: hit,
        f1: answer_f1(&o.predicted, &o.gold),
        coverage,
        schema,
        schema_ok: schema.defined && schema.recall == 1.0,
        evidence_ok: coverage == Some(1.0),
        answer_ok: hit == 1.0,
        strategy_ok: o.strategy.zip(o.gold_strategy).map(|(p, g)| p == g),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub questions: usize,
    pub hit_at_1: f64,
    pub f1: f64,
    pub coverage: Option<f64>,
    pub coverage_skipped: usize,
    pub coverage_mode: CoverageMode,
    pub schema_precision: f64,
    pub schema_recall: f64,
    pub schema_f1: f64,
    pub schema_skipped: usize,
    pub strategy_acc: Option<f64>,
    pub attribution: Option<Attribution>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn report(scores: &[QuestionScores], mode: CoverageMode) -> MetricsReport {
    let defined_schema: Vec<&Prf> = scores.iter().map(|s| &s.schema).filter(|p| p.defined).collect();
    let strategy: Vec<bool> = scores.iter().filter_map(|s| s.strategy_ok).collect();
    let records: Vec<AttributionRecord> = scores
        .iter()
        .map(|s| AttributionRecord {
            schema_ok: s.schema_ok,
            evidence_ok: s.evidence_ok,
            answer_ok: s.answer_ok,
        })
        .collect();
    MetricsReport {
        questions: scores.len(),
        hit_at_1: mean(scores.iter().map(|s| s.hit_at_1)).unwrap_or(0.0),
        f1: mean(scores.iter().map(|s| s.f1)).unwrap_or(0.0),
        coverage: mean(scores.iter().filter_map(|s| s.coverage)),
        coverage_skipped: scores.iter().filter(|s| s.coverage.is_none()).count(),
        coverage_mode: mode,
        schema_precision: mean(defined_schema.iter().map(|p| p.precision)).unwrap_or(0.0),
        schema_recall: mean(defined_schema.iter().map(|p| p.recall)).unwrap_or(0.0),
        schema_f1: mean(defined_schema.iter().map(|p| p.f1)).unwrap_or(0.0),
        schema_skipped: scores.len() - defined_schema.len(),
        strategy_acc: mean(strategy.iter().map(|&ok| if ok { 1.0 } else { 0.0 })),
        attribution: attribution(&records),
    }
}

impl MetricsReport {
    /// Fixed-width console rendering, percentages with two decimals.
    pub fn table(&self) -> String {
        let pct = |x: f64| format!("{:>8.2}", 100.0 * x);
        let opt = |x: Option<f64>| x.map(pct).unwrap_or_else(|| format!("{:>8}", "n/a"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>8}", "metric", "value");
        let _ = writeln!(s, "{:<22}{:>8}", "questions", self.questions);
        let _ = writeln!(s, "{:<22}{}", "hit@1", pct(self.hit_at_1));
        let _ = writeln!(s, "{:<22}{}", "f1", pct(self.f1));
        let _ = writeln!(s, "{:<22}{}", "coverage", opt(self.coverage));
        let _ = writeln!(s, "{:<22}{}", "schema precision", pct(self.schema_precision));
        let _ = writeln!(s, "{:<22}{}", "schema recall", pct(self.schema_recall));
        let _ = writeln!(s, "{:<22}{}", "schema f1", pct(self.schema_f1));
        let _ = writeln!(s, "{:<22}{}", "strategy accuracy", opt(self.strategy_acc));
        if let Some(a) = &self.attribution {
            for (name, m) in [("schema", &a.schema_vs_answer), ("evidence", &a.evidence_vs_answer)] {
                let _ = writeln!(s, "\n{:<22}{:>9}{:>11}", format!("{name} vs answer"), "correct", "incorrect");
                let _ = writeln!(s, "{:<22}{} {:>10.2}", "valid", pct(m.valid_correct), 100.0 * m.valid_incorrect);
                let _ = writeln!(s, "{:<22}{} {:>10.2}", "invalid", pct(m.invalid_correct), 100.0 * m.invalid_incorrect);
            }
        }
        s
    }
}

/// Per-question CSV with every flag used by the attribution matrices.
pub fn write_csv<W: std::io::Write>(scores: &[QuestionScores], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "question_id",
        "hit_at_1",
        "f1",
        "coverage",
        "schema_precision",
        "schema_recall",
        "schema_f1",
        "schema_ok",
        "evidence_ok",
        "answer_ok",
        "strategy_ok",
    ])?;
    for s in scores {
        let opt = |x: Option<String>| x.unwrap_or_default();
        w.write_record([
            s.question_id.clone(),
            format!("{}", s.hit_at_1),
            format!("{:.6}", s.f1),
            opt(s.coverage.map(|c| format!("{c:.6}"))),
            format!("{:.6}", s.schema.precision),
            format!("{:.6}", s.schema.recall),
            format!("{:.6}", s.schema.f1),
            s.schema_ok.to_string(),
            s.evidence_ok.to_string(),
            s.answer_ok.to_string(),
            opt(s.strategy_ok.map(|b| b.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}
