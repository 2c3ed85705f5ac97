//! Evidence linearization into reasoning chains and final answer generation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::LabelTriple;
use crate::llm::{ChatClient, ChatRequest, ClientError};
use crate::projection::first_list_atoms;
use crate::prompts::{PromptError, PromptKind};
use crate::text::normalize_answer;

/// One hop of a chain; `forward` is false when the triple is walked tail to head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    pub triple: LabelTriple,
    pub forward: bool,
}

impl ChainStep {
    pub fn from_entity(&self) -> &str {
        if self.forward {
            &self.triple.head
        } else {
            &self.triple.tail
        }
    }

    pub fn to_entity(&self) -> &str {
        if self.forward {
            &self.triple.tail
        } else {
            &self.triple.head
        }
    }
}

/// A walk through the evidence; consecutive steps share an entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub steps: Vec<ChainStep>,
}

impl Chain {
    /// `A → r → B → s → C`; a reversed hop reads `B ← r ← A`.
    pub fn verbalize(&self) -> String {
        let mut out = match self.steps.first() {
            Some(s) => s.from_entity().to_string(),
            None => return String::new(),
        };
        for s in &self.steps {
            let arrow = if s.forward { '→' } else { '←' };
            out.push_str(&format!(" {arrow} {} {arrow} {}", s.triple.relation, s.to_entity()));
        }
        out
    }

    pub fn triples(&self) -> impl Iterator<Item = &LabelTriple> {
        self.steps.iter().map(|s| &s.triple)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChains {
    pub chains: Vec<Chain>,
}

impl ReasoningChains {
    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn verbalize(&self) -> String {
        self.chains.iter().map(Chain::verbalize).collect::<Vec<_>>().join("\n")
    }
}

struct Dfs<'a> {
    triples: &'a [LabelTriple],
    incident: BTreeMap<&'a str, Vec<usize>>,
    visited_edges: BTreeSet<usize>,
    on_path: Vec<&'a str>,
    path: Vec<ChainStep>,
    out: Vec<Chain>,
}

impl<'a> Dfs<'a> {
    fn walk(&mut self, node: &'a str) {
        let triples = self.triples;
        let children: Vec<(usize, bool, &'a str)> = self
            .incident
            .get(node)
            .map(|v| v.as_slice())
            .unwrap_or_default()
            .iter()
            .filter(|i| !self.visited_edges.contains(i))
            .filter_map(|&i| {
                let t = &triples[i];
                let (forward, next) = if t.head == node {
                    (true, t.tail.as_str())
                } else {
                    (false, t.head.as_str())
                };
                (!self.on_path.contains(&next)).then_some((i, forward, next))
            })
            .collect();
        if children.is_empty() {
            if !self.path.is_empty() {
                self.out.push(Chain {
                    steps: self.path.clone(),
                });
            }
            return;
        }
        for (i, forward, next) in children {
            if self.visited_edges.contains(&i) {
                continue;
            }
            self.visited_edges.insert(i);
            self.path.push(ChainStep {
                triple: triples[i].clone(),
                forward,
            });
            self.on_path.push(next);
            self.walk(next);
            self.on_path.pop();
            self.path.pop();
        }
    }
}

/// Simple-path DFS chains from every question entity present in the
/// evidence, children in sorted triple order, each triple expanded at most
/// once per root. Uncovered triples become single-hop chains.
pub fn linearize(evidence: &[LabelTriple], question_entities: &[String]) -> ReasoningChains {
    let triples: Vec<LabelTriple> = evidence.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut incident: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in triples.iter().enumerate() {
        incident.entry(&t.head).or_default().push(i);
        if t.tail != t.head {
            incident.entry(&t.tail).or_default().push(i);
        }
    }
    let mut chains = Vec::new();
    let mut roots_seen = BTreeSet::new();
    for root in question_entities {
        if !incident.contains_key(root.as_str()) || !roots_seen.insert(root.as_str()) {
            continue;
        }
        let mut dfs = Dfs {
            triples: &triples,
            incident: incident.clone(),
            visited_edges: BTreeSet::new(),
            on_path: vec![root.as_str()],
            path: Vec::new(),
            out: Vec::new(),
        };
        dfs.walk(root.as_str());
        chains.extend(dfs.out);
    }
    let covered: BTreeSet<&LabelTriple> = chains.iter().flat_map(Chain::triples).collect();
    let singles: Vec<Chain> = triples
        .iter()
        .filter(|t| !covered.contains(t))
        .map(|t| Chain {
            steps: vec![ChainStep {
                triple: t.clone(),
                forward: true,
            }],
        })
        .collect();
    chains.extend(singles);
    ReasoningChains { chains }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub answers: Vec<String>,
    pub raw: String,
    /// Set when the completion had no recognizable list and was kept verbatim.
    pub parse_warning: bool,
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Text used in place of the evidence when no chain was retrieved.
pub const NO_EVIDENCE: &str = "None";

pub fn answer_prompt(question: &str, chains: &ReasoningChains) -> Result<String, PromptError> {
    let graph = if chains.is_empty() {
        NO_EVIDENCE.to_string()
    } else {
        chains.verbalize()
    };
    PromptKind::Generate.render(&[
        ("Knowledge Structure Graph", &graph),
        ("Question", question),
        ("Answer", ""),
    ])
}

pub fn generate_answer(
    client: &dyn ChatClient,
    question: &str,
    chains: &ReasoningChains,
) -> Result<GeneratedAnswer, AnswerError> {
    let prompt = answer_prompt(question, chains)?;
    let raw = client
        .complete(&ChatRequest::new(prompt, 0.0, 1))?
        .into_iter()
        .next()
        .unwrap_or_default();
    let (answers, parse_warning) = match parse_answers(&raw) {
        Some(a) => (a, false),
        None => {
            log::warn!("answer completion has no list structure; keeping it verbatim");
            (vec![raw.trim().to_string()], true)
        }
    };
    Ok(GeneratedAnswer {
        answers,
        raw,
        parse_warning,
    })
}

fn clean_item(s: &str) -> String {
    let s = s.trim();
    let s = s
        .strip_prefix("- ")
        .or_else(|| s.strip_prefix("* "))
        .or_else(|| s.strip_prefix("• "))
        .unwrap_or(s);
    let s = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) if i > 0 && s[i..].starts_with(". ") => &s[i + 2..],
        _ => s,
    };
    s.trim()
        .trim_end_matches('.')
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '`'))
        .trim()
        .to_string()
}

fn split_prose(line: &str) -> Vec<String> {
    line.split([',', ';'])
        .flat_map(|part| part.split(" and "))
        .map(|p| p.trim_start_matches("and ").to_string())
        .collect()
}

/// Answers from a completion: a bracketed list, else comma/`and` separated
/// prose on one line, else one answer per line. `None` when nothing is left.
pub fn parse_answers(text: &str) -> Option<Vec<String>> {
    let mut body = text.trim();
    for prefix in ["Answer:", "Answers:", "answer:", "answers:"] {
        if let Some(rest) = body.strip_prefix(prefix) {
            body = rest.trim();
        }
    }
    let items: Vec<String> = if let (Some(open), Some(close)) = (body.find('['), body.rfind(']')) {
        if open < close {
            match first_list_atoms(&body[open..=close]) {
                Some(atoms) if !atoms.is_empty() => atoms,
                _ => return Some(Vec::new()),
            }
        } else {
            split_prose(body)
        }
    } else {
        let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        match lines.len() {
            0 => Vec::new(),
            1 => split_prose(lines[0]),
            _ => lines.into_iter().map(str::to_string).collect(),
        }
    };
    let mut seen = BTreeSet::new();
    let answers: Vec<String> = items
        .iter()
        .map(|s| clean_item(s))
        .filter(|s| !s.is_empty() && seen.insert(normalize_answer(s)))
        .collect();
    (!answers.is_empty()).then_some(answers)
}
