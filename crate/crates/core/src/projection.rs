//! Question decomposition into assertion plans and grounding of plans into
//! schema graphs, plus the tolerant parsers for both completion formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::LabelTriple;
use crate::llm::{ChatClient, ChatRequest, ClientError};
use crate::prompts::{PromptError, PromptKind};
use crate::text::{is_placeholder, placeholders_in};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("unparseable completion: {0}")]
    Parse(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("plan has no assertions")]
    EmptyPlan,
    #[error("schema has no triples")]
    EmptySchema,
    #[error("placeholder {0} does not occur in the assertions")]
    UnknownPlaceholder(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Precision,
    Breadth,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self, ProjectionError> {
        let word = s.trim().trim_matches(|c: char| !c.is_alphanumeric());
        match word.to_ascii_lowercase().as_str() {
            "precision" => Ok(Strategy::Precision),
            "breadth" => Ok(Strategy::Breadth),
            _ => Err(ProjectionError::UnknownStrategy(word.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Precision => "Precision",
            Strategy::Breadth => "Breadth",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub assertions: Vec<String>,
    pub strategy: Strategy,
}

impl PlanCandidate {
    fn dedup_key(&self) -> (Vec<String>, Strategy) {
        let assertions = self
            .assertions
            .iter()
            .map(|a| a.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" "))
            .collect();
        (assertions, self.strategy)
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        self.assertions.iter().flat_map(|a| placeholders_in(a)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemaNode {
    Concrete(String),
    Placeholder(String),
}

impl SchemaNode {
    pub fn from_text(s: &str) -> Self {
        let s = s.trim();
        if is_placeholder(s) {
            SchemaNode::Placeholder(s.to_string())
        } else {
            SchemaNode::Concrete(s.to_string())
        }
    }

    pub fn text(&self) -> &str {
        match self {
            SchemaNode::Concrete(s) | SchemaNode::Placeholder(s) => s,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, SchemaNode::Placeholder(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaEdge {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

/// Schema triples with shared nodes merged; edges keep their input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaGraph {
    nodes: Vec<SchemaNode>,
    edges: Vec<SchemaEdge>,
    adjacency: Vec<Vec<usize>>,
}

impl SchemaGraph {
    pub fn build(triples: &[LabelTriple]) -> Result<Self, ProjectionError> {
        if triples.is_empty() {
            return Err(ProjectionError::EmptySchema);
        }
        let mut nodes: Vec<SchemaNode> = Vec::new();
        let mut index: BTreeMap<SchemaNode, usize> = BTreeMap::new();
        let mut intern = |n: SchemaNode| -> usize {
            *index.entry(n.clone()).or_insert_with(|| {
                nodes.push(n);
                nodes.len() - 1
            })
        };
        let edges: Vec<SchemaEdge> = triples
            .iter()
            .map(|t| SchemaEdge {
                head: intern(SchemaNode::from_text(&t.head)),
                relation: t.relation.trim().to_string(),
                tail: intern(SchemaNode::from_text(&t.tail)),
            })
            .collect();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            adjacency[e.head].push(i);
            if e.tail != e.head {
                adjacency[e.tail].push(i);
            }
        }
        Ok(Self {
            nodes,
            edges,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[SchemaNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[SchemaEdge] {
        &self.edges
    }

    pub fn node(&self, i: usize) -> &SchemaNode {
        &self.nodes[i]
    }

    pub fn incident(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// The endpoint of edge `edge` opposite to `node`; `node` for a self-loop.
    pub fn other_end(&self, edge: usize, node: usize) -> usize {
        let e = &self.edges[edge];
        if e.head == node {
            e.tail
        } else {
            debug_assert_eq!(e.tail, node, "node is not an endpoint of the schema edge");
            e.head
        }
    }

    pub fn edge_labels(&self, edge: usize) -> LabelTriple {
        let e = &self.edges[edge];
        LabelTriple::new(
            self.nodes[e.head].text(),
            e.relation.clone(),
            self.nodes[e.tail].text(),
        )
    }

    pub fn label_triples(&self) -> Vec<LabelTriple> {
        (0..self.edges.len()).map(|i| self.edge_labels(i)).collect()
    }

    pub fn concrete_nodes(&self) -> impl Iterator<Item = (usize, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n {
            SchemaNode::Concrete(s) => Some((i, s.as_str())),
            SchemaNode::Placeholder(_) => None,
        })
    }

    pub fn num_components(&self) -> usize {
        let mut seen = vec![false; self.nodes.len()];
        let mut count = 0;
        for start in 0..self.nodes.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(n) = stack.pop() {
                for &e in &self.adjacency[n] {
                    let m = self.other_end(e, n);
                    if !seen[m] {
                        seen[m] = true;
                        stack.push(m);
                    }
                }
            }
        }
        count
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Atom(String),
    List(Vec<Node>),
}

fn is_delim(c: char) -> bool {
    matches!(c, ',' | '(' | ')' | '[' | ']')
}

fn closing_quote(open: char) -> Option<char> {
    match open {
        '"' => Some('"'),
        '\'' => Some('\''),
        '“' => Some('”'),
        '‘' => Some('’'),
        _ => None,
    }
}

/// Parses Python-literal-like text into nested lists of atoms. A quoted atom
/// ends at a matching quote followed by a delimiter or the end of input, so
/// apostrophes inside quotes survive. Unbalanced closers are ignored.
fn parse_tree(text: &str) -> Vec<Node> {
    let chars: Vec<char> = text.chars().collect();
    let mut stack: Vec<Vec<Node>> = vec![Vec::new()];
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() || c == ',' {
            i += 1;
        } else if c == '(' || c == '[' {
            stack.push(Vec::new());
            i += 1;
        } else if c == ')' || c == ']' {
            if stack.len() > 1 {
                let done = stack.pop().unwrap();
                stack.last_mut().unwrap().push(Node::List(done));
            }
            i += 1;
        } else if let Some(close) = closing_quote(c) {
            let mut j = i + 1;
            let mut end = None;
            while j < chars.len() {
                if chars[j] == close {
                    let mut k = j + 1;
                    while k < chars.len() && chars[k].is_whitespace() {
                        k += 1;
                    }
                    if k == chars.len() || is_delim(chars[k]) {
                        end = Some(j);
                        break;
                    }
                }
                j += 1;
            }
            let end = end.unwrap_or(chars.len());
            let atom: String = chars[i + 1..end].iter().collect();
            stack.last_mut().unwrap().push(Node::Atom(atom));
            i = end + 1;
        } else {
            let mut j = i;
            while j < chars.len() && !is_delim(chars[j]) {
                j += 1;
            }
            let atom: String = chars[i..j].iter().collect::<String>().trim().to_string();
            if !atom.is_empty() {
                stack.last_mut().unwrap().push(Node::Atom(atom));
            }
            i = j;
        }
    }
    while stack.len() > 1 {
        let done = stack.pop().unwrap();
        stack.last_mut().unwrap().push(Node::List(done));
    }
    stack.pop().unwrap()
}

fn atoms_only(items: &[Node]) -> Option<Vec<String>> {
    items
        .iter()
        .map(|n| match n {
            Node::Atom(a) => Some(a.clone()),
            Node::List(_) => None,
        })
        .collect()
}

/// Finds the first list of atoms followed by an atom, searching depth-first.
fn find_plan(nodes: &[Node]) -> Option<(Vec<String>, Option<String>)> {
    for (i, n) in nodes.iter().enumerate() {
        if let Node::List(items) = n {
            if let Some(atoms) = atoms_only(items) {
                let strategy = nodes[i + 1..].iter().find_map(|m| match m {
                    Node::Atom(a) => Some(a.clone()),
                    Node::List(_) => None,
                });
                return Some((atoms, strategy));
            }
            if let Some(found) = find_plan(items) {
                return Some(found);
            }
        }
    }
    None
}

/// Atoms of the first bracketed list in `text`, if any.
pub(crate) fn first_list_atoms(text: &str) -> Option<Vec<String>> {
    fn find(nodes: &[Node]) -> Option<Vec<String>> {
        for n in nodes {
            if let Node::List(items) = n {
                if let Some(a) = atoms_only(items) {
                    return Some(a);
                }
                if let Some(a) = find(items) {
                    return Some(a);
                }
            }
        }
        None
    }
    find(&parse_tree(text))
}

/// Parses `(assertion, ...), Strategy` in its common spellings.
pub fn parse_plan(text: &str) -> Result<PlanCandidate, ProjectionError> {
    let tree = parse_tree(text);
    let (atoms, strategy) =
        find_plan(&tree).ok_or_else(|| ProjectionError::Parse(text.trim().to_string()))?;
    let assertions: Vec<String> = atoms
        .into_iter()
        .map(|a| a.trim().to_string())
        .filter(|a| !a.is_empty())
        .collect();
    if assertions.is_empty() {
        return Err(ProjectionError::EmptyPlan);
    }
    let strategy = strategy.ok_or_else(|| ProjectionError::Parse(format!("missing strategy in `{}`", text.trim())))?;
    Ok(PlanCandidate {
        assertions,
        strategy: Strategy::parse(&strategy)?,
    })
}

/// Parses a list of `(head, relation, tail)` tuples.
pub fn parse_schema_triples(text: &str) -> Result<Vec<LabelTriple>, ProjectionError> {
    fn collect(nodes: &[Node], out: &mut Vec<Vec<String>>) {
        for n in nodes {
            if let Node::List(items) = n {
                match atoms_only(items) {
                    Some(atoms) if !atoms.is_empty() => out.push(atoms),
                    Some(_) => {}
                    None => collect(items, out),
                }
            }
        }
    }
    let mut tuples = Vec::new();
    collect(&parse_tree(text), &mut tuples);
    if tuples.is_empty() {
        return Err(ProjectionError::EmptySchema);
    }
    tuples
        .into_iter()
        .map(|t| {
            if t.len() != 3 || t.iter().any(|x| x.trim().is_empty()) {
                Err(ProjectionError::Parse(format!("malformed triple ({})", t.join(", "))))
            } else {
                Ok(LabelTriple::new(t[0].trim(), t[1].trim(), t[2].trim()))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposeConfig {
    pub beam: usize,
    pub temperature: f64,
    pub max_attempts: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            temperature: 0.7,
            max_attempts: 5,
        }
    }
}

/// Up to `beam` distinct plans. When no completion parses within the
/// attempt budget the question itself becomes a single Precision assertion.
pub fn decompose(
    client: &dyn ChatClient,
    question: &str,
    cfg: &DecomposeConfig,
) -> Result<Vec<PlanCandidate>, ProjectionError> {
    let prompt = PromptKind::Decompose.render(&[("Query", question)])?;
    for attempt in 1..=cfg.max_attempts.max(1) {
        let completions = client.complete(&ChatRequest::new(prompt.clone(), cfg.temperature, cfg.beam))?;
        let mut seen = BTreeSet::new();
        let mut plans = Vec::new();
        for c in &completions {
            match parse_plan(c) {
                Ok(plan) => {
                    if seen.insert(plan.dedup_key()) {
                        plans.push(plan);
                    }
                }
                Err(e) => log::debug!("attempt {attempt}: discarding plan completion: {e}"),
            }
        }
        if !plans.is_empty() {
            plans.truncate(cfg.beam);
            return Ok(plans);
        }
    }
    log::warn!("no parseable plan for `{question}`; using the question as its own assertion");
    Ok(vec![PlanCandidate {
        assertions: vec![question.to_string()],
        strategy: Strategy::Precision,
    }])
}

pub fn render_assertions(assertions: &[String]) -> String {
    serde_json::to_string(assertions).expect("strings serialize")
}

/// Checks that every placeholder in the triples was introduced by the plan.
pub fn validate_placeholders(
    triples: &[LabelTriple],
    plan: &PlanCandidate,
) -> Result<(), ProjectionError> {
    let known = plan.placeholders();
    for t in triples {
        for s in [&t.head, &t.tail] {
            if is_placeholder(s) && !known.contains(s.trim()) {
                return Err(ProjectionError::UnknownPlaceholder(s.trim().to_string()));
            }
        }
    }
    Ok(())
}

pub fn ground(client: &dyn ChatClient, plan: &PlanCandidate) -> Result<SchemaGraph, ProjectionError> {
    let listed = render_assertions(&plan.assertions);
    let prompt = PromptKind::Schema.render(&[("Assertions", &listed)])?;
    let completions = client.complete(&ChatRequest::new(prompt, 0.0, 1))?;
    let first = completions
        .first()
        .ok_or_else(|| ProjectionError::Parse("empty completion list".into()))?;
    let triples = parse_schema_triples(first)?;
    validate_placeholders(&triples, plan)?;
    SchemaGraph::build(&triples)
}
