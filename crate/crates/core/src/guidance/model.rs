//! Forward and backward passes of the triple-conditioned GNN.
//!
//! States are updated over the undirected question subgraph. Each triple
//! produces one DistMult message `h_head * g(h_rel) * h_tail` that both
//! endpoints receive; a node averages the messages of its incident triples.
//! Relation states stay fixed across layers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::params::{GnnParams, Linear};
use super::GnnError;
use crate::embedding::Encoder;
use crate::kg::{EntityId, KnowledgeGraph, LabelTriple};

/// Everything the network reads for one question.
#[derive(Debug, Clone)]
pub struct GnnInput<'g> {
    pub graph: &'g KnowledgeGraph,
    /// Distinct question entities.
    pub question_entities: Vec<EntityId>,
    /// One `[enc(head); enc(rel); enc(tail)]` row per schema triple.
    pub triple_features: Vec<Vec<f64>>,
    /// `enc(label)` per relation id.
    pub relation_features: Vec<Vec<f64>>,
}

impl<'g> GnnInput<'g> {
    pub fn build(
        graph: &'g KnowledgeGraph,
        question_entities: &[EntityId],
        schema_triples: &[LabelTriple],
        encoder: &dyn Encoder,
    ) -> Result<Self, GnnError> {
        let mut texts: Vec<String> = Vec::new();
        for t in schema_triples {
            texts.push(t.head.clone());
            texts.push(t.relation.clone());
            texts.push(t.tail.clone());
        }
        texts.extend(graph.relation_ids().map(|r| graph.relation_label(r).to_string()));
        let vecs = encoder.encode_batch(&texts)?;
        let split = 3 * schema_triples.len();
        let triple_features = vecs[..split].chunks(3).map(|c| c.concat()).collect();
        let relation_features = vecs[split..].to_vec();
        let question_entities: Vec<EntityId> = question_entities
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            graph,
            question_entities,
            triple_features,
            relation_features,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-(1/|N|) sum y log p`.
    PositiveOnly,
    /// Adds the `(1 - y) log(1 - p)` term.
    Symmetric,
}

/// Binary cross-entropy over probabilities in the open unit interval.
pub fn bce_loss(probs: &[f64], labels: &[f64], kind: LossKind) -> Result<f64, GnnError> {
    assert_eq!(probs.len(), labels.len());
    if let Some(&p) = probs.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(GnnError::ProbabilityDomain(p));
    }
    let n = probs.len().max(1) as f64;
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        total -= y * p.ln();
        if kind == LossKind::Symmetric {
            total -= (1.0 - y) * (1.0 - p).ln();
        }
    }
    Ok(total / n)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn apply_linear(lin: &Linear, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows, lin.out);
        for i in 0..x.rows {
            lin.forward(x.row(i), &mut y.data[i * lin.out..(i + 1) * lin.out]);
        }
        y
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Relation transform: pre-activation, hidden, output.
    q: Matrix,
    s: Matrix,
    gr: Matrix,
    /// `[h; agg]` per entity and the update pre-activation.
    cat: Matrix,
    pre: Matrix,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub eq: Vec<f64>,
    /// Entity states, `states[0]` is the initialization.
    pub states: Vec<Matrix>,
    pub relation_states: Matrix,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    layers: Vec<LayerCache>,
}

fn check_finite(m: &[f64], layer: usize) -> Result<(), GnnError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GnnError::NonFinite { layer })
    }
}

fn validate(params: &GnnParams, input: &GnnInput) -> Result<(), GnnError> {
    let dp = params.config.input_dim;
    if input.triple_features.is_empty() {
        return Err(GnnError::EmptySchema);
    }
    if let Some(f) = input.triple_features.iter().find(|f| f.len() != 3 * dp) {
        return Err(GnnError::Shape(format!(
            "triple feature has length {}, expected {}",
            f.len(),
            3 * dp
        )));
    }
    if input.relation_features.len() != input.graph.num_relations() {
        return Err(GnnError::Shape("one relation feature per relation required".into()));
    }
    if let Some(f) = input.relation_features.iter().find(|f| f.len() != dp) {
        return Err(GnnError::Shape(format!(
            "relation feature has length {}, expected {dp}",
            f.len()
        )));
    }
    Ok(())
}

/// Mean of the projected schema triples.
pub fn query_embedding(params: &GnnParams, input: &GnnInput) -> Vec<f64> {
    let dg = params.config.hidden_dim;
    let mut eq = vec![0.0; dg];
    let mut buf = vec![0.0; dg];
    for x in &input.triple_features {
        params.triple_proj.forward(x, &mut buf);
        eq.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
    }
    let n = input.triple_features.len() as f64;
    eq.iter_mut().for_each(|a| *a /= n);
    eq
}

/// Question entities start at `E_Q`, every other entity at zero.
pub fn initial_states(params: &GnnParams, input: &GnnInput, eq: &[f64]) -> Matrix {
    let mut h = Matrix::zeros(input.graph.num_entities(), params.config.hidden_dim);
    for e in &input.question_entities {
        h.row_mut(e.index()).copy_from_slice(eq);
    }
    h
}

/// Runs the layers from a given initial state.
pub fn propagate(params: &GnnParams, input: &GnnInput, h0: Matrix) -> Result<Forward, GnnError> {
    validate(params, input)?;
    let cfg = params.config;
    let dg = cfg.hidden_dim;
    let g = input.graph;
    let n = g.num_entities();
    let act = cfg.activation;

    let mut z = Matrix::zeros(g.num_relations(), cfg.input_dim);
    for (r, f) in input.relation_features.iter().enumerate() {
        z.row_mut(r).copy_from_slice(f);
    }
    let hr = Matrix::apply_linear(&params.relation_proj, &z);
    check_finite(&hr.data, 0)?;

    let mut states = vec![h0];
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let h = states.last().unwrap();
        let q = Matrix::apply_linear(&lp.message_in, &hr);
        let s = Matrix {
            rows: q.rows,
            cols: q.cols,
            data: q.data.iter().map(|&x| act.apply(x)).collect(),
        };
        let gr = Matrix::apply_linear(&lp.message_out, &s);

        let mut cat = Matrix::zeros(n, 2 * dg);
        for e in 0..n {
            cat.row_mut(e)[..dg].copy_from_slice(h.row(e));
        }
        for t in g.triples() {
            let (hh, ht, rel) = (h.row(t.head.index()), h.row(t.tail.index()), gr.row(t.relation.index()));
            let ends: &[EntityId] = if t.head == t.tail { &[t.head][..] } else { &[t.head, t.tail][..] };
            for &e in ends {
                let inv = 1.0 / g.degree(e) as f64;
                let row = &mut cat.row_mut(e.index())[dg..];
                for j in 0..dg {
                    row[j] += inv * hh[j] * rel[j] * ht[j];
                }
            }
        }
        let pre = Matrix::apply_linear(&lp.update, &cat);
        let next = Matrix {
            rows: n,
            cols: dg,
            data: pre.data.iter().map(|&x| act.apply(x)).collect(),
        };
        check_finite(&next.data, l + 1)?;
        layers.push(LayerCache { q, s, gr, cat, pre });
        states.push(next);
    }

    let hl = states.last().unwrap();
    let mut logits = vec![0.0; n];
    for (e, logit) in logits.iter_mut().enumerate() {
        let mut out = [0.0];
        params.readout.forward(hl.row(e), &mut out);
        *logit = out[0];
    }
    check_finite(&logits, cfg.layers)?;
    let probabilities = logits.iter().map(|&x| sigmoid(x)).collect();
    Ok(Forward {
        eq: Vec::new(),
        states,
        relation_states: hr,
        logits,
        probabilities,
        layers,
    })
}

pub fn forward(params: &GnnParams, input: &GnnInput) -> Result<Forward, GnnError> {
    validate(params, input)?;
    let eq = query_embedding(params, input);
    check_finite(&eq, 0)?;
    let h0 = initial_states(params, input, &eq);
    let mut f = propagate(params, input, h0)?;
    f.eq = eq;
    Ok(f)
}

/// Loss from logits, stable for saturated probabilities.
pub fn loss_from_logits(logits: &[f64], labels: &[f64], kind: LossKind) -> f64 {
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        total += y * softplus(-z);
        if kind == LossKind::Symmetric {
            total += (1.0 - y) * softplus(z);
        }
    }
    total / n
}

pub fn loss(params: &GnnParams, input: &GnnInput, labels: &[f64], kind: LossKind) -> Result<f64, GnnError> {
    let f = forward(params, input)?;
    Ok(loss_from_logits(&f.logits, labels, kind))
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &GnnParams,
    input: &GnnInput,
    labels: &[f64],
    kind: LossKind,
) -> Result<(f64, GnnParams), GnnError> {
    let f = forward(params, input)?;
    let cfg = params.config;
    let (dg, act) = (cfg.hidden_dim, cfg.activation);
    let g = input.graph;
    let n = g.num_entities();
    if labels.len() != n {
        return Err(GnnError::Shape(format!("{} labels for {n} entities", labels.len())));
    }
    let loss = loss_from_logits(&f.logits, labels, kind);
    let mut grad = GnnParams::zeros(cfg);

    let inv_n = 1.0 / n.max(1) as f64;
    let mut dh = Matrix::zeros(n, dg);
    let hl = f.states.last().unwrap();
    for (e, (&p, &y)) in f.probabilities.iter().zip(labels).enumerate() {
        let mut dz = y * (p - 1.0);
        if kind == LossKind::Symmetric {
            dz += (1.0 - y) * p;
        }
        dz *= inv_n;
        params
            .readout
            .backward(hl.row(e), &[dz], &mut grad.readout, Some(dh.row_mut(e)));
    }

    let mut dhr = Matrix::zeros(g.num_relations(), dg);
    for l in (0..cfg.layers).rev() {
        let lp = &params.layers[l];
        let lc = &f.layers[l];
        let h = &f.states[l];
        let out = &f.states[l + 1];
        let gl = &mut grad.layers[l];

        let mut dcat = Matrix::zeros(n, 2 * dg);
        let mut dpre = vec![0.0; dg];
        for e in 0..n {
            let (pre, y, d) = (lc.pre.row(e), out.row(e), dh.row(e));
            for j in 0..dg {
                dpre[j] = d[j] * act.derivative(pre[j], y[j]);
            }
            lp.update
                .backward(lc.cat.row(e), &dpre, &mut gl.update, Some(dcat.row_mut(e)));
        }

        let mut dprev = Matrix::zeros(n, dg);
        for e in 0..n {
            dprev.row_mut(e).copy_from_slice(&dcat.row(e)[..dg]);
        }
        let mut dgr = Matrix::zeros(g.num_relations(), dg);
        let mut dmsg = vec![0.0; dg];
        for t in g.triples() {
            dmsg.iter_mut().for_each(|x| *x = 0.0);
            let ends: &[EntityId] = if t.head == t.tail { &[t.head][..] } else { &[t.head, t.tail][..] };
            for &e in ends {
                let inv = 1.0 / g.degree(e) as f64;
                let da = &dcat.row(e.index())[dg..];
                for j in 0..dg {
                    dmsg[j] += inv * da[j];
                }
            }
            let (hi, ti, ri) = (t.head.index(), t.tail.index(), t.relation.index());
            let rel = lc.gr.row(ri).to_vec();
            let hh = h.row(hi).to_vec();
            let ht = h.row(ti).to_vec();
            {
                let row = dprev.row_mut(hi);
                for j in 0..dg {
                    row[j] += dmsg[j] * rel[j] * ht[j];
                }
            }
            {
                let row = dprev.row_mut(ti);
                for j in 0..dg {
                    row[j] += dmsg[j] * rel[j] * hh[j];
                }
            }
            let row = dgr.row_mut(ri);
            for j in 0..dg {
                row[j] += dmsg[j] * hh[j] * ht[j];
            }
        }

        let mut ds = vec![0.0; dg];
        let mut dq = vec![0.0; dg];
        for r in 0..g.num_relations() {
            ds.iter_mut().for_each(|x| *x = 0.0);
            lp.message_out
                .backward(lc.s.row(r), dgr.row(r), &mut gl.message_out, Some(&mut ds));
            let (q, s) = (lc.q.row(r), lc.s.row(r));
            for j in 0..dg {
                dq[j] = ds[j] * act.derivative(q[j], s[j]);
            }
            lp.message_in.backward(
                f.relation_states.row(r),
                &dq,
                &mut gl.message_in,
                Some(dhr.row_mut(r)),
            );
        }
        dh = dprev;
    }

    let mut deq = vec![0.0; dg];
    for e in &input.question_entities {
        deq.iter_mut().zip(dh.row(e.index())).for_each(|(a, b)| *a += b);
    }
    let inv_t = 1.0 / input.triple_features.len() as f64;
    deq.iter_mut().for_each(|x| *x *= inv_t);
    for x in &input.triple_features {
        params.triple_proj.backward(x, &deq, &mut grad.triple_proj, None);
    }
    for (r, z) in input.relation_features.iter().enumerate() {
        params
            .relation_proj
            .backward(z, dhr.row(r), &mut grad.relation_proj, None);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Largest relative error per named tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// Denominator floor for [`relative_error`]. Central differences with step
/// 1e-4 carry roughly 1e-12 of rounding noise, so components below this size
/// are compared at an absolute precision of about 1e-11.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-7;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central finite differences against the analytic gradient. Checks every
/// coordinate when `probes_per_tensor` is `None`, otherwise an evenly spaced
/// sample of that many coordinates per tensor.
pub fn grad_check(
    params: &GnnParams,
    input: &GnnInput,
    labels: &[f64],
    kind: LossKind,
    step: f64,
    probes_per_tensor: Option<usize>,
) -> Result<GradCheckReport, GnnError> {
    let (_, analytic) = loss_and_grad(params, input, labels, kind)?;
    let analytic_tensors: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(name, _, d)| (name, d.to_vec()))
        .collect();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        per_tensor: Vec::new(),
    };
    for (ti, (name, grads)) in analytic_tensors.iter().enumerate() {
        let len = grads.len();
        let coords: Vec<usize> = match probes_per_tensor {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = probe.tensors_mut()[ti][c];
            probe.tensors_mut()[ti][c] = orig + step;
            let plus = loss(&probe, input, labels, kind)?;
            probe.tensors_mut()[ti][c] = orig - step;
            let minus = loss(&probe, input, labels, kind)?;
            probe.tensors_mut()[ti][c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grads[c], numeric));
            report.checked += 1;
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.per_tensor.push((name.clone(), worst));
    }
    Ok(report)
}
