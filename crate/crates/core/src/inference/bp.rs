//! Sum-product BP in message form.
//!
//! `m_{i→j}(x_j) = Σ_{x_i} Ψ_ij(x_i, x_j) Ψ_i(x_i) Π_{k∈N(i)\j} m_{k→i}(x_i)`,
//! all messages recomputed from the previous set and normalized to sum 1.

use crate::model::PairwiseModel;

use super::beliefs::{BeliefSet, Level, MessageSet};

/// `Ψ_i(x_i) Π_{k∈N(i)\skip} m_{k→i}(x_i)` into `out`.
fn cavity(model: &PairwiseModel, msgs: &MessageSet, node: usize, skip: Option<usize>, out: &mut [f64]) {
    out.copy_from_slice(model.unary(node));
    for &(k, e) in model.topology().incident(node) {
        if Some(k) == skip {
            continue;
        }
        let m = &msgs.messages[MessageSet::index(model, e, k)];
        out.iter_mut().zip(m).for_each(|(o, v)| *o *= v);
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn message_step_into(model: &PairwiseModel, cur: &MessageSet, out: &mut MessageSet) {
    let topo = model.topology();
    let mut h = Vec::new();
    for (e, &(a, b)) in topo.edges().iter().enumerate() {
        for (from, to) in [(a, b), (b, a)] {
            h.resize(model.cardinality(from), 0.0);
            cavity(model, cur, from, Some(to), &mut h);
            let m = &mut out.messages[MessageSet::index(model, e, from)];
            for (xt, slot) in m.iter_mut().enumerate() {
                *slot = h
                    .iter()
                    .enumerate()
                    .map(|(xf, hv)| hv * model.edge_value(e, from, xf, xt))
                    .sum();
            }
            normalize(m);
        }
    }
}

/// One parallel sweep over all directed messages.
pub fn bp_message_step(model: &PairwiseModel, messages: &MessageSet) -> MessageSet {
    let mut out = messages.clone();
    message_step_into(model, messages, &mut out);
    out
}

pub(crate) fn beliefs_into(model: &PairwiseModel, msgs: &MessageSet, out: &mut BeliefSet) {
    let topo = model.topology();
    for i in 0..model.node_count() {
        let b = &mut out.singles[i];
        cavity(model, msgs, i, None, b);
        normalize(b);
    }
    let mut ha = Vec::new();
    let mut hb = Vec::new();
    for (e, &(a, b)) in topo.edges().iter().enumerate() {
        ha.resize(model.cardinality(a), 0.0);
        hb.resize(model.cardinality(b), 0.0);
        cavity(model, msgs, a, Some(b), &mut ha);
        cavity(model, msgs, b, Some(a), &mut hb);
        let cb = hb.len();
        let table = &mut out.pairs[e];
        let psi = model.pairwise(e);
        for (xa, va) in ha.iter().enumerate() {
            for (xb, vb) in hb.iter().enumerate() {
                table[xa * cb + xb] = va * vb * psi[xa * cb + xb];
            }
        }
        normalize(table);
    }
}

/// Level-2 beliefs `b_i ∝ Ψ_i Π_k m_{k→i}` and
/// `b_ij ∝ Ψ_i Ψ_j Ψ_ij Π_{k≠j} m_{k→i} Π_{l≠i} m_{l→j}`.
pub fn beliefs_from_messages(model: &PairwiseModel, messages: &MessageSet) -> BeliefSet {
    let mut out = super::beliefs::init_beliefs(model, Level::Full);
    beliefs_into(model, messages, &mut out);
    out
}
