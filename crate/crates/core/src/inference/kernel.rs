//! Per-region building blocks shared by every update rule: the precomputed
//! conditionals `P(x_R | x_N(R))`, neighborhood distributions (factorized or
//! Bethe), and the reduced-DLR right-hand side that combines them.

use std::sync::OnceLock;

use crate::model::{decode, ModelError, PairwiseModel, Region, RegionConditional};

use super::beliefs::{pair_marginal, BeliefSet, Level};
use super::{InferenceError, Result};

/// `out[r] = Σ_b P(r | b) · neighborhood[b]`, renormalized.
///
/// Every update in the hierarchy, and the Chapman–Kolmogorov marginal step,
/// goes through this function.
pub fn reduced_dlr_rhs(cond: &RegionConditional, neighborhood: &[f64], out: &mut [f64]) {
    debug_assert_eq!(neighborhood.len(), cond.boundary_configs);
    debug_assert_eq!(out.len(), cond.region_states);
    out.iter_mut().for_each(|v| *v = 0.0);
    let rs = cond.region_states;
    for (w, row) in neighborhood.iter().zip(cond.table.chunks_exact(rs)) {
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
}

/// Product distribution `Π_k b_k(x_k)` over `nodes`, row-major.
pub fn factorized_neighborhood(nodes: &[usize], singles: &[Vec<f64>], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for &k in nodes {
        let b = &singles[k];
        let len = out.len();
        out.resize(len * b.len(), 0.0);
        // expand in place from the back so earlier entries are still unread
        for idx in (0..len).rev() {
            let base = out[idx];
            for (s, &p) in b.iter().enumerate().rev() {
                out[idx * b.len() + s] = base * p;
            }
        }
    }
}

/// Joint over a region and its neighborhood built from singleton and edge
/// beliefs in tree form:
///
/// ```text
/// B(x_i, x_N(i))        = (1/Z_i)  b_i(x_i)       Π_{j∈N(i)}   b_ij / b_i
/// B(x_i, x_j, x_N(i,j)) = (1/Z_ij) b_ij(x_i, x_j) Π_{k∈N(i)\j} b_ik / b_i  Π_{l∈N(j)\i} b_jl / b_j
/// ```
///
/// At level 1.5 each denominator is the marginal of the edge table in the
/// same factor, so every ratio is a conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct BetheEmbedding {
    pub region: Region,
    /// Region nodes followed by neighborhood nodes; table order.
    pub nodes: Vec<usize>,
    pub cards: Vec<usize>,
    pub region_states: usize,
    /// Normalized joint, row-major over `nodes`.
    pub table: Vec<f64>,
    /// Normalizer `Z` before division.
    pub normalizer: f64,
    /// Denominator entries raised to the clamp.
    pub clamp_events: usize,
}

impl BetheEmbedding {
    /// `B(x_N(R))`, summing out the region.
    pub fn neighborhood_marginal(&self) -> Vec<f64> {
        let nb = self.table.len() / self.region_states;
        let mut out = vec![0.0; nb];
        for row in self.table.chunks_exact(nb) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// Marginal on the region itself.
    pub fn region_marginal(&self) -> Vec<f64> {
        let nb = self.table.len() / self.region_states;
        self.table.chunks_exact(nb).map(|r| r.iter().sum()).collect()
    }
}

/// Precomputed conditionals for a model.
pub struct DlrContext<'m> {
    model: &'m PairwiseModel,
    singles: Vec<RegionConditional>,
    pairs: OnceLock<std::result::Result<Vec<RegionConditional>, ModelError>>,
}

pub(crate) struct Scratch {
    pub product: Vec<f64>,
    pub embed: Vec<f64>,
    pub marginal: Vec<f64>,
    pub dens: Vec<Vec<f64>>,
}

impl Scratch {
    pub fn new() -> Self {
        Self {
            product: Vec::new(),
            embed: Vec::new(),
            marginal: Vec::new(),
            dens: Vec::new(),
        }
    }
}

impl<'m> DlrContext<'m> {
    pub fn new(model: &'m PairwiseModel) -> Result<Self> {
        let singles = (0..model.node_count())
            .map(|i| RegionConditional::build(model, Region::Single(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            model,
            singles,
            pairs: OnceLock::new(),
        })
    }

    pub fn model(&self) -> &'m PairwiseModel {
        self.model
    }

    pub fn single(&self, node: usize) -> &RegionConditional {
        &self.singles[node]
    }

    /// Edge conditionals, built on first use. Region for edge `e` is
    /// `Pair(edges[e].0, edges[e].1)`.
    pub fn pairs(&self) -> Result<&[RegionConditional]> {
        let built = self.pairs.get_or_init(|| {
            self.model
                .topology()
                .edges()
                .iter()
                .map(|&(a, b)| RegionConditional::build(self.model, Region::Pair(a, b)))
                .collect()
        });
        built.as_deref().map_err(|e| InferenceError::Model(e.clone()))
    }

    /// FN-style update of one region from a product of singleton beliefs.
    pub(crate) fn factorized_update(
        &self,
        cond: &RegionConditional,
        singles: &[Vec<f64>],
        scratch: &mut Scratch,
        out: &mut [f64],
    ) {
        factorized_neighborhood(&cond.neighbors, singles, &mut scratch.product);
        reduced_dlr_rhs(cond, &scratch.product, out);
    }

    /// Bethe-embedding update of one region. Returns clamp events.
    pub(crate) fn bethe_update(
        &self,
        cond: &RegionConditional,
        beliefs: &BeliefSet,
        clamp: f64,
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Result<usize> {
        let (_, clamps) = self.embed_into(cond, beliefs, clamp, scratch)?;
        let rs = cond.region_states;
        let nb = cond.boundary_configs;
        scratch.marginal.clear();
        scratch.marginal.resize(nb, 0.0);
        for row in scratch.embed.chunks_exact(nb).take(rs) {
            scratch.marginal.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        reduced_dlr_rhs(cond, &scratch.marginal, out);
        Ok(clamps)
    }

    /// Fills `scratch.embed` with the normalized Bethe joint of `cond.region`.
    /// Returns `(Z, clamp events)`.
    pub(crate) fn embed_into(
        &self,
        cond: &RegionConditional,
        beliefs: &BeliefSet,
        clamp: f64,
        scratch: &mut Scratch,
    ) -> Result<(f64, usize)> {
        if !beliefs.level.has_pairs() {
            return Err(InferenceError::LevelMismatch {
                expected: "1.5 or 2",
                found: beliefs.level,
            });
        }
        let model = self.model;
        let topo = model.topology();
        let rnodes = &cond.nodes;

        // (region position, edge, neighbor position) for every region–blanket edge
        let mut factors: Vec<(usize, usize, usize)> = Vec::new();
        for (q, &k) in cond.neighbors.iter().enumerate() {
            for (p, &u) in rnodes.iter().enumerate() {
                if let Some(e) = topo.edge_between(u, k) {
                    factors.push((p, e, q));
                }
            }
        }
        // clamped denominators, one table per factor
        let mut clamps = 0;
        scratch.dens.resize(factors.len(), Vec::new());
        for (f, &(p, e, _)) in factors.iter().enumerate() {
            let u = rnodes[p];
            let den = &mut scratch.dens[f];
            match beliefs.level {
                Level::Full => {
                    den.clear();
                    den.extend_from_slice(&beliefs.singles[u]);
                }
                _ => *den = pair_marginal(model, e, u, &beliefs.pairs[e]),
            }
            for d in den.iter_mut() {
                if *d < clamp {
                    *d = clamp;
                    clamps += 1;
                }
            }
        }

        let rs = cond.region_states;
        let nb = cond.boundary_configs;
        scratch.embed.clear();
        scratch.embed.resize(rs * nb, 0.0);
        let mut xs = vec![0usize; rnodes.len()];
        let mut xb = vec![0usize; cond.neighbors.len()];
        for r in 0..rs {
            decode(r, &cond.region_cards, &mut xs);
            let pre = match cond.region {
                Region::Single(i) => beliefs.singles[i][xs[0]],
                Region::Pair(..) => {
                    let e = topo.edge_between(rnodes[0], rnodes[1]).expect("edge region");
                    beliefs.pairs[e][r]
                }
            };
            let row = &mut scratch.embed[r * nb..(r + 1) * nb];
            for (b, slot) in row.iter_mut().enumerate() {
                decode(b, &cond.boundary_cards, &mut xb);
                let mut v = pre;
                for (f, &(p, e, q)) in factors.iter().enumerate() {
                    let u = rnodes[p];
                    let k = cond.neighbors[q];
                    let (ea, eb) = topo.edges()[e];
                    let cb = model.cardinality(eb);
                    let idx = if ea == u {
                        xs[p] * cb + xb[q]
                    } else {
                        debug_assert_eq!(ea, k);
                        xb[q] * cb + xs[p]
                    };
                    v *= beliefs.pairs[e][idx] / scratch.dens[f][xs[p]];
                }
                *slot = v;
            }
        }
        let z: f64 = scratch.embed.iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(InferenceError::Diagnostic(format!(
                "Bethe embedding of {:?} has normalizer {z}",
                cond.region
            )));
        }
        scratch.embed.iter_mut().for_each(|v| *v /= z);
        Ok((z, clamps))
    }

    /// Mean-field update of one node: geometric mean of the conditional under the
    /// product of neighbor beliefs.
    pub(crate) fn mean_field_update(
        &self,
        node: usize,
        singles: &[Vec<f64>],
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        let cond = &self.singles[node];
        factorized_neighborhood(&cond.neighbors, singles, &mut scratch.product);
        let rs = cond.region_states;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (b, (&w, row)) in scratch
            .product
            .iter()
            .zip(cond.table.chunks_exact(rs))
            .enumerate()
        {
            if w == 0.0 {
                continue;
            }
            for (x, (o, &p)) in out.iter_mut().zip(row).enumerate() {
                if p <= 0.0 {
                    let mut boundary = vec![0; cond.neighbors.len()];
                    decode(b, &cond.boundary_cards, &mut boundary);
                    return Err(InferenceError::LogOfZero {
                        node,
                        state: x,
                        boundary,
                    });
                }
                *o += w * p.ln();
            }
        }
        softmax_in_place(out);
        Ok(())
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Bethe joint of `region` (standalone).
pub fn bethe_embedding(
    model: &PairwiseModel,
    beliefs: &BeliefSet,
    region: Region,
    clamp: f64,
) -> Result<BetheEmbedding> {
    let cond = RegionConditional::build(model, region)?;
    let ctx = DlrContext::new(model)?;
    let mut scratch = Scratch::new();
    let (normalizer, clamp_events) = ctx.embed_into(&cond, beliefs, clamp, &mut scratch)?;
    let mut nodes = cond.nodes.clone();
    nodes.extend(&cond.neighbors);
    let mut cards = cond.region_cards.clone();
    cards.extend(&cond.boundary_cards);
    Ok(BetheEmbedding {
        region,
        nodes,
        cards,
        region_states: cond.region_states,
        table: scratch.embed,
        normalizer,
        clamp_events,
    })
}
