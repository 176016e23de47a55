//! Pairwise discrete Markov random fields.
//!
//! A [`PairwiseModel`] is a graph ([`Topology`]) with a nonnegative table per
//! node and per edge:
//!
//! ```text
//! P(x) = (1/Z) Π_i Ψ_i(x_i) Π_(ij) Ψ_ij(x_i, x_j)
//! ```
//!
//! Tables are stored in the linear domain together with their logarithms so
//! that conditionals can be formed with a max-subtraction in the exponent.
//! The binary Ising family `exp(Σ θ_ij x_i x_j + Σ ϕ_i x_i)` with `x ∈ {0,1}`
//! is built by [`build_ising`]; its parameters stay attached to the model so
//! closed-form updates can use them.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest number of boundary configurations a region may have.
pub const MAX_BOUNDARY_CONFIGS: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate conditional for region {region:?} (all weights zero)")]
    DegenerateConditional { region: Vec<usize> },
    #[error("region {region:?} has {configs} boundary configurations (limit {limit})")]
    BoundaryTooLarge {
        region: Vec<usize>,
        configs: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Undirected simple graph on nodes `0..node_count`.
///
/// Edges keep the orientation they were given in; pairwise tables are laid
/// out row-major over `(edges[e].0, edges[e].1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    incident: Vec<Vec<(usize, usize)>>,
    lookup: HashMap<(usize, usize), usize>,
}

impl Topology {
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(edges.len());
        let mut adjacency = vec![Vec::new(); node_count];
        let mut incident = vec![Vec::new(); node_count];
        for (e, &(a, b)) in edges.iter().enumerate() {
            if a >= node_count || b >= node_count {
                return Err(ModelError::InvalidTopology(format!(
                    "edge {e} ({a}, {b}) references a node outside 0..{node_count}"
                )));
            }
            if a == b {
                return Err(ModelError::InvalidTopology(format!(
                    "edge {e} is a self-loop on node {a}"
                )));
            }
            if let Some(prev) = lookup.insert((a.min(b), a.max(b)), e) {
                return Err(ModelError::InvalidTopology(format!(
                    "edge {e} ({a}, {b}) duplicates edge {prev}"
                )));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
            incident[a].push((b, e));
            incident[b].push((a, e));
        }
        for (adj, inc) in adjacency.iter_mut().zip(incident.iter_mut()) {
            adj.sort_unstable();
            inc.sort_unstable();
        }
        Ok(Self {
            node_count,
            edges,
            adjacency,
            incident,
            lookup,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbors of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// `(neighbor, edge id)` pairs for `node`, sorted by neighbor.
    pub fn incident(&self, node: usize) -> &[(usize, usize)] {
        &self.incident[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Edge id joining `a` and `b`, in either orientation.
    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        self.lookup.get(&(a.min(b), a.max(b))).copied()
    }

    /// True when the graph has no cycles (a forest).
    pub fn is_forest(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.node_count).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return false;
            }
            parent[ra] = rb;
        }
        true
    }
}

/// Rectangular lattice with periodic boundaries. Node `(r, c)` is `r * cols + c`;
/// edges are emitted in raster order, right neighbor first, then down.
pub fn torus_grid(rows: usize, cols: usize) -> Result<Topology> {
    if rows < 3 || cols < 3 {
        return Err(ModelError::InvalidDimension(format!(
            "torus needs rows >= 3 and cols >= 3, got {rows}x{cols}"
        )));
    }
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let node = r * cols + c;
            let right = r * cols + (c + 1) % cols;
            let down = ((r + 1) % rows) * cols + c;
            edges.push((node.min(right), node.max(right)));
            edges.push((node.min(down), node.max(down)));
        }
    }
    Topology::new(rows * cols, edges)
}

/// Parameters of the binary Ising model `exp(Σ θ_ij x_i x_j + Σ ϕ_i x_i)`, `x ∈ {0,1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingParams {
    pub topology: Topology,
    /// One coupling per edge of `topology`, same order.
    pub theta: Vec<f64>,
    /// One field per node.
    pub phi: Vec<f64>,
}

impl IsingParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.topology.edge_count() {
            return Err(ModelError::InvalidParameter(format!(
                "{} couplings for {} edges",
                self.theta.len(),
                self.topology.edge_count()
            )));
        }
        if self.phi.len() != self.topology.node_count() {
            return Err(ModelError::InvalidParameter(format!(
                "{} fields for {} nodes",
                self.phi.len(),
                self.topology.node_count()
            )));
        }
        if let Some(e) = self.theta.iter().position(|t| !t.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("theta[{e}] is not finite")));
        }
        if let Some(i) = self.phi.iter().position(|p| !p.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("phi[{i}] is not finite")));
        }
        Ok(())
    }
}

/// Discrete pairwise Markov random field.
#[derive(Debug, Clone)]
pub struct PairwiseModel {
    topology: Topology,
    cardinalities: Vec<usize>,
    unary: Vec<Vec<f64>>,
    pairwise: Vec<Vec<f64>>,
    log_unary: Vec<Vec<f64>>,
    log_pairwise: Vec<Vec<f64>>,
    ising: Option<IsingParams>,
}

impl PairwiseModel {
    /// Builds a model from linear-domain tables, checking every invariant.
    pub fn new(
        topology: Topology,
        cardinalities: Vec<usize>,
        unary: Vec<Vec<f64>>,
        pairwise: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = topology.node_count();
        if cardinalities.len() != n {
            return Err(ModelError::InvalidParameter(format!(
                "{} cardinalities for {n} nodes",
                cardinalities.len()
            )));
        }
        if let Some(i) = cardinalities.iter().position(|&c| c < 2) {
            return Err(ModelError::InvalidParameter(format!(
                "node {i} has cardinality {} (< 2)",
                cardinalities[i]
            )));
        }
        if unary.len() != n {
            return Err(ModelError::InvalidParameter(format!(
                "{} unary tables for {n} nodes",
                unary.len()
            )));
        }
        if pairwise.len() != topology.edge_count() {
            return Err(ModelError::InvalidParameter(format!(
                "{} pairwise tables for {} edges",
                pairwise.len(),
                topology.edge_count()
            )));
        }
        for (i, table) in unary.iter().enumerate() {
            check_table(table, cardinalities[i], &format!("unary[{i}]"))?;
        }
        for (e, table) in pairwise.iter().enumerate() {
            let (a, b) = topology.edges()[e];
            check_table(
                table,
                cardinalities[a] * cardinalities[b],
                &format!("pairwise[{e}]"),
            )?;
        }
        let ln = |t: &Vec<f64>| t.iter().map(|v| v.ln()).collect::<Vec<_>>();
        let log_unary = unary.iter().map(ln).collect();
        let log_pairwise = pairwise.iter().map(ln).collect();
        Ok(Self {
            topology,
            cardinalities,
            unary,
            pairwise,
            log_unary,
            log_pairwise,
            ising: None,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn cardinality(&self, node: usize) -> usize {
        self.cardinalities[node]
    }

    pub fn unary(&self, node: usize) -> &[f64] {
        &self.unary[node]
    }

    pub fn pairwise(&self, edge: usize) -> &[f64] {
        &self.pairwise[edge]
    }

    pub fn log_unary(&self, node: usize) -> &[f64] {
        &self.log_unary[node]
    }

    pub fn log_pairwise(&self, edge: usize) -> &[f64] {
        &self.log_pairwise[edge]
    }

    /// Ising parameters when the model was built by [`build_ising`].
    pub fn ising(&self) -> Option<&IsingParams> {
        self.ising.as_ref()
    }

    /// Pairwise potential of `edge` with `node` in state `x_node` and the other
    /// endpoint in state `x_other`, whichever way the edge is oriented.
    #[inline]
    pub fn edge_value(&self, edge: usize, node: usize, x_node: usize, x_other: usize) -> f64 {
        self.pairwise[edge][self.edge_offset(edge, node, x_node, x_other)]
    }

    /// Log of [`Self::edge_value`].
    #[inline]
    pub fn edge_log_value(&self, edge: usize, node: usize, x_node: usize, x_other: usize) -> f64 {
        self.log_pairwise[edge][self.edge_offset(edge, node, x_node, x_other)]
    }

    #[inline]
    fn edge_offset(&self, edge: usize, node: usize, x_node: usize, x_other: usize) -> usize {
        let (a, b) = self.topology.edges()[edge];
        if node == a {
            x_node * self.cardinalities[b] + x_other
        } else {
            x_other * self.cardinalities[b] + x_node
        }
    }

    /// Total number of joint configurations, or `None` on overflow.
    pub fn state_space_size(&self) -> Option<usize> {
        self.cardinalities
            .iter()
            .try_fold(1usize, |acc, &c| acc.checked_mul(c))
    }

    /// Unnormalized log weight `Σ log Ψ_i + Σ log Ψ_ij` of a full configuration.
    pub fn log_weight(&self, config: &[usize]) -> Result<f64> {
        self.check_config(config)?;
        Ok(self.log_weight_unchecked(config))
    }

    #[inline]
    pub(crate) fn log_weight_unchecked(&self, config: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &x) in config.iter().enumerate() {
            total += self.log_unary[i][x];
        }
        for (e, &(a, b)) in self.topology.edges().iter().enumerate() {
            total += self.log_pairwise[e][config[a] * self.cardinalities[b] + config[b]];
        }
        total
    }

    pub fn check_config(&self, config: &[usize]) -> Result<()> {
        if config.len() != self.node_count() {
            return Err(ModelError::InvalidConfig(format!(
                "configuration has {} entries for {} nodes",
                config.len(),
                self.node_count()
            )));
        }
        if let Some(i) = (0..config.len()).find(|&i| config[i] >= self.cardinalities[i]) {
            return Err(ModelError::InvalidConfig(format!(
                "node {i} state {} outside 0..{}",
                config[i], self.cardinalities[i]
            )));
        }
        Ok(())
    }
}

fn check_table(table: &[f64], expected: usize, location: &str) -> Result<()> {
    if table.len() != expected {
        return Err(ModelError::InvalidParameter(format!(
            "{location}: {} entries, expected {expected}",
            table.len()
        )));
    }
    if let Some(k) = table.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "{location}[{k}]: entry {} is negative or not finite",
            table[k]
        )));
    }
    if !table.iter().any(|&v| v > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "{location}: no strictly positive entry"
        )));
    }
    Ok(())
}

/// Converts Ising parameters into potential tables: `Ψ_i = (1, e^ϕ_i)`,
/// `Ψ_ij = (1, 1; 1, e^θ_ij)`.
pub fn build_ising(params: &IsingParams) -> Result<PairwiseModel> {
    params.validate()?;
    let topology = params.topology.clone();
    let n = topology.node_count();
    let unary = params.phi.iter().map(|p| vec![1.0, p.exp()]).collect();
    let pairwise = params
        .theta
        .iter()
        .map(|t| vec![1.0, 1.0, 1.0, t.exp()])
        .collect();
    let mut model = PairwiseModel::new(topology, vec![2; n], unary, pairwise)?;
    // exact logs, not ln(exp(.))
    model.log_unary = params.phi.iter().map(|&p| vec![0.0, p]).collect();
    model.log_pairwise = params.theta.iter().map(|&t| vec![0.0, 0.0, 0.0, t]).collect();
    model.ising = Some(params.clone());
    Ok(model)
}

/// Singleton or edge region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Single(usize),
    Pair(usize, usize),
}

impl Region {
    pub fn nodes(&self) -> Vec<usize> {
        match *self {
            Region::Single(i) => vec![i],
            Region::Pair(i, j) => vec![i, j],
        }
    }

    fn validate(&self, topology: &Topology) -> Result<()> {
        let n = topology.node_count();
        match *self {
            Region::Single(i) if i >= n => Err(ModelError::InvalidRegion(format!(
                "node {i} outside 0..{n}"
            ))),
            Region::Pair(i, j) if i >= n || j >= n => Err(ModelError::InvalidRegion(format!(
                "pair ({i}, {j}) outside 0..{n}"
            ))),
            Region::Pair(i, j) if topology.edge_between(i, j).is_none() || i == j => Err(
                ModelError::InvalidRegion(format!("pair ({i}, {j}) is not an edge")),
            ),
            _ => Ok(()),
        }
    }
}

/// Markov blanket of a region: neighbors of its nodes, minus the region itself.
/// Sorted and duplicate-free.
pub fn neighborhood(topology: &Topology, region: Region) -> Result<Vec<usize>> {
    region.validate(topology)?;
    let nodes = region.nodes();
    let mut out: Vec<usize> = nodes
        .iter()
        .flat_map(|&i| topology.neighbors(i).iter().copied())
        .filter(|k| !nodes.contains(k))
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// `P(x_R | x_N(R))` as a table over region states (row-major over
/// `region.nodes()`), where `boundary[k]` is the state of `neighborhood(region)[k]`.
pub fn local_conditional(
    model: &PairwiseModel,
    region: Region,
    boundary: &[usize],
) -> Result<Vec<f64>> {
    let neighbors = neighborhood(model.topology(), region)?;
    if boundary.len() != neighbors.len() {
        return Err(ModelError::InvalidConfig(format!(
            "boundary has {} states for {} neighborhood nodes",
            boundary.len(),
            neighbors.len()
        )));
    }
    for (k, (&node, &x)) in neighbors.iter().zip(boundary).enumerate() {
        if x >= model.cardinality(node) {
            return Err(ModelError::InvalidConfig(format!(
                "boundary[{k}] (node {node}) state {x} outside 0..{}",
                model.cardinality(node)
            )));
        }
    }
    let nodes = region.nodes();
    let mut out = vec![0.0; nodes.iter().map(|&i| model.cardinality(i)).product()];
    conditional_into(model, &nodes, &neighbors, boundary, &mut out)?;
    Ok(out)
}

/// Shared kernel behind [`local_conditional`] and [`RegionConditional`]:
/// normalized product of every potential touching the region.
fn conditional_into(
    model: &PairwiseModel,
    nodes: &[usize],
    neighbors: &[usize],
    boundary: &[usize],
    out: &mut [f64],
) -> Result<()> {
    let state_of = |node: usize, region_states: &[usize]| -> usize {
        match nodes.iter().position(|&r| r == node) {
            Some(p) => region_states[p],
            None => boundary[neighbors.binary_search(&node).expect("neighbor in blanket")],
        }
    };
    let cards: Vec<usize> = nodes.iter().map(|&i| model.cardinality(i)).collect();
    let mut states = vec![0usize; nodes.len()];
    let mut max = f64::NEG_INFINITY;
    for (r, slot) in out.iter_mut().enumerate() {
        decode(r, &cards, &mut states);
        let mut lw = 0.0;
        for (p, &i) in nodes.iter().enumerate() {
            lw += model.log_unary(i)[states[p]];
            for &(k, e) in model.topology().incident(i) {
                // edges inside the region are counted once, from the lower position
                if let Some(q) = nodes.iter().position(|&r| r == k) {
                    if q < p {
                        continue;
                    }
                }
                lw += model.edge_log_value(e, i, states[p], state_of(k, &states));
            }
        }
        *slot = lw;
        max = max.max(lw);
    }
    if max == f64::NEG_INFINITY {
        return Err(ModelError::DegenerateConditional {
            region: nodes.to_vec(),
        });
    }
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Row-major mixed-radix decode: the first position is the most significant.
#[inline]
pub fn decode(mut index: usize, cards: &[usize], out: &mut [usize]) {
    for p in (0..cards.len()).rev() {
        out[p] = index % cards[p];
        index /= cards[p];
    }
}

/// Inverse of [`decode`].
#[inline]
pub fn encode(states: impl IntoIterator<Item = usize>, cards: &[usize]) -> usize {
    states
        .into_iter()
        .zip(cards)
        .fold(0, |acc, (x, &c)| acc * c + x)
}

/// Precomputed `P(x_R | x_N(R))` for every boundary configuration of one region.
#[derive(Debug, Clone)]
pub struct RegionConditional {
    pub region: Region,
    /// Region nodes in table order.
    pub nodes: Vec<usize>,
    /// Neighborhood nodes in boundary order.
    pub neighbors: Vec<usize>,
    pub region_cards: Vec<usize>,
    pub boundary_cards: Vec<usize>,
    pub region_states: usize,
    pub boundary_configs: usize,
    /// `table[b * region_states + r]`.
    pub table: Vec<f64>,
}

impl RegionConditional {
    pub fn build(model: &PairwiseModel, region: Region) -> Result<Self> {
        let neighbors = neighborhood(model.topology(), region)?;
        let nodes = region.nodes();
        let region_cards: Vec<usize> = nodes.iter().map(|&i| model.cardinality(i)).collect();
        let boundary_cards: Vec<usize> = neighbors.iter().map(|&i| model.cardinality(i)).collect();
        let boundary_configs = boundary_cards
            .iter()
            .try_fold(1usize, |acc, &c| acc.checked_mul(c))
            .filter(|&c| c <= MAX_BOUNDARY_CONFIGS)
            .ok_or_else(|| ModelError::BoundaryTooLarge {
                region: nodes.clone(),
                configs: boundary_cards
                    .iter()
                    .fold(1usize, |acc, &c| acc.saturating_mul(c)),
                limit: MAX_BOUNDARY_CONFIGS,
            })?;
        let region_states: usize = region_cards.iter().product();
        let mut table = vec![0.0; boundary_configs * region_states];
        let mut boundary = vec![0usize; neighbors.len()];
        for (b, row) in table.chunks_mut(region_states).enumerate() {
            decode(b, &boundary_cards, &mut boundary);
            conditional_into(model, &nodes, &neighbors, &boundary, row)?;
        }
        Ok(Self {
            region,
            nodes,
            neighbors,
            region_cards,
            boundary_cards,
            region_states,
            boundary_configs,
            table,
        })
    }

    /// Conditional row for a boundary configuration index.
    #[inline]
    pub fn row(&self, boundary_index: usize) -> &[f64] {
        let s = boundary_index * self.region_states;
        &self.table[s..s + self.region_states]
    }

    /// Boundary index read off a full configuration.
    #[inline]
    pub fn boundary_index(&self, config: &[usize]) -> usize {
        encode(self.neighbors.iter().map(|&k| config[k]), &self.boundary_cards)
    }
}

/// Random spin-glass instance on a torus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub rows: usize,
    pub cols: usize,
    pub var_theta: f64,
    pub var_phi: f64,
    pub seed: u64,
}

impl InstanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 3 || self.cols < 3 {
            return Err(ModelError::InvalidDimension(format!(
                "grid must be at least 3x3, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.var_theta > 0.0 && self.var_theta.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "var_theta must be positive, got {}",
                self.var_theta
            )));
        }
        if !(self.var_phi > 0.0 && self.var_phi.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "var_phi must be positive, got {}",
                self.var_phi
            )));
        }
        Ok(())
    }
}

/// Standard normal draw by Box–Muller on two ChaCha8 uniforms (cosine branch
/// only), so instances are reproducible across platforms and crate versions
/// of `rand_distr`.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draws `θ_ij ~ N(0, var_theta)` in edge order, then `g_i ~ N(0, var_phi)` in
/// node order, and sets `ϕ_i = g_i − ½ Σ_{j∈N(i)} θ_ij`.
///
/// With `g = 0` the shifted model is invariant under the global flip
/// `x → 1 − x`, so every singleton marginal is exactly ½.
pub fn random_ising_instance(cfg: &InstanceConfig) -> Result<IsingParams> {
    cfg.validate()?;
    let topology = torus_grid(cfg.rows, cfg.cols)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sd_theta = cfg.var_theta.sqrt();
    let sd_phi = cfg.var_phi.sqrt();
    let theta: Vec<f64> = (0..topology.edge_count())
        .map(|_| sd_theta * standard_normal(&mut rng))
        .collect();
    let g: Vec<f64> = (0..topology.node_count())
        .map(|_| sd_phi * standard_normal(&mut rng))
        .collect();
    Ok(shifted_ising(topology, theta, g))
}

/// Applies the field shift `ϕ_i = g_i − ½ Σ_{j∈N(i)} θ_ij`.
pub fn shifted_ising(topology: Topology, theta: Vec<f64>, raw_field: Vec<f64>) -> IsingParams {
    let phi = (0..topology.node_count())
        .map(|i| {
            let pull: f64 = topology.incident(i).iter().map(|&(_, e)| theta[e]).sum();
            raw_field[i] - 0.5 * pull
        })
        .collect();
    IsingParams {
        topology,
        theta,
        phi,
    }
}
