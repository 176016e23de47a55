use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exact::ExactSummary;
use crate::model::{PairwiseModel, Topology};

/// Which regions a belief set represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    /// Singletons only.
    #[serde(rename = "1")]
    Singleton,
    /// Edges only; singletons are derived by averaging edge marginals.
    #[serde(rename = "1.5")]
    Edge,
    /// Singletons and edges.
    #[serde(rename = "2")]
    Full,
}

impl Level {
    pub fn has_pairs(self) -> bool {
        self != Level::Singleton
    }
}

/// Approximate singleton tables `b_i` and, from level 1.5 up, edge tables `b_ij`
/// laid out like the model's pairwise tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSet {
    pub level: Level,
    pub singles: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<Vec<f64>>,
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn random_table(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| 0.05 + rng.gen::<f64>()).collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Uniform tables at the requested level.
pub fn init_beliefs(model: &PairwiseModel, level: Level) -> BeliefSet {
    let cards = model.cardinalities();
    let singles = cards.iter().map(|&c| uniform(c)).collect();
    let pairs = if level.has_pairs() {
        model
            .topology()
            .edges()
            .iter()
            .map(|&(a, b)| uniform(cards[a] * cards[b]))
            .collect()
    } else {
        Vec::new()
    };
    BeliefSet {
        level,
        singles,
        pairs,
    }
}

/// Independently drawn positive tables; level-2 singletons are *not* made
/// consistent with the pairs.
pub fn init_random_beliefs(model: &PairwiseModel, level: Level, seed: u64) -> BeliefSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cards = model.cardinalities();
    let mut singles: Vec<Vec<f64>> = cards.iter().map(|&c| random_table(c, &mut rng)).collect();
    let pairs: Vec<Vec<f64>> = if level.has_pairs() {
        model
            .topology()
            .edges()
            .iter()
            .map(|&(a, b)| random_table(cards[a] * cards[b], &mut rng))
            .collect()
    } else {
        Vec::new()
    };
    if level == Level::Edge {
        singles = derived_singles(model, &pairs);
    }
    BeliefSet {
        level,
        singles,
        pairs,
    }
}

/// Row (`toward_first = true`) or column marginal of an edge table, i.e. the
/// marginal on `edges[e].0` or `edges[e].1`.
pub fn pair_marginal(model: &PairwiseModel, edge: usize, node: usize, table: &[f64]) -> Vec<f64> {
    let (a, b) = model.topology().edges()[edge];
    let (ca, cb) = (model.cardinality(a), model.cardinality(b));
    let mut out = vec![0.0; model.cardinality(node)];
    for xa in 0..ca {
        for xb in 0..cb {
            let v = table[xa * cb + xb];
            if node == a {
                out[xa] += v;
            } else {
                out[xb] += v;
            }
        }
    }
    out
}

/// `b_i = (1/|N(i)|) Σ_{j∈N(i)} Σ_{x_j} b_ij`. An isolated node has no edge
/// table to average, so it gets its normalized unary potential (its exact
/// marginal).
pub fn derived_singles(model: &PairwiseModel, pairs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..model.node_count())
        .map(|i| derived_single(model, pairs, i))
        .collect()
}

pub(crate) fn derived_single(model: &PairwiseModel, pairs: &[Vec<f64>], node: usize) -> Vec<f64> {
    let inc = model.topology().incident(node);
    if inc.is_empty() {
        let u = model.unary(node);
        let s: f64 = u.iter().sum();
        return u.iter().map(|v| v / s).collect();
    }
    let mut out = vec![0.0; model.cardinality(node)];
    for &(_, e) in inc {
        for (o, v) in out.iter_mut().zip(pair_marginal(model, e, node, &pairs[e])) {
            *o += v;
        }
    }
    let n = inc.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

impl BeliefSet {
    /// Level-2 (or level-1 / level-1.5) beliefs holding exact marginals.
    pub fn from_exact(model: &PairwiseModel, exact: &ExactSummary, level: Level) -> Self {
        let pairs = if level.has_pairs() {
            exact.pairwise_marginals.clone()
        } else {
            Vec::new()
        };
        let singles = if level == Level::Edge {
            derived_singles(model, &pairs)
        } else {
            exact.singleton_marginals.clone()
        };
        Self {
            level,
            singles,
            pairs,
        }
    }

    /// Recomputes derived singletons for level 1.5.
    pub fn refresh_derived(&mut self, model: &PairwiseModel) {
        if self.level == Level::Edge {
            self.singles = derived_singles(model, &self.pairs);
        }
    }

    /// Tables that the level represents directly.
    pub fn represented(&self) -> impl Iterator<Item = &Vec<f64>> {
        let singles: &[Vec<f64>] = if self.level == Level::Edge {
            &[]
        } else {
            &self.singles
        };
        singles.iter().chain(self.pairs.iter())
    }

    /// Max entrywise absolute difference over represented tables.
    pub fn max_abs_diff(&self, other: &BeliefSet) -> f64 {
        self.represented()
            .zip(other.represented())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest deviation of any table's sum from 1.
    pub fn normalization_error(&self) -> f64 {
        self.singles
            .iter()
            .chain(self.pairs.iter())
            .map(|t| (t.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Max over edges and endpoints of `|Σ_{x_j} b_ij − b_i|`.
    pub fn consistency_error(&self, model: &PairwiseModel) -> f64 {
        let mut worst: f64 = 0.0;
        for (e, &(a, b)) in model.topology().edges().iter().enumerate() {
            for node in [a, b] {
                let m = pair_marginal(model, e, node, &self.pairs[e]);
                for (x, y) in m.iter().zip(&self.singles[node]) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    /// Mean over nodes of `Σ_x |b_i(x) − p_i(x)|`.
    pub fn l1_error(&self, exact: &[Vec<f64>]) -> f64 {
        let total: f64 = self
            .singles
            .iter()
            .zip(exact)
            .map(|(b, p)| b.iter().zip(p).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .sum();
        total / self.singles.len().max(1) as f64
    }

    /// Max entrywise difference of singleton tables from exact marginals.
    pub fn max_single_error(&self, exact: &[Vec<f64>]) -> f64 {
        self.singles
            .iter()
            .zip(exact)
            .flat_map(|(b, p)| b.iter().zip(p).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub(crate) fn topology_matches(&self, topology: &Topology) -> bool {
        self.singles.len() == topology.node_count()
            && (!self.level.has_pairs() || self.pairs.len() == topology.edge_count())
    }
}

/// Directed messages for sum-product BP. Message `2e` flows
/// `edges[e].0 → edges[e].1` and is a table over the target's states; `2e + 1`
/// flows the other way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSet {
    pub messages: Vec<Vec<f64>>,
}

impl MessageSet {
    pub fn uniform(model: &PairwiseModel) -> Self {
        let cards = model.cardinalities();
        let messages = model
            .topology()
            .edges()
            .iter()
            .flat_map(|&(a, b)| [uniform(cards[b]), uniform(cards[a])])
            .collect();
        Self { messages }
    }

    pub fn random(model: &PairwiseModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cards = model.cardinalities();
        let messages = model
            .topology()
            .edges()
            .iter()
            .flat_map(|&(a, b)| [cards[b], cards[a]])
            .map(|c| random_table(c, &mut rng))
            .collect();
        Self { messages }
    }

    /// Index of the message `from → to` along `edge`.
    #[inline]
    pub fn index(model: &PairwiseModel, edge: usize, from: usize) -> usize {
        if model.topology().edges()[edge].0 == from {
            2 * edge
        } else {
            2 * edge + 1
        }
    }

    pub fn max_abs_diff(&self, other: &MessageSet) -> f64 {
        self.messages
            .iter()
            .zip(&other.messages)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
