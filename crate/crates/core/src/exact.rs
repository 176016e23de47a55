//! Brute-force exact inference by enumerating every joint configuration.
//!
//! This is the ground truth the approximate algorithms are scored against.
//! Weights are accumulated in the log domain relative to the global maximum,
//! with compensated summation, so models whose weights span many orders of
//! magnitude keep full precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_range, ExecMode};
use crate::model::{decode, ModelError, PairwiseModel, Region};

/// Largest joint state space the oracle will enumerate.
pub const MAX_CONFIGS: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExactError {
    #[error("state space of {configs} configurations exceeds the limit of {limit}")]
    TooLarge { configs: String, limit: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExactError>;

/// Exact partition function and marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSummary {
    pub log_partition: f64,
    pub singleton_marginals: Vec<Vec<f64>>,
    /// Row-major over the edge's stored orientation.
    pub pairwise_marginals: Vec<Vec<f64>>,
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn state_space(model: &PairwiseModel) -> Result<usize> {
    match model.state_space_size() {
        Some(n) if n <= MAX_CONFIGS => Ok(n),
        Some(n) => Err(ExactError::TooLarge {
            configs: n.to_string(),
            limit: MAX_CONFIGS,
        }),
        None => Err(ExactError::TooLarge {
            configs: "more than usize::MAX".into(),
            limit: MAX_CONFIGS,
        }),
    }
}

/// Fixed chunking of `0..total`, independent of the worker count.
fn chunks(total: usize) -> Vec<(usize, usize)> {
    let count = total.clamp(1, 256);
    let size = total.div_ceil(count);
    (0..count)
        .map(|c| (c * size, ((c + 1) * size).min(total)))
        .filter(|(s, e)| s < e)
        .collect()
}

/// Walks configurations `start..end` in row-major order, calling `f(index, config)`.
fn walk(model: &PairwiseModel, start: usize, end: usize, mut f: impl FnMut(usize, &[usize])) {
    let cards = model.cardinalities();
    let mut config = vec![0usize; cards.len()];
    decode(start, cards, &mut config);
    for index in start..end {
        f(index, &config);
        for p in (0..cards.len()).rev() {
            config[p] += 1;
            if config[p] < cards[p] {
                break;
            }
            config[p] = 0;
        }
    }
}

fn max_log_weight(model: &PairwiseModel, mode: ExecMode) -> Result<f64> {
    let total = state_space(model)?;
    let parts = chunks(total);
    let maxima = map_range(mode, parts.len(), |c| {
        let (s, e) = parts[c];
        let mut m = f64::NEG_INFINITY;
        walk(model, s, e, |_, x| m = m.max(model.log_weight_unchecked(x)));
        m
    });
    Ok(maxima.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// `log Z` by streaming enumeration.
pub fn partition_function(model: &PairwiseModel) -> Result<f64> {
    partition_function_with(model, ExecMode::default())
}

pub fn partition_function_with(model: &PairwiseModel, mode: ExecMode) -> Result<f64> {
    let total = state_space(model)?;
    let max = max_log_weight(model, mode)?;
    let parts = chunks(total);
    let sums = map_range(mode, parts.len(), |c| {
        let (s, e) = parts[c];
        let mut acc = CompensatedSum::default();
        walk(model, s, e, |_, x| acc.add((model.log_weight_unchecked(x) - max).exp()));
        acc.value()
    });
    let mut z = CompensatedSum::default();
    sums.into_iter().for_each(|v| z.add(v));
    Ok(max + z.value().ln())
}

struct Partial {
    z: CompensatedSum,
    singles: Vec<Vec<CompensatedSum>>,
    pairs: Vec<Vec<CompensatedSum>>,
}

/// Exact singleton and edge marginals.
pub fn exact_marginals(model: &PairwiseModel) -> Result<ExactSummary> {
    exact_marginals_with(model, ExecMode::default())
}

pub fn exact_marginals_with(model: &PairwiseModel, mode: ExecMode) -> Result<ExactSummary> {
    let total = state_space(model)?;
    let max = max_log_weight(model, mode)?;
    let cards = model.cardinalities();
    let edges = model.topology().edges();
    let parts = chunks(total);
    let partials = map_range(mode, parts.len(), |c| {
        let (s, e) = parts[c];
        let mut p = Partial {
            z: CompensatedSum::default(),
            singles: cards.iter().map(|&k| vec![CompensatedSum::default(); k]).collect(),
            pairs: edges
                .iter()
                .map(|&(a, b)| vec![CompensatedSum::default(); cards[a] * cards[b]])
                .collect(),
        };
        walk(model, s, e, |_, x| {
            let w = (model.log_weight_unchecked(x) - max).exp();
            p.z.add(w);
            for (i, &xi) in x.iter().enumerate() {
                p.singles[i][xi].add(w);
            }
            for (k, &(a, b)) in edges.iter().enumerate() {
                p.pairs[k][x[a] * cards[b] + x[b]].add(w);
            }
        });
        p
    });
    let mut z = CompensatedSum::default();
    let mut singles: Vec<Vec<CompensatedSum>> =
        cards.iter().map(|&k| vec![CompensatedSum::default(); k]).collect();
    let mut pairs: Vec<Vec<CompensatedSum>> = edges
        .iter()
        .map(|&(a, b)| vec![CompensatedSum::default(); cards[a] * cards[b]])
        .collect();
    for p in &partials {
        z.add(p.z.value());
        for (dst, src) in singles.iter_mut().zip(&p.singles) {
            dst.iter_mut().zip(src).for_each(|(d, s)| d.add(s.value()));
        }
        for (dst, src) in pairs.iter_mut().zip(&p.pairs) {
            dst.iter_mut().zip(src).for_each(|(d, s)| d.add(s.value()));
        }
    }
    let zv = z.value();
    let normalize = |t: &Vec<CompensatedSum>| t.iter().map(|s| s.value() / zv).collect();
    Ok(ExactSummary {
        log_partition: max + zv.ln(),
        singleton_marginals: singles.iter().map(normalize).collect(),
        pairwise_marginals: pairs.iter().map(normalize).collect(),
    })
}

/// Normalized `P(x)` for one configuration.
pub fn joint_probability(model: &PairwiseModel, config: &[usize]) -> Result<f64> {
    let lw = model.log_weight(config)?;
    Ok((lw - partition_function(model)?).exp())
}

/// Every `P(x)`, indexed row-major over node states.
pub fn joint_table(model: &PairwiseModel) -> Result<Vec<f64>> {
    let total = state_space(model)?;
    let log_z = partition_function(model)?;
    let mut out = vec![0.0; total];
    walk(model, 0, total, |i, x| {
        out[i] = (model.log_weight_unchecked(x) - log_z).exp()
    });
    Ok(out)
}

/// Exact marginal over an arbitrary node list (row-major in the given order).
pub fn region_marginal(model: &PairwiseModel, nodes: &[usize]) -> Result<Vec<f64>> {
    let total = state_space(model)?;
    let cards: Vec<usize> = nodes.iter().map(|&i| model.cardinality(i)).collect();
    let size: usize = cards.iter().product();
    let max = max_log_weight(model, ExecMode::Sequential)?;
    let mut acc = vec![CompensatedSum::default(); size];
    let mut z = CompensatedSum::default();
    walk(model, 0, total, |_, x| {
        let w = (model.log_weight_unchecked(x) - max).exp();
        let idx = nodes.iter().zip(&cards).fold(0, |a, (&n, &c)| a * c + x[n]);
        acc[idx].add(w);
        z.add(w);
    });
    Ok(acc.iter().map(|s| s.value() / z.value()).collect())
}

/// `P(x_R | x_B)` by summing joint weights of every configuration consistent
/// with `boundary` on `boundary_nodes`. Independent of
/// [`crate::model::local_conditional`]; used to check it.
pub fn brute_force_conditional(
    model: &PairwiseModel,
    region: Region,
    boundary_nodes: &[usize],
    boundary: &[usize],
) -> Result<Vec<f64>> {
    let total = state_space(model)?;
    let nodes = region.nodes();
    let cards: Vec<usize> = nodes.iter().map(|&i| model.cardinality(i)).collect();
    let size: usize = cards.iter().product();
    let mut acc = vec![0.0f64; size];
    let mut logs: Vec<(usize, f64)> = Vec::new();
    walk(model, 0, total, |_, x| {
        if boundary_nodes.iter().zip(boundary).all(|(&n, &s)| x[n] == s) {
            let idx = nodes.iter().zip(&cards).fold(0, |a, (&n, &c)| a * c + x[n]);
            logs.push((idx, model.log_weight_unchecked(x)));
        }
    });
    let max = logs.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    for (idx, lw) in logs {
        acc[idx] += (lw - max).exp();
    }
    let z: f64 = acc.iter().sum();
    Ok(acc.into_iter().map(|v| v / z).collect())
}
