//! Single-site Gibbs sampling and its deterministic counterpart.
//!
//! The site kernel `K_i(x | x') = P(x_i | x'_N(i)) δ(x_{\i}, x'_{\i})` satisfies
//! detailed balance with respect to `P`. Propagating a marginal through it
//! (Chapman–Kolmogorov) gives the same right-hand side as the reduced DLR
//! update, which [`ck_marginal_step`] evaluates with the inference kernel.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{joint_table, ExactError};
use crate::exec::{map_range, ExecMode};
use crate::inference::{reduced_dlr_rhs, BeliefSet, InferenceError, Level};
use crate::model::{decode, local_conditional, neighborhood, ModelError, PairwiseModel, Region, RegionConditional};

/// Largest configuration space for [`explicit_kernel`].
pub const MAX_KERNEL_CONFIGS: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("{configs} configurations exceed the explicit-kernel limit {limit}")]
    TooLarge { configs: String, limit: usize },
    #[error("invalid chain config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// A full assignment of states to nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration(Vec<usize>);

impl Configuration {
    pub fn new(model: &PairwiseModel, states: Vec<usize>) -> Result<Self> {
        model.check_config(&states)?;
        Ok(Self(states))
    }

    pub fn zeros(model: &PairwiseModel) -> Self {
        Self(vec![0; model.node_count()])
    }

    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn into_states(self) -> Vec<usize> {
        self.0
    }
}

/// Smallest state whose cumulative probability exceeds `draw`.
fn inverse_cdf(probs: &[f64], draw: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (s, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = s;
            if draw < acc {
                return s;
            }
        }
    }
    last
}

/// Resamples `site` from `P(x_site | x_N(site))` by inverting the CDF at
/// `draw ∈ [0, 1)`.
pub fn gibbs_site_update(
    model: &PairwiseModel,
    config: &Configuration,
    site: usize,
    draw: f64,
) -> Result<Configuration> {
    model.check_config(config.states())?;
    let blanket = neighborhood(model.topology(), Region::Single(site))?;
    let boundary: Vec<usize> = blanket.iter().map(|&k| config.0[k]).collect();
    let cond = local_conditional(model, Region::Single(site), &boundary)?;
    let mut next = config.clone();
    next.0[site] = inverse_cdf(&cond, draw);
    Ok(next)
}

/// Site kernel over the full configuration space. Only the `card(site)`
/// reachable targets of each source are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub site: usize,
    /// Number of configurations (rows and columns).
    pub size: usize,
    card: usize,
    stride: usize,
    probs: Vec<f64>,
}

impl KernelMatrix {
    /// Configuration reached from `from` by setting the site to `state`.
    #[inline]
    pub fn target(&self, from: usize, state: usize) -> usize {
        let current = (from / self.stride) % self.card;
        from - current * self.stride + state * self.stride
    }

    /// Transition probabilities from `from`, indexed by the new site state.
    pub fn row(&self, from: usize) -> &[f64] {
        &self.probs[from * self.card..(from + 1) * self.card]
    }

    pub fn row_mut(&mut self, from: usize) -> &mut [f64] {
        &mut self.probs[from * self.card..(from + 1) * self.card]
    }

    /// `K(to | from)`.
    pub fn entry(&self, from: usize, to: usize) -> f64 {
        let base = self.target(from, 0);
        if to < base || !(to - base).is_multiple_of(self.stride) {
            return 0.0;
        }
        let s = (to - base) / self.stride;
        if s < self.card {
            self.row(from)[s]
        } else {
            0.0
        }
    }

    /// Full row over all target configurations.
    pub fn dense_row(&self, from: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for (s, &p) in self.row(from).iter().enumerate() {
            out[self.target(from, s)] = p;
        }
        out
    }

    pub fn row_sum_error(&self) -> f64 {
        self.probs
            .chunks_exact(self.card)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `μ'(x) = Σ_{x'} μ(x') K(x | x')`.
    pub fn propagate(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for (from, &m) in mu.iter().enumerate() {
            for (s, &p) in self.row(from).iter().enumerate() {
                out[self.target(from, s)] += m * p;
            }
        }
        out
    }
}

/// Explicit Gibbs kernel for one site.
pub fn explicit_kernel(model: &PairwiseModel, site: usize) -> Result<KernelMatrix> {
    let size = model
        .state_space_size()
        .filter(|&n| n <= MAX_KERNEL_CONFIGS)
        .ok_or_else(|| SamplingError::TooLarge {
            configs: model
                .state_space_size()
                .map_or_else(|| "more than usize::MAX".into(), |n| n.to_string()),
            limit: MAX_KERNEL_CONFIGS,
        })?;
    if site >= model.node_count() {
        return Err(ModelError::InvalidRegion(format!("site {site} outside the model")).into());
    }
    let cond = RegionConditional::build(model, Region::Single(site))?;
    let cards = model.cardinalities();
    let card = cards[site];
    let stride: usize = cards[site + 1..].iter().product();
    let mut probs = Vec::with_capacity(size * card);
    let mut x = vec![0; cards.len()];
    for from in 0..size {
        decode(from, cards, &mut x);
        probs.extend_from_slice(cond.row(cond.boundary_index(&x)));
    }
    Ok(KernelMatrix {
        site,
        size,
        card,
        stride,
        probs,
    })
}

fn joint_for(kernel: &KernelMatrix, model: &PairwiseModel) -> Result<Vec<f64>> {
    let joint = joint_table(model)?;
    if joint.len() != kernel.size {
        return Err(SamplingError::Mismatch(format!(
            "kernel over {} configurations, model has {}",
            kernel.size,
            joint.len()
        )));
    }
    Ok(joint)
}

/// `max |K(x | x') P(x') − K(x' | x) P(x)|` over all pairs. Pairs differing
/// off the site have both terms zero, so only reachable pairs are visited.
pub fn detailed_balance_violation(kernel: &KernelMatrix, model: &PairwiseModel) -> Result<f64> {
    let p = joint_for(kernel, model)?;
    let mut worst: f64 = 0.0;
    for from in 0..kernel.size {
        for (s, &k) in kernel.row(from).iter().enumerate() {
            let to = kernel.target(from, s);
            worst = worst.max((k * p[from] - kernel.entry(to, from) * p[to]).abs());
        }
    }
    Ok(worst)
}

/// `‖Kᵀ P − P‖_∞`.
pub fn stationarity_violation(kernel: &KernelMatrix, model: &PairwiseModel) -> Result<f64> {
    let p = joint_for(kernel, model)?;
    Ok(max_abs_diff(&kernel.propagate(&p), &p))
}

/// `‖(K_{n−1} ⋯ K_0)ᵀ P − P‖_∞` for one raster sweep.
pub fn sweep_stationarity_violation(model: &PairwiseModel) -> Result<f64> {
    let p = joint_table(model)?;
    let mut mu = p.clone();
    for site in 0..model.node_count() {
        mu = explicit_kernel(model, site)?.propagate(&mu);
    }
    Ok(max_abs_diff(&mu, &p))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Deterministic Chapman–Kolmogorov step for a region: `Σ P(x_R | x'_N) μ(x'_N)`
/// with `neighborhood` laid out over `neighborhood(region)` in row-major order.
pub fn ck_marginal_step(
    model: &PairwiseModel,
    region: Region,
    neighborhood: &[f64],
) -> Result<Vec<f64>> {
    let cond = RegionConditional::build(model, region)?;
    if neighborhood.len() != cond.boundary_configs {
        return Err(SamplingError::Mismatch(format!(
            "neighborhood table has {} entries, blanket has {} configurations",
            neighborhood.len(),
            cond.boundary_configs
        )));
    }
    let total: f64 = neighborhood.iter().sum();
    if neighborhood.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(SamplingError::Mismatch("neighborhood table is not a distribution".into()));
    }
    let mut out = vec![0.0; cond.region_states];
    reduced_dlr_rhs(&cond, neighborhood, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrder {
    /// Raster order 0..n every sweep.
    #[default]
    Fixed,
    /// A fresh uniform permutation per sweep.
    RandomPermutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
    pub sweep_order: SweepOrder,
    /// Also count edge-pair frequencies.
    pub pairs: bool,
}

impl ChainConfig {
    /// Burn-in set to 10% of the sweeps.
    pub fn new(sweeps: usize, chains: usize, seed: u64) -> Self {
        Self {
            sweeps,
            burn_in: sweeps / 10,
            chains,
            seed,
            sweep_order: SweepOrder::Fixed,
            pairs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in {
            return Err(SamplingError::InvalidConfig("sweeps must exceed burn_in".into()));
        }
        if self.chains < 2 {
            return Err(SamplingError::InvalidConfig(
                "standard errors need at least two chains".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self::new(10_000, 4, 0)
    }
}

/// SplitMix64 finalizer, used to derive independent chain seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of chain `index`: `splitmix64(splitmix64(seed) ^ index)`. Mixing the
/// base seed first keeps chain sets of nearby base seeds disjoint (a bare
/// `seed ^ index` only permutes the same chains).
pub fn chain_seed(seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ index as u64)
}

/// Pooled Gibbs marginals with between-chain standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsEstimate {
    pub beliefs: BeliefSet,
    /// Per node and state: sd of the chain means / √chains.
    pub std_error: Vec<Vec<f64>>,
    pub chain_seeds: Vec<u64>,
    pub sweeps: usize,
    pub burn_in: usize,
}

struct ChainCounts {
    singles: Vec<Vec<f64>>,
    pairs: Vec<Vec<f64>>,
}

fn run_chain(model: &PairwiseModel, conds: &[RegionConditional], cfg: &ChainConfig, seed: u64) -> ChainCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cards = model.cardinalities();
    let topo = model.topology();
    let mut x: Vec<usize> = cards.iter().map(|&c| rng.gen_range(0..c)).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut singles: Vec<Vec<f64>> = cards.iter().map(|&c| vec![0.0; c]).collect();
    let mut pairs: Vec<Vec<f64>> = if cfg.pairs {
        topo.edges().iter().map(|&(a, b)| vec![0.0; cards[a] * cards[b]]).collect()
    } else {
        Vec::new()
    };
    for sweep in 0..cfg.sweeps {
        if cfg.sweep_order == SweepOrder::RandomPermutation {
            order.shuffle(&mut rng);
        }
        for &site in &order {
            let cond = &conds[site];
            let row = cond.row(cond.boundary_index(&x));
            x[site] = inverse_cdf(row, rng.gen::<f64>());
        }
        if sweep >= cfg.burn_in {
            for (i, &s) in x.iter().enumerate() {
                singles[i][s] += 1.0;
            }
            for (e, &(a, b)) in topo.edges().iter().enumerate().take(pairs.len()) {
                pairs[e][x[a] * cards[b] + x[b]] += 1.0;
            }
        }
    }
    let n = (cfg.sweeps - cfg.burn_in) as f64;
    for t in singles.iter_mut().chain(pairs.iter_mut()) {
        t.iter_mut().for_each(|v| *v /= n);
    }
    ChainCounts { singles, pairs }
}

/// Runs `cfg.chains` independent chains (in parallel by default).
pub fn gibbs_estimate(model: &PairwiseModel, cfg: &ChainConfig) -> Result<GibbsEstimate> {
    gibbs_estimate_with(model, cfg, ExecMode::default())
}

pub fn gibbs_estimate_with(
    model: &PairwiseModel,
    cfg: &ChainConfig,
    mode: ExecMode,
) -> Result<GibbsEstimate> {
    cfg.validate()?;
    let conds = (0..model.node_count())
        .map(|i| RegionConditional::build(model, Region::Single(i)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = (0..cfg.chains).map(|c| chain_seed(cfg.seed, c)).collect();
    let runs = map_range(mode, cfg.chains, |c| run_chain(model, &conds, cfg, seeds[c]));

    let k = cfg.chains as f64;
    let mean = |pick: &dyn Fn(&ChainCounts) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let first = pick(&runs[0]);
        first
            .iter()
            .enumerate()
            .map(|(t, table)| {
                (0..table.len())
                    .map(|x| runs.iter().map(|r| pick(r)[t][x]).sum::<f64>() / k)
                    .collect()
            })
            .collect()
    };
    let singles = mean(&|r| &r.singles);
    let pairs = mean(&|r| &r.pairs);
    let std_error = singles
        .iter()
        .enumerate()
        .map(|(i, table)| {
            table
                .iter()
                .enumerate()
                .map(|(x, &m)| {
                    let var = runs.iter().map(|r| (r.singles[i][x] - m).powi(2)).sum::<f64>() / (k - 1.0);
                    (var / k).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(GibbsEstimate {
        beliefs: BeliefSet {
            level: if cfg.pairs { Level::Full } else { Level::Singleton },
            singles,
            pairs,
        },
        std_error,
        chain_seeds: seeds,
        sweeps: cfg.sweeps,
        burn_in: cfg.burn_in,
    })
}

impl GibbsEstimate {
    /// Fraction of nodes whose every state lies within `k` standard errors
    /// of `exact`.
    pub fn coverage(&self, exact: &[Vec<f64>], k: f64) -> f64 {
        let hits = self
            .beliefs
            .singles
            .iter()
            .zip(&self.std_error)
            .zip(exact)
            .filter(|((b, se), p)| {
                b.iter()
                    .zip(se.iter())
                    .zip(p.iter())
                    .all(|((b, se), p)| (b - p).abs() <= k * se)
            })
            .count();
        hits as f64 / exact.len().max(1) as f64
    }
}
