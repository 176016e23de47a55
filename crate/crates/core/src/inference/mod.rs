//! The DLR hierarchy: update operators for FN, FN2, CP, MF, MF2 and BP (in
//! both message and DLR form), a fixed-point driver, and diagnostics.
//!
//! Every DLR-form update has the shape
//!
//! ```text
//! b_R^{t+1}(x_R) = Σ_{x_N(R)} P(x_R | x_N(R)) B^t(x_N(R))
//! ```
//!
//! and the algorithms differ only in which regions they keep and how the
//! neighborhood distribution `B` is assembled from the current beliefs:
//!
//! | algorithm | regions        | `B`                                    |
//! |-----------|----------------|----------------------------------------|
//! | FN        | nodes          | product of neighbor singletons         |
//! | FN2       | edges          | product of derived singletons          |
//! | CP        | edges          | Bethe embedding, edge-marginal ratios  |
//! | BP (DLR)  | nodes + edges  | Bethe embedding                        |
//!
//! MF and MF2 replace the arithmetic average by a geometric one (MF) or by
//! conditioning on the neighborhood mean (MF2, Ising only).

mod beliefs;
mod bp;
mod diagnostics;
mod kernel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PairwiseModel};

pub use beliefs::{
    derived_singles, init_beliefs, init_random_beliefs, pair_marginal, BeliefSet, Level,
    MessageSet,
};
pub use bp::{beliefs_from_messages, bp_message_step};
pub use diagnostics::{
    bethe_free_energy, dlr_residual, mf_self_consistency_residual, reparameterization_spread,
    time_average, wskl, RhsForm, WsklWeights,
};
pub use kernel::{
    bethe_embedding, factorized_neighborhood, reduced_dlr_rhs, BetheEmbedding, DlrContext,
};

use kernel::Scratch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("expected level {expected} beliefs, found {found:?}")]
    LevelMismatch {
        expected: &'static str,
        found: Level,
    },
    #[error("beliefs do not match the model's shape")]
    ShapeMismatch,
    #[error("{algorithm} requires a binary Ising model")]
    UnsupportedModel { algorithm: Algorithm },
    #[error("{algorithm} does not support the sequential schedule")]
    UnsupportedSchedule { algorithm: Algorithm },
    #[error("log of zero: P(x_{node} = {state} | boundary {boundary:?}) = 0 with positive weight")]
    LogOfZero {
        node: usize,
        state: usize,
        boundary: Vec<usize>,
    },
    #[error("beliefs are not locally consistent (max deviation {0:e})")]
    Inconsistent(f64),
    #[error("model too large: {0}")]
    UnsupportedSize(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Diagnostic(String),
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        source: Box<InferenceError>,
    },
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// Algorithms of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Fn,
    Fn2,
    Cp,
    Mf,
    Mf2,
    /// Message-form BP.
    Bp,
    /// BP as the level-2 reduced-DLR update on beliefs.
    BpDlr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Fn,
        Algorithm::Fn2,
        Algorithm::Cp,
        Algorithm::Mf,
        Algorithm::Mf2,
        Algorithm::Bp,
        Algorithm::BpDlr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fn => "fn",
            Algorithm::Fn2 => "fn2",
            Algorithm::Cp => "cp",
            Algorithm::Mf => "mf",
            Algorithm::Mf2 => "mf2",
            Algorithm::Bp => "bp",
            Algorithm::BpDlr => "bp-dlr",
        }
    }

    pub fn level(self) -> Level {
        match self {
            Algorithm::Fn | Algorithm::Mf | Algorithm::Mf2 => Level::Singleton,
            Algorithm::Fn2 | Algorithm::Cp => Level::Edge,
            Algorithm::Bp | Algorithm::BpDlr => Level::Full,
        }
    }

    /// Right-hand side whose fixed-point equation this algorithm solves.
    pub fn rhs_form(self) -> RhsForm {
        match self {
            Algorithm::Fn | Algorithm::Fn2 => RhsForm::Factorized,
            Algorithm::Cp | Algorithm::Bp | Algorithm::BpDlr => RhsForm::Bethe,
            Algorithm::Mf => RhsForm::MeanField,
            Algorithm::Mf2 => RhsForm::MeanField2,
        }
    }

    fn supports_sequential(self) -> bool {
        matches!(
            self,
            Algorithm::Fn | Algorithm::Fn2 | Algorithm::Mf | Algorithm::Mf2
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Jacobi: every region reads the previous iterate.
    #[default]
    Parallel,
    /// Gauss–Seidel in node (or edge) order.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Init {
    #[default]
    Uniform,
    Random {
        seed: u64,
    },
}

/// Region weights used for recorded WSKL traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WsklTarget {
    /// Unit weight on the regions the algorithm represents.
    #[default]
    MatchingLevel,
    /// Unit weight on singletons only.
    Singletons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub schedule: Schedule,
    /// `new = (1 − d)·step + d·old`.
    pub damping: f64,
    pub clamp_epsilon: f64,
    pub init: Init,
    /// Evaluate WSKL after every iteration.
    pub record_wskl: bool,
    #[serde(default)]
    pub wskl_weights: WsklTarget,
    /// When non-zero and the run does not converge, average the last
    /// `average_window` iterates into `RunReport::time_averaged`.
    pub average_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 1_000_000,
            schedule: Schedule::Parallel,
            damping: 0.0,
            clamp_epsilon: 1e-12,
            init: Init::Uniform,
            record_wskl: false,
            wskl_weights: WsklTarget::MatchingLevel,
            average_window: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(InferenceError::InvalidConfig("tolerance must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(InferenceError::InvalidConfig("damping must lie in [0, 1)".into()));
        }
        if self.clamp_epsilon.is_nan() || self.clamp_epsilon < 0.0 {
            return Err(InferenceError::InvalidConfig("clamp_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Convergence record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
    /// Max-abs change of represented tables, one entry per iteration.
    pub residual_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wskl_trace: Option<Vec<f64>>,
    /// Max minus min residual over the last 100 iterations; 0 when converged.
    pub oscillation_amplitude: f64,
    pub clamp_events: usize,
    pub damping: f64,
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_averaged: Option<BeliefSet>,
}

impl RunReport {
    /// Copy with traces keeping every `k`-th iteration (and the last).
    pub fn thinned(&self, k: usize) -> RunReport {
        let k = k.max(1);
        let thin = |t: &Vec<f64>| -> Vec<f64> {
            let mut out: Vec<f64> = t.iter().step_by(k).copied().collect();
            if !t.is_empty() && !(t.len() - 1).is_multiple_of(k) {
                out.push(*t.last().unwrap());
            }
            out
        };
        RunReport {
            residual_trace: thin(&self.residual_trace),
            wskl_trace: self.wskl_trace.as_ref().map(thin),
            ..self.clone()
        }
    }
}

fn check_shape(model: &PairwiseModel, beliefs: &BeliefSet, level: Level) -> Result<()> {
    if beliefs.level != level {
        return Err(InferenceError::LevelMismatch {
            expected: match level {
                Level::Singleton => "1",
                Level::Edge => "1.5",
                Level::Full => "2",
            },
            found: beliefs.level,
        });
    }
    if !beliefs.topology_matches(model.topology()) {
        return Err(InferenceError::ShapeMismatch);
    }
    Ok(())
}

fn require_ising(model: &PairwiseModel, algorithm: Algorithm) -> Result<()> {
    if model.ising().is_none() {
        return Err(InferenceError::UnsupportedModel { algorithm });
    }
    Ok(())
}

#[inline]
fn sigmoid_pair(h: f64) -> [f64; 2] {
    // (P(0), P(1)) for log-odds h
    if h >= 0.0 {
        let e = (-h).exp();
        [e / (1.0 + e), 1.0 / (1.0 + e)]
    } else {
        let e = h.exp();
        [1.0 / (1.0 + e), e / (1.0 + e)]
    }
}

#[inline]
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'m> DlrContext<'m> {
    /// Closed-form Ising MF: `b_i(1) = σ(ϕ_i + Σ_j θ_ij b_j(1))`.
    pub(crate) fn mf_ising_update(&self, node: usize, singles: &[Vec<f64>]) -> [f64; 2] {
        let p = self.model().ising().expect("ising model");
        let h = p.phi[node]
            + p.topology
                .incident(node)
                .iter()
                .map(|&(j, e)| p.theta[e] * singles[j][1])
                .sum::<f64>();
        sigmoid_pair(h)
    }

    /// Second-order MF for Ising models: average over incident edges `(i, k)`
    /// of `P(x_i = 1)` under the edge conditional given the mean states of the
    /// edge's blanket.
    pub(crate) fn mf2_update(&self, node: usize, singles: &[Vec<f64>]) -> [f64; 2] {
        let p = self.model().ising().expect("ising model");
        let topo = &p.topology;
        let inc = topo.incident(node);
        if inc.is_empty() {
            return sigmoid_pair(p.phi[node]);
        }
        let field = |u: usize, other: usize| -> f64 {
            p.phi[u]
                + topo
                    .incident(u)
                    .iter()
                    .filter(|&&(j, _)| j != other)
                    .map(|&(j, e)| p.theta[e] * singles[j][1])
                    .sum::<f64>()
        };
        let mut acc = 0.0;
        for &(k, e) in inc {
            let fi = field(node, k);
            let fk = field(k, node);
            let w = [0.0, fk, fi, fi + fk + p.theta[e]];
            acc += (log_sum_exp(&w[2..]) - log_sum_exp(&w)).exp();
        }
        let b1 = acc / inc.len() as f64;
        [1.0 - b1, b1]
    }

    /// One parallel step of `algorithm` from `cur` into `out` (same shape).
    /// Returns the number of clamp events.
    pub(crate) fn step_into(
        &self,
        algorithm: Algorithm,
        cur: &BeliefSet,
        out: &mut BeliefSet,
        clamp: f64,
        scratch: &mut Scratch,
    ) -> Result<usize> {
        let model = self.model();
        let mut clamps = 0;
        match algorithm {
            Algorithm::Fn => {
                for i in 0..model.node_count() {
                    self.factorized_update(self.single(i), &cur.singles, scratch, &mut out.singles[i]);
                }
            }
            Algorithm::Mf => {
                if model.ising().is_some() {
                    for i in 0..model.node_count() {
                        out.singles[i].copy_from_slice(&self.mf_ising_update(i, &cur.singles));
                    }
                } else {
                    for i in 0..model.node_count() {
                        self.mean_field_update(i, &cur.singles, scratch, &mut out.singles[i])?;
                    }
                }
            }
            Algorithm::Mf2 => {
                require_ising(model, algorithm)?;
                for i in 0..model.node_count() {
                    out.singles[i].copy_from_slice(&self.mf2_update(i, &cur.singles));
                }
            }
            Algorithm::Fn2 => {
                let pairs = self.pairs()?;
                for (e, cond) in pairs.iter().enumerate() {
                    self.factorized_update(cond, &cur.singles, scratch, &mut out.pairs[e]);
                }
                out.refresh_derived(model);
            }
            Algorithm::Cp => {
                let pairs = self.pairs()?;
                for (e, cond) in pairs.iter().enumerate() {
                    clamps += self.bethe_update(cond, cur, clamp, scratch, &mut out.pairs[e])?;
                }
                out.refresh_derived(model);
            }
            Algorithm::BpDlr => {
                for i in 0..model.node_count() {
                    clamps += self.bethe_update(self.single(i), cur, clamp, scratch, &mut out.singles[i])?;
                }
                let pairs = self.pairs()?;
                for (e, cond) in pairs.iter().enumerate() {
                    clamps += self.bethe_update(cond, cur, clamp, scratch, &mut out.pairs[e])?;
                }
            }
            Algorithm::Bp => {
                return Err(InferenceError::InvalidConfig(
                    "message-form BP steps messages; use bp_message_step".into(),
                ))
            }
        }
        Ok(clamps)
    }

    /// One Gauss–Seidel sweep in place.
    pub(crate) fn sequential_step(
        &self,
        algorithm: Algorithm,
        beliefs: &mut BeliefSet,
        scratch: &mut Scratch,
    ) -> Result<()> {
        let model = self.model();
        match algorithm {
            Algorithm::Fn | Algorithm::Mf | Algorithm::Mf2 => {
                if algorithm == Algorithm::Mf2 {
                    require_ising(model, algorithm)?;
                }
                let mut tmp = Vec::new();
                for i in 0..model.node_count() {
                    tmp.resize(model.cardinality(i), 0.0);
                    match algorithm {
                        Algorithm::Fn => {
                            self.factorized_update(self.single(i), &beliefs.singles, scratch, &mut tmp)
                        }
                        Algorithm::Mf if model.ising().is_some() => {
                            tmp.copy_from_slice(&self.mf_ising_update(i, &beliefs.singles))
                        }
                        Algorithm::Mf => {
                            self.mean_field_update(i, &beliefs.singles, scratch, &mut tmp)?
                        }
                        _ => tmp.copy_from_slice(&self.mf2_update(i, &beliefs.singles)),
                    }
                    beliefs.singles[i].copy_from_slice(&tmp);
                }
            }
            Algorithm::Fn2 => {
                let pairs = self.pairs()?;
                let mut tmp = Vec::new();
                for (e, cond) in pairs.iter().enumerate() {
                    tmp.resize(cond.region_states, 0.0);
                    self.factorized_update(cond, &beliefs.singles, scratch, &mut tmp);
                    beliefs.pairs[e].copy_from_slice(&tmp);
                    let (a, b) = model.topology().edges()[e];
                    for node in [a, b] {
                        beliefs.singles[node] = beliefs::derived_single(model, &beliefs.pairs, node);
                    }
                }
            }
            other => return Err(InferenceError::UnsupportedSchedule { algorithm: other }),
        }
        Ok(())
    }
}

fn single_step(
    algorithm: Algorithm,
    model: &PairwiseModel,
    beliefs: &BeliefSet,
    level: Level,
) -> Result<BeliefSet> {
    check_shape(model, beliefs, level)?;
    let ctx = DlrContext::new(model)?;
    let mut out = beliefs.clone();
    ctx.step_into(algorithm, beliefs, &mut out, RunConfig::default().clamp_epsilon, &mut Scratch::new())?;
    Ok(out)
}

/// Factorized-neighbors update on level-1 beliefs.
pub fn fn_step(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    single_step(Algorithm::Fn, model, beliefs, Level::Singleton)
}

/// Second-order factorized-neighbors update on level-1.5 beliefs.
pub fn fn2_step(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    single_step(Algorithm::Fn2, model, beliefs, Level::Edge)
}

/// CP update on level-1.5 beliefs.
pub fn cp_step(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    single_step(Algorithm::Cp, model, beliefs, Level::Edge)
}

/// Level-2 reduced-DLR update with Bethe neighborhoods (parallel BP on beliefs).
pub fn bp_dlr_step(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    single_step(Algorithm::BpDlr, model, beliefs, Level::Full)
}

/// Mean-field update. Ising models use the closed form.
pub fn mf_step(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    single_step(Algorithm::Mf, model, beliefs, Level::Singleton)
}

/// Mean-field update through the generic geometric-mean path, even for Ising
/// models.
pub fn mf_step_generic(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    check_shape(model, beliefs, Level::Singleton)?;
    let ctx = DlrContext::new(model)?;
    let mut out = beliefs.clone();
    let mut scratch = Scratch::new();
    for i in 0..model.node_count() {
        ctx.mean_field_update(i, &beliefs.singles, &mut scratch, &mut out.singles[i])?;
    }
    Ok(out)
}

/// Second-order mean-field update (binary Ising models only).
pub fn mf2_step(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<BeliefSet> {
    single_step(Algorithm::Mf2, model, beliefs, Level::Singleton)
}

fn damp_tables(new: &mut [Vec<f64>], old: &[Vec<f64>], d: f64) {
    for (n, o) in new.iter_mut().zip(old) {
        for (x, y) in n.iter_mut().zip(o) {
            *x = (1.0 - d) * *x + d * y;
        }
        let s: f64 = n.iter().sum();
        n.iter_mut().for_each(|x| *x /= s);
    }
}

enum State {
    Beliefs(BeliefSet),
    Messages(MessageSet, BeliefSet),
}

impl State {
    fn beliefs(&self) -> &BeliefSet {
        match self {
            State::Beliefs(b) | State::Messages(_, b) => b,
        }
    }

    fn into_beliefs(self) -> BeliefSet {
        match self {
            State::Beliefs(b) | State::Messages(_, b) => b,
        }
    }
}

/// Iterates `algorithm` from the configured initialization until the max-abs
/// change of the represented tables drops below the tolerance or the
/// iteration cap is hit. The last iterate is returned either way.
pub fn run_to_convergence(
    algorithm: Algorithm,
    model: &PairwiseModel,
    config: &RunConfig,
) -> Result<(BeliefSet, RunReport)> {
    let state = match (algorithm, config.init) {
        (Algorithm::Bp, Init::Uniform) => {
            let m = MessageSet::uniform(model);
            let b = beliefs_from_messages(model, &m);
            State::Messages(m, b)
        }
        (Algorithm::Bp, Init::Random { seed }) => {
            let m = MessageSet::random(model, seed);
            let b = beliefs_from_messages(model, &m);
            State::Messages(m, b)
        }
        (_, Init::Uniform) => State::Beliefs(init_beliefs(model, algorithm.level())),
        (_, Init::Random { seed }) => {
            State::Beliefs(init_random_beliefs(model, algorithm.level(), seed))
        }
    };
    drive(algorithm, model, config, state)
}

/// As [`run_to_convergence`], starting from the given beliefs.
pub fn run_from_beliefs(
    algorithm: Algorithm,
    model: &PairwiseModel,
    config: &RunConfig,
    beliefs: BeliefSet,
) -> Result<(BeliefSet, RunReport)> {
    if algorithm == Algorithm::Bp {
        return Err(InferenceError::InvalidConfig(
            "message-form BP starts from messages; use run_from_messages".into(),
        ));
    }
    check_shape(model, &beliefs, algorithm.level())?;
    drive(algorithm, model, config, State::Beliefs(beliefs))
}

/// Message-form BP from the given messages.
pub fn run_from_messages(
    model: &PairwiseModel,
    config: &RunConfig,
    messages: MessageSet,
) -> Result<(BeliefSet, RunReport, MessageSet)> {
    let b = beliefs_from_messages(model, &messages);
    let mut final_messages = None;
    let (beliefs, report) = drive_inner(
        Algorithm::Bp,
        model,
        config,
        State::Messages(messages, b),
        &mut final_messages,
    )?;
    Ok((beliefs, report, final_messages.expect("message state")))
}

fn drive(
    algorithm: Algorithm,
    model: &PairwiseModel,
    config: &RunConfig,
    state: State,
) -> Result<(BeliefSet, RunReport)> {
    drive_inner(algorithm, model, config, state, &mut None)
}

fn drive_inner(
    algorithm: Algorithm,
    model: &PairwiseModel,
    config: &RunConfig,
    mut state: State,
    final_messages: &mut Option<MessageSet>,
) -> Result<(BeliefSet, RunReport)> {
    config.validate()?;
    if matches!(algorithm, Algorithm::Mf2) {
        require_ising(model, algorithm)?;
    }
    if config.schedule == Schedule::Sequential && !algorithm.supports_sequential() {
        return Err(InferenceError::UnsupportedSchedule { algorithm });
    }
    let ctx = DlrContext::new(model)?;
    let mut scratch = Scratch::new();
    let weights = match config.wskl_weights {
        WsklTarget::MatchingLevel => WsklWeights::for_level(model, algorithm.level()),
        WsklTarget::Singletons => WsklWeights::singletons(model),
    };
    let form = algorithm.rhs_form();

    let mut next = match &state {
        State::Beliefs(b) => State::Beliefs(b.clone()),
        State::Messages(m, b) => State::Messages(m.clone(), b.clone()),
    };
    let mut residual_trace = Vec::new();
    let mut wskl_trace = config.record_wskl.then(Vec::new);
    let mut clamp_events = 0;
    let mut converged = false;
    let mut window: Vec<BeliefSet> = Vec::new();
    let window_start = config.max_iterations.saturating_sub(config.average_window);
    let at = |iteration: usize| {
        move |e: InferenceError| InferenceError::AtIteration {
            iteration,
            source: Box::new(e),
        }
    };

    for iteration in 1..=config.max_iterations {
        match (&state, &mut next) {
            (State::Messages(m, _), State::Messages(nm, nb)) => {
                bp::message_step_into(model, m, nm);
                if config.damping > 0.0 {
                    damp_tables(&mut nm.messages, &m.messages, config.damping);
                }
                bp::beliefs_into(model, nm, nb);
            }
            (State::Beliefs(b), State::Beliefs(nb)) => {
                if config.schedule == Schedule::Sequential {
                    nb.clone_from(b);
                    ctx.sequential_step(algorithm, nb, &mut scratch).map_err(at(iteration))?;
                } else {
                    clamp_events += ctx
                        .step_into(algorithm, b, nb, config.clamp_epsilon, &mut scratch)
                        .map_err(at(iteration))?;
                }
                if config.damping > 0.0 {
                    if nb.level == Level::Edge {
                        damp_tables(&mut nb.pairs, &b.pairs, config.damping);
                        nb.refresh_derived(model);
                    } else {
                        damp_tables(&mut nb.singles, &b.singles, config.damping);
                        damp_tables(&mut nb.pairs, &b.pairs, config.damping);
                    }
                }
            }
            _ => unreachable!("state kinds never change"),
        }
        let residual = next.beliefs().max_abs_diff(state.beliefs());
        std::mem::swap(&mut state, &mut next);
        residual_trace.push(residual);
        if let Some(trace) = wskl_trace.as_mut() {
            let value = diagnostics::wskl_with(&ctx, state.beliefs(), &weights, form, config.clamp_epsilon)
                .map_err(at(iteration))?;
            trace.push(value);
        }
        if config.average_window > 0 && iteration > window_start {
            window.push(state.beliefs().clone());
        }
        if residual < config.tolerance {
            converged = true;
            break;
        }
    }

    let iterations = residual_trace.len();
    let final_residual = residual_trace.last().copied().unwrap_or(0.0);
    let oscillation_amplitude = if converged {
        0.0
    } else {
        let tail = &residual_trace[iterations.saturating_sub(100)..];
        let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
        if tail.is_empty() {
            0.0
        } else {
            max - min
        }
    };
    let time_averaged = (!converged && !window.is_empty()).then(|| time_average(&window));
    let report = RunReport {
        algorithm,
        iterations,
        converged,
        final_residual,
        residual_trace,
        wskl_trace,
        oscillation_amplitude,
        clamp_events,
        damping: config.damping,
        schedule: config.schedule,
        time_averaged,
    };
    if let State::Messages(m, _) = &state {
        *final_messages = Some(m.clone());
    }
    Ok((state.into_beliefs(), report))
}

