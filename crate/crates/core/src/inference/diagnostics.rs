//! Fixed-point diagnostics: reduced-DLR residual, weighted KL objective,
//! Bethe free energy and the reparameterization check.

use serde::{Deserialize, Serialize};

use crate::model::{decode, PairwiseModel};

use super::beliefs::{BeliefSet, Level};
use super::kernel::{DlrContext, Scratch};
use super::{Algorithm, InferenceError, Result};

/// How the right-hand side of a region's fixed-point equation is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhsForm {
    /// Product of singleton beliefs over the blanket (FN at level 1, FN2 at 1.5).
    Factorized,
    /// Bethe embedding (CP at level 1.5, BP at level 2).
    Bethe,
    /// Geometric-mean MF target (level 1).
    MeanField,
    /// Second-order MF target (level 1, Ising).
    MeanField2,
}

fn matching_algorithm(form: RhsForm, level: Level) -> Result<Algorithm> {
    Ok(match (form, level) {
        (RhsForm::Factorized, Level::Singleton) => Algorithm::Fn,
        (RhsForm::Factorized, Level::Edge) => Algorithm::Fn2,
        (RhsForm::Bethe, Level::Edge) => Algorithm::Cp,
        (RhsForm::Bethe, Level::Full) => Algorithm::BpDlr,
        (RhsForm::MeanField, Level::Singleton) => Algorithm::Mf,
        (RhsForm::MeanField2, Level::Singleton) => Algorithm::Mf2,
        (form, level) => {
            return Err(InferenceError::Diagnostic(format!(
                "no {form:?} right-hand side at level {level:?}"
            )))
        }
    })
}

/// Right-hand sides of every represented region; at level 1.5 the singleton
/// entries are derived from the edge targets.
fn targets(
    ctx: &DlrContext<'_>,
    beliefs: &BeliefSet,
    form: RhsForm,
    clamp: f64,
    scratch: &mut Scratch,
) -> Result<BeliefSet> {
    let algorithm = matching_algorithm(form, beliefs.level)?;
    if !beliefs.topology_matches(ctx.model().topology()) {
        return Err(InferenceError::ShapeMismatch);
    }
    let mut out = beliefs.clone();
    ctx.step_into(algorithm, beliefs, &mut out, clamp, scratch)?;
    Ok(out)
}

/// Max over represented regions and states of `|b_R − Σ P(x_R|x_N) B(x_N)|`.
pub fn dlr_residual(model: &PairwiseModel, beliefs: &BeliefSet, form: RhsForm) -> Result<f64> {
    let ctx = DlrContext::new(model)?;
    let t = targets(&ctx, beliefs, form, 1e-12, &mut Scratch::new())?;
    Ok(beliefs.max_abs_diff(&t))
}

/// Residual of the MF fixed-point condition `b = MF(b)`.
pub fn mf_self_consistency_residual(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<f64> {
    dlr_residual(model, beliefs, RhsForm::MeanField)
}

/// Region weights `α_R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsklWeights {
    pub alpha_singleton: Vec<f64>,
    pub alpha_pair: Vec<f64>,
}

impl WsklWeights {
    /// `α = 1` on singletons, 0 on edges.
    pub fn singletons(model: &PairwiseModel) -> Self {
        Self {
            alpha_singleton: vec![1.0; model.node_count()],
            alpha_pair: vec![0.0; model.topology().edge_count()],
        }
    }

    /// Unit weights on exactly the regions a level represents.
    pub fn for_level(model: &PairwiseModel, level: Level) -> Self {
        let (s, p) = match level {
            Level::Singleton => (1.0, 0.0),
            Level::Edge => (0.0, 1.0),
            Level::Full => (1.0, 1.0),
        };
        Self {
            alpha_singleton: vec![s; model.node_count()],
            alpha_pair: vec![p; model.topology().edge_count()],
        }
    }
}

fn kl(b: &[f64], t: &[f64], clamp: f64) -> Result<f64> {
    let mut total = 0.0;
    for (&p, &q) in b.iter().zip(t) {
        if p <= 0.0 {
            continue;
        }
        let q = q.max(clamp);
        if q <= 0.0 {
            return Err(InferenceError::Diagnostic(
                "zero right-hand side under positive belief".into(),
            ));
        }
        total += p * (p / q).ln();
    }
    Ok(total)
}

/// `Σ_R α_R Σ_x b_R(x) log(b_R(x) / rhs_R(x))`.
pub fn wskl(
    model: &PairwiseModel,
    beliefs: &BeliefSet,
    weights: &WsklWeights,
    form: RhsForm,
) -> Result<f64> {
    let ctx = DlrContext::new(model)?;
    wskl_with(&ctx, beliefs, weights, form, 1e-12)
}

pub(crate) fn wskl_with(
    ctx: &DlrContext<'_>,
    beliefs: &BeliefSet,
    weights: &WsklWeights,
    form: RhsForm,
    clamp: f64,
) -> Result<f64> {
    let model = ctx.model();
    if weights.alpha_singleton.len() != model.node_count()
        || weights.alpha_pair.len() != model.topology().edge_count()
    {
        return Err(InferenceError::Diagnostic("weight vector lengths do not match the model".into()));
    }
    if weights
        .alpha_singleton
        .iter()
        .chain(&weights.alpha_pair)
        .any(|a| !a.is_finite())
    {
        return Err(InferenceError::Diagnostic("non-finite weight".into()));
    }
    if !beliefs.level.has_pairs() && weights.alpha_pair.iter().any(|&a| a != 0.0) {
        return Err(InferenceError::Diagnostic(
            "edge weights given for level-1 beliefs".into(),
        ));
    }
    let t = targets(ctx, beliefs, form, clamp, &mut Scratch::new())?;
    let mut total = 0.0;
    for (i, &a) in weights.alpha_singleton.iter().enumerate() {
        if a != 0.0 {
            total += a * kl(&beliefs.singles[i], &t.singles[i], clamp)?;
        }
    }
    for (e, &a) in weights.alpha_pair.iter().enumerate() {
        if a != 0.0 {
            total += a * kl(&beliefs.pairs[e], &t.pairs[e], clamp)?;
        }
    }
    Ok(total)
}

fn plogq(p: f64, log_ratio: f64) -> f64 {
    if p > 0.0 {
        p * log_ratio
    } else {
        0.0
    }
}

/// `Σ_ij Σ b_ij log(b_ij / Ψ_iΨ_jΨ_ij) − Σ_i (n_i − 1) Σ b_i log(b_i / Ψ_i)` on
/// locally consistent level-2 beliefs.
pub fn bethe_free_energy(model: &PairwiseModel, beliefs: &BeliefSet) -> Result<f64> {
    if beliefs.level != Level::Full {
        return Err(InferenceError::LevelMismatch {
            expected: "2",
            found: beliefs.level,
        });
    }
    if !beliefs.topology_matches(model.topology()) {
        return Err(InferenceError::ShapeMismatch);
    }
    let dev = beliefs.consistency_error(model);
    if dev > 1e-6 {
        return Err(InferenceError::Inconsistent(dev));
    }
    let topo = model.topology();
    let mut f = 0.0;
    for (e, &(a, b)) in topo.edges().iter().enumerate() {
        let cb = model.cardinality(b);
        for (idx, &p) in beliefs.pairs[e].iter().enumerate() {
            let (xa, xb) = (idx / cb, idx % cb);
            let log_psi =
                model.log_unary(a)[xa] + model.log_unary(b)[xb] + model.log_pairwise(e)[idx];
            f += plogq(p, p.ln() - log_psi);
        }
    }
    for i in 0..model.node_count() {
        let n = topo.degree(i) as f64;
        let mut s = 0.0;
        for (x, &p) in beliefs.singles[i].iter().enumerate() {
            s += plogq(p, p.ln() - model.log_unary(i)[x]);
        }
        f -= (n - 1.0) * s;
    }
    Ok(f)
}

/// Largest node count for [`reparameterization_spread`].
pub const MAX_REPARAMETERIZATION_NODES: usize = 14;

/// `max/min − 1` over configurations of
/// `[Π b_ij / Π b_i^{n_i − 1}] / P(x)`; zero exactly when the beliefs
/// reparameterize the joint.
pub fn reparameterization_spread(
    model: &PairwiseModel,
    beliefs: &BeliefSet,
    clamp: f64,
) -> Result<f64> {
    if beliefs.level != Level::Full {
        return Err(InferenceError::LevelMismatch {
            expected: "2",
            found: beliefs.level,
        });
    }
    if model.node_count() > MAX_REPARAMETERIZATION_NODES {
        return Err(InferenceError::UnsupportedSize(format!(
            "{} nodes (limit {MAX_REPARAMETERIZATION_NODES})",
            model.node_count()
        )));
    }
    let total = model
        .state_space_size()
        .filter(|&n| n <= 1 << 22)
        .ok_or_else(|| InferenceError::UnsupportedSize("state space too large".into()))?;
    let topo = model.topology();
    let cards = model.cardinalities();
    let log_b = |v: f64| v.max(clamp).ln();
    let mut x = vec![0usize; cards.len()];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for idx in 0..total {
        decode(idx, cards, &mut x);
        let lw = model.log_weight_unchecked(&x);
        if lw == f64::NEG_INFINITY {
            continue;
        }
        let mut r = -lw;
        for (e, &(a, b)) in topo.edges().iter().enumerate() {
            r += log_b(beliefs.pairs[e][x[a] * cards[b] + x[b]]);
        }
        for (i, &xi) in x.iter().enumerate() {
            r -= (topo.degree(i) as f64 - 1.0) * log_b(beliefs.singles[i][xi]);
        }
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok((hi - lo).exp() - 1.0)
}

/// Entrywise mean of a window of iterates (tables renormalized).
pub fn time_average(window: &[BeliefSet]) -> BeliefSet {
    let mut out = window[0].clone();
    let n = window.len() as f64;
    let avg = |pick: &dyn Fn(&BeliefSet) -> &Vec<Vec<f64>>, dst: &mut Vec<Vec<f64>>| {
        for (t, table) in dst.iter_mut().enumerate() {
            for (x, v) in table.iter_mut().enumerate() {
                *v = window.iter().map(|b| pick(b)[t][x]).sum::<f64>() / n;
            }
            let s: f64 = table.iter().sum();
            table.iter_mut().for_each(|v| *v /= s);
        }
    };
    avg(&|b| &b.singles, &mut out.singles);
    avg(&|b| &b.pairs, &mut out.pairs);
    out
}
