//! Critical temperatures of the homogeneous 2D Ising model (±1 spins,
//! `J = 1`, degree 4) under each approximation.
//!
//! With all beliefs equal, each update collapses to a low-dimensional map on
//! the magnetization `m` (plus a cavity field for BP, or a pair table for the
//! edge-level methods). The critical temperature is the `t` above which the
//! map started from a biased state relaxes to `m = 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_ordered, ExecMode};
use crate::inference::Algorithm;
use crate::model::{IsingParams, Topology};

/// Exact critical temperature of the square-lattice Ising model (reference only).
pub const ONSAGER_TC: f64 = 2.269_185_314_213_022;

const DEGREE: usize = 4;

#[derive(Debug, Error)]
pub enum PhaseError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("{algorithm} has no homogeneous map")]
    Unsupported { algorithm: Algorithm },
    #[error("{algorithm} at t = {t}: fixed-point iteration did not settle; m oscillates in [{low}, {high}]")]
    NonConvergent {
        algorithm: Algorithm,
        t: f64,
        low: f64,
        high: f64,
    },
    #[error("{algorithm}: bracket [{t_low}, {t_high}] does not straddle the transition (m = {m_low} at t_low, {m_high} at t_high)")]
    BadBracket {
        algorithm: Algorithm,
        t_low: f64,
        t_high: f64,
        m_low: f64,
        m_high: f64,
    },
    #[error("writing {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, PhaseError>;

/// Extra state carried by the non-scalar maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Aux {
    None,
    /// BP cavity field `h`: the field on a node from three of its neighbors.
    Cavity(f64),
    /// Pair table over `(s_i, s_j)`, index `2a + b` with `0 ↔ −1`, `1 ↔ +1`.
    Pair([f64; 4]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousState {
    pub algorithm: Algorithm,
    pub m: f64,
    pub aux: Aux,
}

fn spin(bit: usize) -> f64 {
    if bit == 1 {
        1.0
    } else {
        -1.0
    }
}

fn product_pair(m: f64) -> [f64; 4] {
    let p = [(1.0 - m) / 2.0, (1.0 + m) / 2.0];
    [p[0] * p[0], p[0] * p[1], p[1] * p[0], p[1] * p[1]]
}

/// Magnetization of a pair table: mean of its two marginal magnetizations.
fn pair_m(p: &[f64; 4]) -> f64 {
    let mi = p[2] + p[3] - p[0] - p[1];
    let mj = p[1] + p[3] - p[0] - p[2];
    (mi + mj) / 2.0
}

impl HomogeneousState {
    /// State with magnetization `m`; auxiliary tables are the matching
    /// product (or the cavity field `atanh m`).
    pub fn new(algorithm: Algorithm, m: f64) -> Result<Self> {
        let aux = match algorithm {
            Algorithm::Mf | Algorithm::Fn | Algorithm::Mf2 => Aux::None,
            Algorithm::Bp => Aux::Cavity(m.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh()),
            Algorithm::Fn2 | Algorithm::Cp => Aux::Pair(product_pair(m)),
            Algorithm::BpDlr => return Err(PhaseError::Unsupported { algorithm }),
        };
        Ok(Self { algorithm, m, aux })
    }

    fn distance(&self, other: &Self) -> f64 {
        let aux = match (self.aux, other.aux) {
            (Aux::Cavity(a), Aux::Cavity(b)) => (a - b).abs(),
            (Aux::Pair(a), Aux::Pair(b)) => a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
            _ => 0.0,
        };
        (self.m - other.m).abs().max(aux)
    }
}

/// `Σ_{s ∈ {±1}^n} Π_k (1 + m s_k)/2 · f(s)` over `n` independent spins.
fn product_expectation(n: usize, m: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut s = vec![0.0; n];
    let mut total = 0.0;
    for mask in 0..1usize << n {
        let mut w = 1.0;
        for (k, v) in s.iter_mut().enumerate() {
            *v = spin((mask >> k) & 1);
            w *= (1.0 + m * *v) / 2.0;
        }
        total += w * f(&s);
    }
    total
}

/// `P(s_i, s_j | fields)` for one edge with coupling `k` and external fields
/// `hi`, `hj` on its endpoints.
fn pair_conditional(k: f64, hi: f64, hj: f64) -> [f64; 4] {
    let mut w = [0.0; 4];
    for (idx, slot) in w.iter_mut().enumerate() {
        let (a, b) = (spin(idx >> 1), spin(idx & 1));
        *slot = k * a * b + hi * a + hj * b;
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    w.map(|v| v / total)
}

fn normalized(p: [f64; 4]) -> [f64; 4] {
    let s: f64 = p.iter().sum();
    p.map(|v| v / s)
}

/// One application of `algorithm`'s update on the homogeneous grid at
/// temperature `t`.
pub fn homogeneous_step(algorithm: Algorithm, t: f64, state: &HomogeneousState) -> Result<HomogeneousState> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(PhaseError::InvalidTemperature(t));
    }
    let k = 1.0 / t;
    let m = state.m;
    let side = DEGREE - 1;
    let next = match (algorithm, state.aux) {
        (Algorithm::Mf, _) => HomogeneousState {
            algorithm,
            m: (DEGREE as f64 * k * m).tanh(),
            aux: Aux::None,
        },
        (Algorithm::Fn, _) => HomogeneousState {
            algorithm,
            m: product_expectation(DEGREE, m, |s| (k * s.iter().sum::<f64>()).tanh()),
            aux: Aux::None,
        },
        (Algorithm::Mf2, _) => {
            // edge conditional with mean fields from the three other neighbors
            let h = side as f64 * k * m;
            let p = pair_conditional(k, h, h);
            HomogeneousState {
                algorithm,
                m: pair_m(&p),
                aux: Aux::None,
            }
        }
        (Algorithm::Bp, Aux::Cavity(h)) => {
            let u = (k.tanh() * h.tanh()).atanh();
            let h_next = side as f64 * u;
            let u_next = (k.tanh() * h_next.tanh()).atanh();
            HomogeneousState {
                algorithm,
                m: (DEGREE as f64 * u_next).tanh(),
                aux: Aux::Cavity(h_next),
            }
        }
        (Algorithm::Fn2, Aux::Pair(p)) => {
            let table = normalized(fn2_pair_update(k, pair_m(&p)));
            HomogeneousState {
                algorithm,
                m: pair_m(&table),
                aux: Aux::Pair(table),
            }
        }
        (Algorithm::Cp, Aux::Pair(p)) => {
            let table = normalized(cp_pair_update(k, &p));
            HomogeneousState {
                algorithm,
                m: pair_m(&table),
                aux: Aux::Pair(table),
            }
        }
        (Algorithm::BpDlr, _) => return Err(PhaseError::Unsupported { algorithm }),
        _ => {
            let fresh = HomogeneousState::new(algorithm, m)?;
            return homogeneous_step(algorithm, t, &fresh);
        }
    };
    Ok(next)
}

/// FN2 on a homogeneous edge: the pair conditional averaged over a blanket
/// of six independent spins with magnetization `m`.
fn fn2_pair_update(k: f64, m: f64) -> [f64; 4] {
    let side = DEGREE - 1;
    let mut table = [0.0; 4];
    let mut s = vec![0.0; 2 * side];
    for mask in 0..1usize << (2 * side) {
        let mut w = 1.0;
        for (q, v) in s.iter_mut().enumerate() {
            *v = spin((mask >> q) & 1);
            w *= (1.0 + m * *v) / 2.0;
        }
        let (si, sj): (f64, f64) = (s[..side].iter().sum(), s[side..].iter().sum());
        let cond = pair_conditional(k, k * si, k * sj);
        for x in 0..4 {
            table[x] += w * cond[x];
        }
    }
    table
}

/// CP on a homogeneous edge: Bethe embedding of the 6-node blanket from the
/// pair table, then the pair conditional averaged over it.
fn cp_pair_update(k: f64, p: &[f64; 4]) -> [f64; 4] {
    let side = DEGREE - 1;
    // marginal of the first coordinate, used as the Bethe denominator
    let b = [p[0] + p[1], p[2] + p[3]];
    let bit = |v: f64| usize::from(v > 0.0);
    let mut table = [0.0; 4];
    let mut s = vec![0.0; 2 * side];
    for mask in 0..1usize << (2 * side) {
        for (q, v) in s.iter_mut().enumerate() {
            *v = spin((mask >> q) & 1);
        }
        let mut blanket = 0.0;
        for ab in 0..4 {
            let (a, c) = (ab >> 1, ab & 1);
            let mut w = p[ab];
            for &v in &s[..side] {
                w *= p[2 * a + bit(v)] / b[a];
            }
            for &v in &s[side..] {
                w *= p[2 * c + bit(v)] / b[c];
            }
            blanket += w;
        }
        let (si, sj): (f64, f64) = (s[..side].iter().sum(), s[side..].iter().sum());
        let cond = pair_conditional(k, k * si, k * sj);
        for x in 0..4 {
            table[x] += blanket * cond[x];
        }
    }
    table
}

/// Search settings for [`critical_temperature`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSearchConfig {
    pub t_low: f64,
    pub t_high: f64,
    pub t_tolerance: f64,
    pub m_threshold: f64,
    pub init_m: f64,
    pub max_fp_iterations: usize,
}

impl Default for CriticalSearchConfig {
    fn default() -> Self {
        Self {
            t_low: 1.5,
            t_high: 5.0,
            t_tolerance: 1e-3,
            m_threshold: 1e-4,
            init_m: 0.9,
            max_fp_iterations: 100_000,
        }
    }
}

impl CriticalSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_low > 0.0
            && self.t_low < self.t_high
            && self.t_high.is_finite()
            && self.t_tolerance > 0.0
            && self.m_threshold > 0.0
            && self.init_m.abs() <= 1.0
            && self.init_m != 0.0
            && self.max_fp_iterations > 0;
        if ok {
            Ok(())
        } else {
            Err(PhaseError::InvalidConfig(format!("{self:?}")))
        }
    }
}

const FP_TOLERANCE: f64 = 1e-10;

struct Relaxed {
    m: f64,
    converged: bool,
    band: (f64, f64),
}

fn relax(algorithm: Algorithm, t: f64, cfg: &CriticalSearchConfig) -> Result<Relaxed> {
    let mut state = HomogeneousState::new(algorithm, cfg.init_m)?;
    let mut tail = std::collections::VecDeque::with_capacity(100);
    for _ in 0..cfg.max_fp_iterations {
        let next = homogeneous_step(algorithm, t, &state)?;
        let delta = next.distance(&state);
        state = next;
        if tail.len() == 100 {
            tail.pop_front();
        }
        tail.push_back(state.m);
        if delta < FP_TOLERANCE {
            return Ok(Relaxed {
                m: state.m.abs(),
                converged: true,
                band: (state.m, state.m),
            });
        }
    }
    let low = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let high = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Relaxed {
        m: state.m.abs(),
        converged: false,
        band: (low, high),
    })
}

/// `|m|` at the fixed point reached from `init_m`.
pub fn spontaneous_magnetization(algorithm: Algorithm, t: f64, cfg: &CriticalSearchConfig) -> Result<f64> {
    cfg.validate()?;
    let r = relax(algorithm, t, cfg)?;
    if !r.converged {
        return Err(PhaseError::NonConvergent {
            algorithm,
            t,
            low: r.band.0,
            high: r.band.1,
        });
    }
    Ok(r.m)
}

/// Bisection on `t` for the onset of spontaneous magnetization.
///
/// Within a hair of the transition relaxation is critically slow; a probe
/// that exhausts `max_fp_iterations` is classified by its last `|m|`.
pub fn critical_temperature(algorithm: Algorithm, cfg: &CriticalSearchConfig) -> Result<f64> {
    cfg.validate()?;
    let magnetized = |t: f64| -> Result<(bool, f64)> {
        let r = relax(algorithm, t, cfg)?;
        Ok((r.m > cfg.m_threshold, r.m))
    };
    let (lo_mag, m_low) = magnetized(cfg.t_low)?;
    let (hi_mag, m_high) = magnetized(cfg.t_high)?;
    if !lo_mag || hi_mag {
        return Err(PhaseError::BadBracket {
            algorithm,
            t_low: cfg.t_low,
            t_high: cfg.t_high,
            m_low,
            m_high,
        });
    }
    let (mut lo, mut hi) = (cfg.t_low, cfg.t_high);
    while hi - lo > cfg.t_tolerance {
        let mid = 0.5 * (lo + hi);
        if magnetized(mid)?.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Algorithms with a homogeneous map.
pub const PHASE_ALGORITHMS: [Algorithm; 6] = [
    Algorithm::Mf,
    Algorithm::Mf2,
    Algorithm::Fn,
    Algorithm::Fn2,
    Algorithm::Bp,
    Algorithm::Cp,
];

/// Published critical temperature for comparison, where one exists.
pub fn reference_temperature(algorithm: Algorithm) -> Option<f64> {
    match algorithm {
        Algorithm::Mf => Some(4.0),
        Algorithm::Mf2 => Some(3.776),
        Algorithm::Fn => Some(3.089),
        Algorithm::Fn2 => Some(3.025),
        Algorithm::Bp => Some(2.885),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub algorithm: Algorithm,
    pub t_c: f64,
    pub reference: Option<f64>,
    pub delta: Option<f64>,
}

/// Critical temperatures for several algorithms (searched concurrently).
pub fn phase_table(algorithms: &[Algorithm], cfg: &CriticalSearchConfig, mode: ExecMode) -> Result<Vec<PhaseRow>> {
    map_ordered(mode, algorithms, |&a| {
        let t_c = critical_temperature(a, cfg)?;
        let reference = reference_temperature(a);
        Ok(PhaseRow {
            algorithm: a,
            t_c,
            reference,
            delta: reference.map(|r| t_c - r),
        })
    })
    .into_iter()
    .collect()
}

pub fn write_phase_csv(rows: &[PhaseRow], path: &Path) -> Result<()> {
    let wrap = |source: csv::Error| PhaseError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for row in rows {
        w.serialize(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))?;
    Ok(())
}

/// `{0,1}` parameters for `exp(Σ J_ij s_i s_j / t + Σ h_i s_i / t)` with
/// `s = 2x − 1`: `θ_ij = 4 J_ij / t`, `ϕ_i = (2 h_i − 2 Σ_j J_ij) / t`. The
/// dropped constant cancels in `Z`.
pub fn spin_to_binary(topology: Topology, couplings: &[f64], fields: &[f64], t: f64) -> IsingParams {
    let theta = couplings.iter().map(|j| 4.0 * j / t).collect();
    let phi = (0..topology.node_count())
        .map(|i| {
            let pull: f64 = topology.incident(i).iter().map(|&(_, e)| couplings[e]).sum();
            (2.0 * fields[i] - 2.0 * pull) / t
        })
        .collect();
    IsingParams {
        topology,
        theta,
        phi,
    }
}

/// `m = b(1) − b(0)` for a binary singleton table.
pub fn magnetization(table: &[f64]) -> f64 {
    table[1] - table[0]
}
