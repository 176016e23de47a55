//! Approximate inference on pairwise discrete Markov random fields through
//! reduced DLR equations: factorized-neighbor (FN, FN2), CP, belief
//! propagation, and mean-field (MF, MF2) updates, with a brute-force exact
//! oracle, a Gibbs sampler, homogeneous critical-temperature analysis, and a
//! batch experiment harness.

pub mod bench;
pub mod exact;
pub mod exec;
pub mod format;
pub mod inference;
pub mod model;
pub mod phase;
pub mod sampling;

pub use exec::ExecMode;
pub use model::{PairwiseModel, Region, Topology};
