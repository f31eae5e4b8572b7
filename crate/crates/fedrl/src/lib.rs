//! Multi-site offline reinforcement learning in episodic linear MDPs.
//!
//! The crate provides:
//! - [`linalg`]: the dense numeric kernels (SPD solves, pseudo-inverse,
//!   projectors, eigenvalue bounds);
//! - [`features`]: homogeneous/heterogeneous feature maps and basis
//!   expansions;
//! - [`mdp`]: the generative multi-site linear MDP with a continuous-state
//!   simulator and an exactly solvable finite-state variant, plus offline
//!   dataset collection under configurable behavior policies;
//! - [`summary`]: the per-step Gram/moment summary statistics that cross
//!   site boundaries, and their projected homogeneous form;
//! - [`pevi`]: LDTR, per-site pessimistic value iteration;
//! - [`fdtr`]: FDTR, the one-round federated policy optimization built on
//!   foreign summary statistics;
//! - [`transport`]: the canonical wire encoding and the in-process/TCP
//!   exchange of one federation round;
//! - [`eval`]: exact dynamic-programming evaluation, Monte-Carlo rollouts,
//!   the step-importance-sampling estimator, suboptimality reports, and
//!   coverage diagnostics;
//! - [`benchmarks`]: majority-voting and fitted-Q baselines;
//! - [`experiment`]: the declarative experiment runner behind the CLI.

pub mod benchmarks;
pub mod eval;
pub mod experiment;
pub mod fdtr;
pub mod features;
pub mod linalg;
pub mod mdp;
pub mod pevi;
pub mod summary;
pub mod transport;

/// Mix an arbitrary list of integers into a single RNG seed
/// (splitmix64-style). Used to derive independent, reproducible streams
/// per (seed, site, purpose).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = state ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
