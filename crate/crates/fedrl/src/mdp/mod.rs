//! The generative multi-site MDP: ground-truth parameters, a
//! continuous-state simulator (sampling-importance-resampling transitions)
//! and an exactly solvable finite-state variant, plus offline dataset
//! collection under configurable behavior policies.
//!
//! Steps are 0-based in code: `h` ranges over `0..H` and the clipping
//! ceiling at step `h` is `H - h`.

pub mod continuous;
pub mod finite;

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::derive_seed;
use crate::features::Features;
pub use continuous::{ContinuousMdp, SIR_BATCH};
pub use finite::{FiniteMdp, OracleTables};

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("behavior policy invalid: {0}")]
    BadBehavior(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Ground truth for `K` sites sharing homogeneous reward coefficients.
#[derive(Debug, Clone)]
pub enum LinearMdpSpec {
    Continuous(ContinuousMdp),
    Finite(FiniteMdp),
}

impl LinearMdpSpec {
    pub fn k_sites(&self) -> usize {
        match self {
            LinearMdpSpec::Continuous(m) => m.k_sites,
            LinearMdpSpec::Finite(m) => m.k_sites,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            LinearMdpSpec::Continuous(m) => m.horizon,
            LinearMdpSpec::Finite(m) => m.horizon,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            LinearMdpSpec::Continuous(m) => m.map.action_count(),
            LinearMdpSpec::Finite(m) => m.action_count,
        }
    }

    pub fn features(&self) -> Arc<dyn Features> {
        match self {
            LinearMdpSpec::Continuous(m) => m.map.clone(),
            LinearMdpSpec::Finite(m) => m.features.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            LinearMdpSpec::Continuous(m) => m.state_dim(),
            LinearMdpSpec::Finite(_) => 1,
        }
    }

    pub fn as_finite(&self) -> Option<&FiniteMdp> {
        match self {
            LinearMdpSpec::Finite(m) => Some(m),
            _ => None,
        }
    }

    /// True mean reward `<phi0, theta0_h> + <phi1, theta_h^k>`.
    pub fn mean_reward(&self, k: usize, h: usize, x: &[f64], a: usize) -> f64 {
        match self {
            LinearMdpSpec::Continuous(m) => m.mean_reward(k, h, x, a),
            LinearMdpSpec::Finite(m) => m.mean_reward(k, h, finite::state_index(x), a),
        }
    }

    /// Per-step homogeneous coefficients `theta0_h`.
    pub fn theta0(&self, h: usize) -> &nalgebra::DVector<f64> {
        match self {
            LinearMdpSpec::Continuous(m) => &m.theta0[h],
            LinearMdpSpec::Finite(m) => &m.theta0[h],
        }
    }

    pub fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            LinearMdpSpec::Continuous(m) => m.initial_state(rng),
            LinearMdpSpec::Finite(m) => vec![rng.gen_range(0..m.state_count) as f64],
        }
    }

    /// Advance one step at site `k`, returning the next state and reward.
    pub fn step(
        &self,
        k: usize,
        h: usize,
        x: &[f64],
        a: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<f64>, f64) {
        match self {
            LinearMdpSpec::Continuous(m) => m.step(k, h, x, a, rng),
            LinearMdpSpec::Finite(m) => {
                let (s_next, r) = m.step(k, h, finite::state_index(x), a, rng);
                (vec![s_next as f64], r)
            }
        }
    }
}

/// How to draw a random instance.
#[derive(Debug, Clone)]
pub enum SpecConfig {
    Continuous {
        map: crate::features::FeatureMap,
        k_sites: usize,
        horizon: usize,
        reward_noise_sd: f64,
    },
    Finite {
        state_count: usize,
        action_count: usize,
        d0: usize,
        d1: usize,
        k_sites: usize,
        horizon: usize,
        stochastic_rewards: bool,
    },
}

/// Draw ground-truth parameters element-wise Uniform(0,1), rescaled to
/// respect the norm bounds. Deterministic given the seed.
pub fn sample_spec(config: &SpecConfig, seed: u64) -> LinearMdpSpec {
    match config {
        SpecConfig::Continuous {
            map,
            k_sites,
            horizon,
            reward_noise_sd,
        } => LinearMdpSpec::Continuous(ContinuousMdp::sample(
            map.clone(),
            *k_sites,
            *horizon,
            *reward_noise_sd,
            seed,
        )),
        SpecConfig::Finite {
            state_count,
            action_count,
            d0,
            d1,
            k_sites,
            horizon,
            stochastic_rewards,
        } => LinearMdpSpec::Finite(FiniteMdp::sample(
            *state_count,
            *action_count,
            *d0,
            *d1,
            *k_sites,
            *horizon,
            *stochastic_rewards,
            seed,
        )),
    }
}

// ── Behavior policies ───────────────────────────────────────────────────

/// The data-collecting policy family. No constraint on how well it
/// explores; `ActionSubset` models sites that only ever take some of
/// the actions.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    UniformRandom,
    /// With probability `1 - epsilon` take the true best action
    /// (exact optimal action in the finite variant, myopic reward
    /// argmax in the continuous one), otherwise uniform.
    EpsilonGreedyOnTruth { epsilon: f64 },
    /// Per-site list of allowed actions, sampled uniformly.
    ActionSubset { allowed: Vec<Vec<usize>> },
}

impl BehaviorPolicy {
    /// Bind the policy to a concrete site of a concrete instance.
    pub fn realize(&self, spec: &LinearMdpSpec, k: usize) -> Result<RealizedBehavior, MdpError> {
        let n_actions = spec.action_count();
        match self {
            BehaviorPolicy::UniformRandom => Ok(RealizedBehavior::Uniform { n_actions }),
            BehaviorPolicy::EpsilonGreedyOnTruth { epsilon } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(MdpError::BadBehavior(format!(
                        "epsilon {epsilon} outside [0,1]"
                    )));
                }
                match spec {
                    LinearMdpSpec::Finite(m) => {
                        let oracle = m.exact_optimal(k);
                        Ok(RealizedBehavior::EpsGreedyFinite {
                            epsilon: *epsilon,
                            greedy: oracle.pi_star,
                            n_actions,
                        })
                    }
                    LinearMdpSpec::Continuous(m) => Ok(RealizedBehavior::EpsGreedyMyopic {
                        epsilon: *epsilon,
                        mdp: m.clone(),
                        site: k,
                        n_actions,
                    }),
                }
            }
            BehaviorPolicy::ActionSubset { allowed } => {
                let set = allowed
                    .get(k)
                    .ok_or_else(|| MdpError::BadBehavior(format!("no action subset for site {k}")))?;
                if set.is_empty() {
                    return Err(MdpError::BadBehavior(format!("empty action subset for site {k}")));
                }
                if set.iter().any(|&a| a >= n_actions) {
                    return Err(MdpError::BadBehavior(format!(
                        "action subset for site {k} contains out-of-range actions"
                    )));
                }
                Ok(RealizedBehavior::Subset {
                    allowed: set.clone(),
                    n_actions,
                })
            }
        }
    }
}

/// A behavior policy bound to one site: exposes exact action
/// probabilities (needed by importance sampling) and sampling.
#[derive(Debug, Clone)]
pub enum RealizedBehavior {
    Uniform {
        n_actions: usize,
    },
    EpsGreedyFinite {
        epsilon: f64,
        /// `greedy[h][s]`
        greedy: Vec<Vec<usize>>,
        n_actions: usize,
    },
    EpsGreedyMyopic {
        epsilon: f64,
        mdp: ContinuousMdp,
        site: usize,
        n_actions: usize,
    },
    Subset {
        allowed: Vec<usize>,
        n_actions: usize,
    },
}

impl RealizedBehavior {
    pub fn n_actions(&self) -> usize {
        match self {
            RealizedBehavior::Uniform { n_actions } => *n_actions,
            RealizedBehavior::EpsGreedyFinite { n_actions, .. } => *n_actions,
            RealizedBehavior::EpsGreedyMyopic { n_actions, .. } => *n_actions,
            RealizedBehavior::Subset { n_actions, .. } => *n_actions,
        }
    }

    pub fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64> {
        match self {
            RealizedBehavior::Uniform { n_actions } => {
                vec![1.0 / *n_actions as f64; *n_actions]
            }
            RealizedBehavior::EpsGreedyFinite {
                epsilon,
                greedy,
                n_actions,
            } => {
                let s = finite::state_index(x);
                let mut p = vec![epsilon / *n_actions as f64; *n_actions];
                p[greedy[h][s]] += 1.0 - epsilon;
                p
            }
            RealizedBehavior::EpsGreedyMyopic {
                epsilon,
                mdp,
                site,
                n_actions,
            } => {
                let best = (0..*n_actions)
                    .map(|a| mdp.mean_reward(*site, h, x, a))
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (a, v)| {
                        if v > acc.1 {
                            (a, v)
                        } else {
                            acc
                        }
                    })
                    .0;
                let mut p = vec![epsilon / *n_actions as f64; *n_actions];
                p[best] += 1.0 - epsilon;
                p
            }
            RealizedBehavior::Subset { allowed, n_actions } => {
                let mut p = vec![0.0; *n_actions];
                for &a in allowed {
                    p[a] = 1.0 / allowed.len() as f64;
                }
                p
            }
        }
    }

    pub fn sample(&self, h: usize, x: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let probs = self.action_probs(h, x);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (a, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return a;
            }
        }
        probs.len() - 1
    }
}

// ── Offline datasets ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `H + 1` states; the terminal one is unused by every estimator.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site_id: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub rng_seed: u64,
}

impl SiteDataset {
    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    /// Columnar text serialization: one header line
    /// `site_id,n,H,state_dim` followed by one row
    /// `tau,h,x...,a,r` per (trajectory, step), both 1-based.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{}",
            self.site_id,
            self.n(),
            self.horizon,
            self.state_dim
        )?;
        for (tau, traj) in self.trajectories.iter().enumerate() {
            for h in 0..self.horizon {
                let xs: Vec<String> = traj.states[h].iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(
                    w,
                    "{},{},{},{},{:.17e}",
                    tau + 1,
                    h + 1,
                    xs.join(","),
                    traj.actions[h],
                    traj.rewards[h]
                )?;
            }
        }
        Ok(())
    }

    /// Inverse of [`SiteDataset::write_to`]. Terminal states are not part
    /// of the format (no estimator reads them) and are zero-filled.
    pub fn read_from<R: BufRead>(r: R) -> Result<SiteDataset, MdpError> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(MdpError::Parse {
                line: 1,
                msg: "empty file".into(),
            })
            .and_then(|(i, l)| l.map(|l| (i, l)).map_err(MdpError::Io))?;
        let head: Vec<usize> = header
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|e| MdpError::Parse {
                    line: 1,
                    msg: format!("bad header field {t:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if head.len() != 4 {
            return Err(MdpError::Parse {
                line: 1,
                msg: "header must be site_id,n,H,state_dim".into(),
            });
        }
        let (site_id, n, horizon, state_dim) = (head[0], head[1], head[2], head[3]);
        let mut trajectories = vec![
            Trajectory {
                states: vec![vec![0.0; state_dim]; horizon + 1],
                actions: vec![0; horizon],
                rewards: vec![0.0; horizon],
            };
            n
        ];
        for (idx, line) in lines {
            let line = line.map_err(MdpError::Io)?;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split(',').collect();
            if toks.len() != 2 + state_dim + 2 {
                return Err(MdpError::Parse {
                    line: idx + 1,
                    msg: format!("expected {} fields, got {}", 4 + state_dim, toks.len()),
                });
            }
            let parse_err = |msg: String| MdpError::Parse { line: idx + 1, msg };
            let tau: usize = toks[0]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("tau: {e}")))?;
            let h: usize = toks[1]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("h: {e}")))?;
            if tau == 0 || tau > n || h == 0 || h > horizon {
                return Err(parse_err(format!("indices out of range: tau={tau} h={h}")));
            }
            let traj = &mut trajectories[tau - 1];
            for d in 0..state_dim {
                traj.states[h - 1][d] = toks[2 + d]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(format!("x[{d}]: {e}")))?;
            }
            traj.actions[h - 1] = toks[2 + state_dim]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("a: {e}")))?;
            traj.rewards[h - 1] = toks[3 + state_dim]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("r: {e}")))?;
        }
        Ok(SiteDataset {
            site_id,
            horizon,
            state_dim,
            trajectories,
            rng_seed: 0,
        })
    }
}

/// Collect `n_k` independent trajectories at site `k` under the given
/// behavior policy. Initial states are uniform on the domain.
/// Deterministic given `(seed, k)`.
pub fn collect_dataset(
    spec: &LinearMdpSpec,
    k: usize,
    n_k: usize,
    policy: &BehaviorPolicy,
    seed: u64,
) -> Result<SiteDataset, MdpError> {
    assert!(n_k >= 1, "n_k must be at least 1");
    let behavior = policy.realize(spec, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64, 0x0da7a]));
    let horizon = spec.horizon();
    let mut trajectories = Vec::with_capacity(n_k);
    for _ in 0..n_k {
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut x = spec.initial_state(&mut rng);
        for h in 0..horizon {
            let a = behavior.sample(h, &x, &mut rng);
            let (x_next, r) = spec.step(k, h, &x, a, &mut rng);
            states.push(x);
            actions.push(a);
            rewards.push(r);
            x = x_next;
        }
        states.push(x);
        trajectories.push(Trajectory {
            states,
            actions,
            rewards,
        });
    }
    Ok(SiteDataset {
        site_id: k,
        horizon,
        state_dim: spec.state_dim(),
        trajectories,
        rng_seed: seed,
    })
}
