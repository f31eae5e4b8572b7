//! Finite-state variant with exact transition probabilities, enabling
//! exact dynamic programming. Kernels are valid by construction: the
//! lookup features `phi1(s, a)` live on the probability simplex and each
//! measure row is a distribution over next states, so
//! `P(. | s, a) = mu^T phi1(s, a)` is a convex mixture of distributions.
//!
//! Rewards are Bernoulli with the model mean (so the mean is exact and
//! rewards stay in `[0, 1]`), or deterministic when
//! `stochastic_rewards` is off.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;
use crate::features::TabularFeatures;

pub fn state_index(x: &[f64]) -> usize {
    TabularFeatures::state_index(x)
}

/// Exact optimal quantities for one site, 0-based in `h`.
#[derive(Debug, Clone)]
pub struct OracleTables {
    /// `q_star[h][s][a]`
    pub q_star: Vec<Vec<Vec<f64>>>,
    /// `v_star[h][s]`, with `v_star[H]` the zero terminal row.
    pub v_star: Vec<Vec<f64>>,
    /// `pi_star[h][s]`, ties broken toward the smallest action index.
    pub pi_star: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FiniteMdp {
    pub k_sites: usize,
    pub horizon: usize,
    pub state_count: usize,
    pub action_count: usize,
    pub features: Arc<TabularFeatures>,
    /// `theta0[h]`
    pub theta0: Vec<DVector<f64>>,
    /// `theta_site[k][h]`
    pub theta_site: Vec<Vec<DVector<f64>>>,
    /// `mu[k][h]`: `d1 x S`, each row a distribution over next states.
    pub mu: Vec<Vec<DMatrix<f64>>>,
    pub stochastic_rewards: bool,
}

impl FiniteMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        state_count: usize,
        action_count: usize,
        d0: usize,
        d1: usize,
        k_sites: usize,
        horizon: usize,
        stochastic_rewards: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xf1417e]));
        // phi1 on the simplex, phi0 scaled into the remaining norm budget
        let mut phi0 = vec![vec![DVector::zeros(d0); action_count]; state_count];
        let mut phi1 = vec![vec![DVector::zeros(d1); action_count]; state_count];
        for s in 0..state_count {
            for a in 0..action_count {
                let mut p1 = DVector::from_fn(d1, |_, _| rng.gen_range(0.05..1.0));
                let sum: f64 = p1.iter().sum();
                p1 /= sum;
                let budget = (1.0 - p1.norm_squared()).max(0.0).sqrt() * 0.999;
                let mut p0 = DVector::from_fn(d0, |_, _| rng.gen_range(0.0..1.0));
                let n0 = p0.norm();
                if n0 > budget {
                    p0 *= budget / n0;
                }
                phi0[s][a] = p0;
                phi1[s][a] = p1;
            }
        }
        let features = Arc::new(TabularFeatures {
            state_count,
            action_count,
            phi0,
            phi1,
        });

        let mut theta0: Vec<DVector<f64>> = (0..horizon)
            .map(|_| DVector::from_fn(d0, |_, _| rng.gen_range(0.0..1.0)))
            .collect();
        let mut theta_site: Vec<Vec<DVector<f64>>> = (0..k_sites)
            .map(|_| {
                (0..horizon)
                    .map(|_| DVector::from_fn(d1, |_, _| rng.gen_range(0.0..1.0)))
                    .collect()
            })
            .collect();
        // scale all reward coefficients so every mean reward is in [0, 1]
        let mut max_mean = 0.0_f64;
        for k in 0..k_sites {
            for h in 0..horizon {
                for s in 0..state_count {
                    for a in 0..action_count {
                        let m = features.phi0[s][a].dot(&theta0[h])
                            + features.phi1[s][a].dot(&theta_site[k][h]);
                        max_mean = max_mean.max(m);
                    }
                }
            }
        }
        if max_mean > 1.0 {
            let scale = 1.0 / max_mean;
            for t in theta0.iter_mut() {
                *t *= scale;
            }
            for site in theta_site.iter_mut() {
                for t in site.iter_mut() {
                    *t *= scale;
                }
            }
        }

        let mu: Vec<Vec<DMatrix<f64>>> = (0..k_sites)
            .map(|_| {
                (0..horizon)
                    .map(|_| {
                        let mut m = DMatrix::from_fn(d1, state_count, |_, _| {
                            rng.gen_range(0.05..1.0)
                        });
                        for i in 0..d1 {
                            let sum: f64 = m.row(i).iter().sum();
                            for s in 0..state_count {
                                m[(i, s)] /= sum;
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect();

        FiniteMdp {
            k_sites,
            horizon,
            state_count,
            action_count,
            features,
            theta0,
            theta_site,
            mu,
            stochastic_rewards,
        }
    }

    pub fn mean_reward(&self, k: usize, h: usize, s: usize, a: usize) -> f64 {
        self.features.phi0[s][a].dot(&self.theta0[h])
            + self.features.phi1[s][a].dot(&self.theta_site[k][h])
    }

    /// Exact next-state distribution `mu^T phi1(s, a)`.
    pub fn kernel(&self, k: usize, h: usize, s: usize, a: usize) -> DVector<f64> {
        self.mu[k][h].transpose() * &self.features.phi1[s][a]
    }

    pub fn step(
        &self,
        k: usize,
        h: usize,
        s: usize,
        a: usize,
        rng: &mut ChaCha8Rng,
    ) -> (usize, f64) {
        let probs = self.kernel(k, h, s, a);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut s_next = self.state_count - 1;
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                s_next = i;
                break;
            }
        }
        let mean = self.mean_reward(k, h, s, a);
        let r = if self.stochastic_rewards {
            if rng.gen::<f64>() < mean {
                1.0
            } else {
                0.0
            }
        } else {
            mean
        };
        (s_next, r)
    }

    /// Hand-built single-site instance with `d0 = 1`, `d1 = 1`,
    /// `phi1 = (1)` everywhere, one shared kernel row per step, and a
    /// constant mean reward: transitions are exactly `kernel_row` and
    /// every mean reward equals `mean_reward`. Test scaffolding.
    #[cfg(test)]
    pub(crate) fn tiny(
        state_count: usize,
        action_count: usize,
        horizon: usize,
        kernel_row: Vec<f64>,
        mean_reward: f64,
        stochastic: bool,
    ) -> FiniteMdp {
        let phi0 = vec![vec![DVector::from_vec(vec![0.0]); action_count]; state_count];
        let phi1 = vec![vec![DVector::from_vec(vec![1.0]); action_count]; state_count];
        let features = Arc::new(TabularFeatures {
            state_count,
            action_count,
            phi0,
            phi1,
        });
        FiniteMdp {
            k_sites: 1,
            horizon,
            state_count,
            action_count,
            features,
            theta0: vec![DVector::from_vec(vec![0.0]); horizon],
            theta_site: vec![vec![DVector::from_vec(vec![mean_reward]); horizon]],
            mu: vec![vec![
                DMatrix::from_row_slice(1, state_count, &kernel_row);
                horizon
            ]],
            stochastic_rewards: stochastic,
        }
    }

    /// Backward induction for the optimal policy of site `k`.
    pub fn exact_optimal(&self, k: usize) -> OracleTables {
        let h_max = self.horizon;
        let mut v_star = vec![vec![0.0; self.state_count]; h_max + 1];
        let mut q_star = vec![vec![vec![0.0; self.action_count]; self.state_count]; h_max];
        let mut pi_star = vec![vec![0usize; self.state_count]; h_max];
        for h in (0..h_max).rev() {
            for s in 0..self.state_count {
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0;
                for a in 0..self.action_count {
                    let kernel = self.kernel(k, h, s, a);
                    let cont: f64 = kernel
                        .iter()
                        .zip(&v_star[h + 1])
                        .map(|(p, v)| p * v)
                        .sum();
                    let q = self.mean_reward(k, h, s, a) + cont;
                    q_star[h][s][a] = q;
                    if q > best {
                        best = q;
                        best_a = a;
                    }
                }
                v_star[h][s] = q_star[h][s][best_a];
                pi_star[h][s] = best_a;
            }
        }
        OracleTables {
            q_star,
            v_star,
            pi_star,
        }
    }
}
