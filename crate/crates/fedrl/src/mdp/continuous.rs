//! Continuous-state simulator. Transitions follow the linear-MDP form
//! `P(x' | x, a) = <phi1(x, a), mu_h(x')>` with the measure profile
//! `mu_h(x')_i = theta_mu[i, h] * exp(-||x' - anchor_i||^2 / (2 sigma^2))`:
//! a nonnegative mixture of Gaussian bumps whose mixing weights depend on
//! `(x, a)` through `phi1`. Next states are drawn by
//! sampling-importance-resampling over a batch of uniform proposals.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::derive_seed;
use crate::features::{DomainBox, FeatureMap, Features};

/// Number of uniform proposals per sampling-importance-resampling draw.
pub const SIR_BATCH: usize = 32;

/// Gaussian-bump profile giving the transition measure its state
/// dependence. Anchors sit on the diagonal of the domain box.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBumps {
    pub anchors: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl TransitionBumps {
    pub fn diagonal(domain: &DomainBox, d1: usize) -> Self {
        let dim = domain.dim();
        let mut anchors = Vec::with_capacity(d1);
        let mut mean_width = 0.0;
        for d in 0..dim {
            mean_width += domain.hi[d] - domain.lo[d];
        }
        mean_width /= dim.max(1) as f64;
        for i in 0..d1 {
            let frac = (i as f64 + 0.5) / d1 as f64;
            anchors.push(
                (0..dim)
                    .map(|d| domain.lo[d] + frac * (domain.hi[d] - domain.lo[d]))
                    .collect(),
            );
        }
        TransitionBumps {
            anchors,
            sigma: 0.25 * mean_width,
        }
    }

    pub fn bump(&self, i: usize, x: &[f64]) -> f64 {
        let mut d2 = 0.0;
        for (xv, av) in x.iter().zip(&self.anchors[i]) {
            d2 += (xv - av) * (xv - av);
        }
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

#[derive(Clone)]
pub struct ContinuousMdp {
    pub k_sites: usize,
    pub horizon: usize,
    pub map: Arc<dyn Features>,
    pub domain: DomainBox,
    /// `theta0[h]`, dimension `d0`.
    pub theta0: Vec<DVector<f64>>,
    /// `theta_site[k][h]`, dimension `d1`.
    pub theta_site: Vec<Vec<DVector<f64>>>,
    /// `d1 x H`; column `h` parameterizes the step-`h` measure.
    pub theta_mu: DMatrix<f64>,
    pub bumps: TransitionBumps,
    pub reward_noise_sd: f64,
}

impl std::fmt::Debug for ContinuousMdp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContinuousMdp")
            .field("k_sites", &self.k_sites)
            .field("horizon", &self.horizon)
            .field("state_dim", &self.domain.dim())
            .field("reward_noise_sd", &self.reward_noise_sd)
            .finish_non_exhaustive()
    }
}

impl ContinuousMdp {
    /// Draw all parameters element-wise Uniform(0,1); `theta_mu` columns
    /// are then rescaled so the integrated measure norm stays within
    /// `sqrt(d1)` (the rescale does not change the dynamics because the
    /// sampler renormalizes).
    pub fn sample(
        map: FeatureMap,
        k_sites: usize,
        horizon: usize,
        reward_noise_sd: f64,
        seed: u64,
    ) -> Self {
        let d0 = map.d0();
        let d1 = map.d1();
        let domain = map.domain().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5bec]));
        let uniform_vec = |dim: usize, rng: &mut ChaCha8Rng| {
            DVector::from_fn(dim, |_, _| rng.gen_range(0.0..1.0))
        };
        // Uniform(0,1) coordinates already satisfy ||theta|| <= sqrt(dim);
        // the explicit cap guards any future redraws.
        let cap = |v: DVector<f64>, bound: f64| {
            let n = v.norm();
            if n > bound {
                v * (bound / n)
            } else {
                v
            }
        };
        let mut theta0: Vec<DVector<f64>> = (0..horizon)
            .map(|_| cap(uniform_vec(d0, &mut rng), (d0 as f64).sqrt()))
            .collect();
        let mut theta_site: Vec<Vec<DVector<f64>>> = (0..k_sites)
            .map(|_| {
                (0..horizon)
                    .map(|_| cap(uniform_vec(d1, &mut rng), (d1 as f64).sqrt()))
                    .collect()
            })
            .collect();
        // rescale all reward coefficients jointly so every mean reward
        // stays in [0, 1]: with ||phi|| <= 1 it suffices that the
        // stacked (theta0_h, theta_h^k) norm never exceeds one
        let mut worst = 0.0_f64;
        for site in &theta_site {
            for (h, tk) in site.iter().enumerate() {
                worst = worst.max((theta0[h].norm_squared() + tk.norm_squared()).sqrt());
            }
        }
        if worst > 1.0 {
            let scale = 1.0 / worst;
            for t in theta0.iter_mut() {
                *t *= scale;
            }
            for site in theta_site.iter_mut() {
                for t in site.iter_mut() {
                    *t *= scale;
                }
            }
        }
        let mut theta_mu = DMatrix::from_fn(d1, horizon, |_, _| rng.gen_range(0.0..1.0));
        let bumps = TransitionBumps::diagonal(&domain, d1);
        rescale_measure_columns(&mut theta_mu, &bumps, &domain);
        ContinuousMdp {
            k_sites,
            horizon,
            map: Arc::new(map),
            domain,
            theta0,
            theta_site,
            theta_mu,
            bumps,
            reward_noise_sd,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn mean_reward(&self, k: usize, h: usize, x: &[f64], a: usize) -> f64 {
        let (p0, p1) = self
            .map
            .eval(x, a)
            .expect("state outside feature domain: simulator clipping bug");
        p0.dot(&self.theta0[h]) + p1.dot(&self.theta_site[k][h])
    }

    /// Unnormalized transition density `<phi1(x, a), mu_h(x')>`.
    pub fn transition_density(&self, h: usize, x: &[f64], a: usize, x_next: &[f64]) -> f64 {
        let (_, p1) = self
            .map
            .eval(x, a)
            .expect("state outside feature domain: simulator clipping bug");
        let mut density = 0.0;
        for i in 0..p1.len() {
            density += p1[i] * self.theta_mu[(i, h)] * self.bumps.bump(i, x_next);
        }
        density
    }

    pub fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.domain.dim())
            .map(|d| rng.gen_range(self.domain.lo[d]..=self.domain.hi[d]))
            .collect()
    }

    /// One environment step: Gaussian reward clipped to `[0, 1]`, and the
    /// next state resampled from `SIR_BATCH` uniform proposals weighted by
    /// the transition density.
    pub fn step(
        &self,
        k: usize,
        h: usize,
        x: &[f64],
        a: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<f64>, f64) {
        let mean = self.mean_reward(k, h, x, a);
        let noise: f64 = if self.reward_noise_sd > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            self.reward_noise_sd * z
        } else {
            0.0
        };
        let reward = (mean + noise).clamp(0.0, 1.0);

        let proposals: Vec<Vec<f64>> =
            (0..SIR_BATCH).map(|_| self.initial_state(rng)).collect();
        let weights: Vec<f64> = proposals
            .iter()
            .map(|p| self.transition_density(h, x, a, p))
            .collect();
        let idx = sir_select(&weights, rng);
        let mut x_next = proposals[idx].clone();
        self.domain.clip(&mut x_next);
        (x_next, reward)
    }
}

/// Categorical draw proportional to `weights`; falls back to uniform
/// when every weight is zero or non-finite.
pub fn sir_select(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().filter(|w| w.is_finite()).sum();
    if !(total > 0.0) {
        return rng.gen_range(0..weights.len());
    }
    let u: f64 = rng.gen_range(0.0..total);
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if w.is_finite() {
            cum += w;
        }
        if u < cum {
            return i;
        }
    }
    weights.len() - 1
}

/// Scale each column of `theta_mu` so the integrated vector norm of the
/// induced measure is at most `sqrt(d1)`. The integral is estimated on a
/// fixed quasi-random grid, so the construction stays deterministic.
fn rescale_measure_columns(theta_mu: &mut DMatrix<f64>, bumps: &TransitionBumps, domain: &DomainBox) {
    let d1 = theta_mu.nrows();
    if d1 == 0 {
        return;
    }
    let bound = (d1 as f64).sqrt();
    let mut grid_rng = ChaCha8Rng::seed_from_u64(0xf00d);
    let n_grid = 2048;
    let dim = domain.dim();
    let mut volume = 1.0;
    for d in 0..dim {
        volume *= domain.hi[d] - domain.lo[d];
    }
    let grid: Vec<Vec<f64>> = (0..n_grid)
        .map(|_| {
            (0..dim)
                .map(|d| grid_rng.gen_range(domain.lo[d]..=domain.hi[d]))
                .collect()
        })
        .collect();
    let bump_at: Vec<Vec<f64>> = grid
        .iter()
        .map(|x| (0..d1).map(|i| bumps.bump(i, x)).collect())
        .collect();
    for h in 0..theta_mu.ncols() {
        let mut integral = 0.0;
        for b in &bump_at {
            let mut norm2 = 0.0;
            for i in 0..d1 {
                let v = theta_mu[(i, h)] * b[i];
                norm2 += v * v;
            }
            integral += norm2.sqrt();
        }
        integral *= volume / n_grid as f64;
        if integral > bound {
            let scale = bound / integral * (1.0 - 1e-9);
            for i in 0..d1 {
                theta_mu[(i, h)] *= scale;
            }
        }
    }
}
