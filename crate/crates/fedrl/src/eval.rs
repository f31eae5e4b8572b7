//! Policy scoring: exact dynamic programming on the finite variant,
//! Monte-Carlo rollouts on either variant, the per-decision
//! step-importance-sampling estimator for offline data, suboptimality
//! reports with their theoretical bound, Bellman-error coverage checks,
//! and dataset exploration diagnostics.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::derive_seed;
use crate::fdtr::FdtrFit;
use crate::features::{Features, TabularFeatures};
use crate::linalg::min_eigenvalue;
use crate::mdp::{FiniteMdp, LinearMdpSpec, RealizedBehavior, SiteDataset};
use crate::pevi::PessimisticPolicy;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("behavior probability is zero for the taken action (trajectory {tau}, step {h})")]
    ZeroBehaviorProbability { tau: usize, h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    ExactDp,
    MonteCarlo,
    StepImportanceSampling,
}

#[derive(Debug, Clone, Copy)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_rollouts: usize,
    pub method: EvalMethod,
}

/// Anything that can act: exposes action probabilities per `(h, x)`.
/// Deterministic policies are point masses.
pub trait Policy: Send + Sync {
    fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64>;

    fn action(&self, h: usize, x: &[f64]) -> usize {
        let probs = self.action_probs(h, x);
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (a, p) in probs.iter().enumerate() {
            if *p > best_p {
                best_p = *p;
                best = a;
            }
        }
        best
    }

    fn sample(&self, h: usize, x: &[f64], rng: &mut ChaCha8Rng) -> usize {
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

impl Policy for PessimisticPolicy {
    fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64> {
        let n = self.map.action_count();
        let mut probs = vec![0.0; n];
        probs[self.greedy_action(h, x)] = 1.0;
        probs
    }

    fn action(&self, h: usize, x: &[f64]) -> usize {
        self.greedy_action(h, x)
    }
}

impl Policy for RealizedBehavior {
    fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64> {
        RealizedBehavior::action_probs(self, h, x)
    }
}

/// Uniform-random policy over a fixed action count.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl Policy for UniformPolicy {
    fn action_probs(&self, _h: usize, _x: &[f64]) -> Vec<f64> {
        vec![1.0 / self.n_actions as f64; self.n_actions]
    }
}

/// Deterministic tabular policy on a finite state space
/// (`table[h][state] = action`).
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub table: Vec<Vec<usize>>,
    pub n_actions: usize,
}

impl Policy for TabularPolicy {
    fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64> {
        let s = TabularFeatures::state_index(x);
        let mut probs = vec![0.0; self.n_actions];
        probs[self.table[h][s]] = 1.0;
        probs
    }
}

// ── Exact and Monte-Carlo evaluation ────────────────────────────────────

/// Exact backward policy evaluation on the finite variant; returns the
/// step-0 value per state.
pub fn evaluate_exact(m: &FiniteMdp, k: usize, policy: &dyn Policy) -> Vec<f64> {
    let mut v = vec![0.0; m.state_count];
    for h in (0..m.horizon).rev() {
        let mut v_new = vec![0.0; m.state_count];
        for s in 0..m.state_count {
            let x = TabularFeatures::encode_state(s);
            let probs = policy.action_probs(h, &x);
            let mut total = 0.0;
            for (a, p) in probs.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                let kernel = m.kernel(k, h, s, a);
                let cont: f64 = kernel.iter().zip(&v).map(|(q, vv)| q * vv).sum();
                total += p * (m.mean_reward(k, h, s, a) + cont);
            }
            v_new[s] = total;
        }
        v = v_new;
    }
    v
}

/// Mean over initial states of the exact step-0 value.
pub fn evaluate_exact_mean(m: &FiniteMdp, k: usize, policy: &dyn Policy) -> f64 {
    let v = evaluate_exact(m, k, policy);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample mean and standard error of the episode return over fresh
/// rollouts under the policy, starting from uniform initial states.
pub fn evaluate_mc(
    spec: &LinearMdpSpec,
    k: usize,
    policy: &dyn Policy,
    n_rollouts: usize,
    seed: u64,
) -> ValueEstimate {
    assert!(n_rollouts >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64, 0x3ca1]));
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_rollouts {
        let mut x = spec.initial_state(&mut rng);
        let mut ret = 0.0;
        for h in 0..spec.horizon() {
            let a = policy.sample(h, &x, &mut rng);
            let (x_next, r) = spec.step(k, h, &x, a, &mut rng);
            ret += r;
            x = x_next;
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = n_rollouts as f64;
    let mean = sum / n;
    let var = ((sum_sq - sum * sum / n) / (n - 1.0).max(1.0)).max(0.0);
    ValueEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_rollouts,
        method: EvalMethod::MonteCarlo,
    }
}

// ── Step importance sampling ────────────────────────────────────────────

/// Per-decision importance-sampling estimate of the target policy's
/// value from offline trajectories: each reward is weighted by the
/// cumulative product of target/behavior action-probability ratios up
/// to its step. `self_normalized` switches to the weighted variant that
/// divides each step's weighted rewards by the mean weight at that step.
pub fn evaluate_step_is(
    dataset: &SiteDataset,
    behavior: &RealizedBehavior,
    target: &dyn Policy,
    self_normalized: bool,
) -> Result<ValueEstimate, EvalError> {
    let n = dataset.n();
    let horizon = dataset.horizon;
    // weights[tau][h] and rewards[tau][h]
    let mut weights = vec![vec![0.0; horizon]; n];
    for (tau, traj) in dataset.trajectories.iter().enumerate() {
        let mut ratio = 1.0;
        for h in 0..horizon {
            let x = &traj.states[h];
            let a = traj.actions[h];
            let p_b = RealizedBehavior::action_probs(behavior, h, x)[a];
            if p_b <= 0.0 {
                return Err(EvalError::ZeroBehaviorProbability { tau, h });
            }
            let p_e = target.action_probs(h, x)[a];
            ratio *= p_e / p_b;
            weights[tau][h] = ratio;
        }
    }

    if self_normalized {
        // normalize each step's weights by their mean, then sum steps;
        // the SE comes from the per-trajectory linearized contributions
        let nf = n as f64;
        let mut mean_w = vec![0.0; horizon];
        for row in &weights {
            for (h, w) in row.iter().enumerate() {
                mean_w[h] += w / nf;
            }
        }
        let mut per_traj = vec![0.0; n];
        for (tau, traj) in dataset.trajectories.iter().enumerate() {
            for h in 0..horizon {
                if mean_w[h] > 0.0 {
                    per_traj[tau] += weights[tau][h] * traj.rewards[h] / mean_w[h];
                }
            }
        }
        let mean = per_traj.iter().sum::<f64>() / nf;
        let var = per_traj
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (nf - 1.0).max(1.0);
        Ok(ValueEstimate {
            mean,
            std_error: (var / nf).sqrt(),
            n_rollouts: n,
            method: EvalMethod::StepImportanceSampling,
        })
    } else {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for (tau, traj) in dataset.trajectories.iter().enumerate() {
            let mut g = 0.0;
            for h in 0..horizon {
                g += weights[tau][h] * traj.rewards[h];
            }
            sum += g;
            sum_sq += g * g;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = ((sum_sq - sum * sum / nf) / (nf - 1.0).max(1.0)).max(0.0);
        Ok(ValueEstimate {
            mean,
            std_error: (var / nf).sqrt(),
            n_rollouts: n,
            method: EvalMethod::StepImportanceSampling,
        })
    }
}

// ── Suboptimality and coverage ──────────────────────────────────────────

/// Gap to the optimal value at one initial state, with the multi-site
/// confidence-penalty path bound evaluated by Monte Carlo along
/// optimal-policy trajectories.
#[derive(Debug, Clone)]
pub struct SuboptReport {
    pub site_id: usize,
    pub state: usize,
    pub v_star: f64,
    pub v_policy: f64,
    pub subopt: f64,
    /// `2 alpha sum_h E[ sqrt(phi^T M_h phi) ]` under the optimal policy.
    pub bound: f64,
    pub bound_std_error: f64,
}

/// Evaluate a fitted pessimistic policy against the exact optimum of a
/// finite instance from initial state `x_index`.
pub fn suboptimality(
    m: &FiniteMdp,
    k: usize,
    policy: &PessimisticPolicy,
    x_index: usize,
    n_rollouts: usize,
    seed: u64,
) -> SuboptReport {
    let oracle = m.exact_optimal(k);
    let v_pi = evaluate_exact(m, k, policy as &dyn Policy);
    let features = m.features.clone();

    // Monte-Carlo estimate of the expected penalty along pi* trajectories
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64, 0x5b0b]));
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_rollouts {
        let mut s = x_index;
        let mut path = 0.0;
        for h in 0..m.horizon {
            let a = oracle.pi_star[h][s];
            let phi = features
                .stacked(&TabularFeatures::encode_state(s), a)
                .expect("finite state in range");
            let step = &policy.steps[h];
            let quad = phi.dot(&(&step.m * &phi)).max(0.0);
            path += step.alpha * quad.sqrt();
            let (s_next, _) = m.step(k, h, s, a, &mut rng);
            s = s_next;
        }
        sum += 2.0 * path;
        sum_sq += 4.0 * path * path;
    }
    let n = n_rollouts as f64;
    let bound = sum / n;
    let var = ((sum_sq - sum * sum / n) / (n - 1.0).max(1.0)).max(0.0);

    SuboptReport {
        site_id: k,
        state: x_index,
        v_star: oracle.v_star[0][x_index],
        v_policy: v_pi[x_index],
        subopt: oracle.v_star[0][x_index] - v_pi[x_index],
        bound,
        bound_std_error: (var / n).sqrt(),
    }
}

/// Whether the fitted Bellman estimate stays within its confidence
/// penalty everywhere on the `(h, s, a)` grid:
/// `|phi^T theta_h - (B V_{h+1})(s, a)| <= Gamma_h(s, a)`.
pub fn bellman_event_holds(m: &FiniteMdp, fit: &FdtrFit) -> bool {
    let k = fit.site_id;
    let features = &m.features;
    for h in 0..m.horizon {
        let step = &fit.policy.steps[h];
        // fitted value one step ahead, per state
        let v_next: Vec<f64> = (0..m.state_count)
            .map(|s| fit.policy.value(h + 1, &TabularFeatures::encode_state(s)))
            .collect();
        for s in 0..m.state_count {
            let x = TabularFeatures::encode_state(s);
            for a in 0..m.action_count {
                let phi = features.stacked(&x, a).expect("finite state in range");
                let estimate = step.theta.dot(&phi);
                let kernel = m.kernel(k, h, s, a);
                let truth = m.mean_reward(k, h, s, a)
                    + kernel.iter().zip(&v_next).map(|(p, v)| p * v).sum::<f64>();
                let quad = phi.dot(&(&step.m * &phi)).max(0.0);
                let gamma = step.alpha * quad.sqrt() + fit.policy.additive_penalty;
                if (estimate - truth).abs() > gamma {
                    return false;
                }
            }
        }
    }
    true
}

/// Fraction of fits whose Bellman event holds on the full grid.
pub fn pessimism_event_rate(m: &FiniteMdp, fits: &[FdtrFit]) -> f64 {
    if fits.is_empty() {
        return 0.0;
    }
    let hits = fits.iter().filter(|f| bellman_event_holds(m, f)).count();
    hits as f64 / fits.len() as f64
}

#[derive(Debug, Clone)]
pub struct CoverageEntry {
    pub site_id: usize,
    pub h: usize,
    pub covariance: DMatrix<f64>,
    pub min_eigenvalue: f64,
    /// mean and max of `||phi0||^2 * d / d0` over the rows
    pub norm_balance_mean: f64,
    pub norm_balance_max: f64,
}

#[derive(Debug, Clone)]
pub struct CoverageDiagnostics {
    pub entries: Vec<CoverageEntry>,
}

impl CoverageDiagnostics {
    pub fn worst_min_eigenvalue(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Empirical per-(site, step) feature covariances `Lambda / n`, their
/// smallest eigenvalues, and the homogeneous norm-balance ratios.
pub fn coverage_diagnostics(
    datasets: &[SiteDataset],
    map: &dyn Features,
) -> Result<CoverageDiagnostics, crate::summary::SummaryError> {
    let mut entries = Vec::new();
    let d = map.d();
    let d0 = map.d0();
    for dataset in datasets {
        for h in 0..dataset.horizon {
            let (phi0, phi1) = crate::summary::build_design(dataset, map, h)?;
            let n = dataset.n() as f64;
            let mut cov = DMatrix::zeros(d, d);
            let mut balance_sum = 0.0;
            let mut balance_max = 0.0_f64;
            for tau in 0..dataset.n() {
                let mut phi = nalgebra::DVector::zeros(d);
                phi.rows_mut(0, d0)
                    .copy_from(&phi0.row(tau).transpose());
                phi.rows_mut(d0, d - d0)
                    .copy_from(&phi1.row(tau).transpose());
                cov += &phi * phi.transpose() / n;
                let balance = if d0 > 0 {
                    phi0.row(tau).norm_squared() * d as f64 / d0 as f64
                } else {
                    0.0
                };
                balance_sum += balance;
                balance_max = balance_max.max(balance);
            }
            entries.push(CoverageEntry {
                site_id: dataset.site_id,
                h,
                min_eigenvalue: min_eigenvalue(&cov),
                covariance: cov,
                norm_balance_mean: balance_sum / n,
                norm_balance_max: balance_max,
            });
        }
    }
    Ok(CoverageDiagnostics { entries })
}

// ── Cross-validation of the penalty scale ───────────────────────────────

/// Pick the penalty scale `c` from a grid by `folds`-fold
/// cross-validation: fit the full federated pipeline on the training
/// folds and score each site's held-out trajectories with the
/// step-importance-sampling estimator. Ties go to the smaller grid
/// index.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate_c(
    spec: &LinearMdpSpec,
    datasets: &[SiteDataset],
    map: &std::sync::Arc<dyn Features>,
    behavior: &crate::mdp::BehaviorPolicy,
    grid: &[f64],
    folds: usize,
    base: &crate::pevi::PenaltyParams,
) -> Result<f64, crate::pevi::FitError> {
    assert!(!grid.is_empty(), "grid must be non-empty");
    assert!(folds >= 2, "need at least two folds");
    let behaviors: Vec<RealizedBehavior> = (0..datasets.len())
        .map(|k| behavior.realize(spec, k))
        .collect::<Result<_, _>>()
        .map_err(|e| crate::pevi::FitError::BadParams(e.to_string()))?;

    let mut best_c = grid[0];
    let mut best_score = f64::NEG_INFINITY;
    for &c in grid {
        let params = crate::pevi::PenaltyParams { c, ..*base };
        let mut score_sum = 0.0;
        let mut score_n = 0usize;
        for fold in 0..folds {
            let mut train = Vec::with_capacity(datasets.len());
            let mut test = Vec::with_capacity(datasets.len());
            for dataset in datasets {
                let mut tr = dataset.clone();
                let mut te = dataset.clone();
                tr.trajectories.clear();
                te.trajectories.clear();
                for (tau, traj) in dataset.trajectories.iter().enumerate() {
                    if tau % folds == fold {
                        te.trajectories.push(traj.clone());
                    } else {
                        tr.trajectories.push(traj.clone());
                    }
                }
                train.push(tr);
                test.push(te);
            }
            if train.iter().any(|d| d.n() == 0) || test.iter().any(|d| d.n() == 0) {
                continue;
            }
            let (_, fits) = crate::fdtr::federated_pipeline(&train, map, &params)?;
            for (k, fit) in fits.iter().enumerate() {
                let est = evaluate_step_is(&test[k], &behaviors[k], &fit.policy, false)
                    .map_err(|e| crate::pevi::FitError::BadParams(e.to_string()))?;
                score_sum += est.mean;
                score_n += 1;
            }
        }
        if score_n == 0 {
            continue;
        }
        let score = score_sum / score_n as f64;
        if score > best_score {
            best_score = score;
            best_c = c;
        }
    }
    Ok(best_c)
}
