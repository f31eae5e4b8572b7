//! LDTR: per-site pessimistic value iteration for linear MDPs. A ridge
//! regression per step (backward in time) gives the Q coefficients; an
//! uncertainty penalty proportional to the elliptical norm of the feature
//! under the inverted penalized Gram matrix is subtracted before clipping
//! and greedy policy extraction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Features;
use crate::linalg::{spd_inverse, LinalgError};
use crate::mdp::SiteDataset;
use crate::summary::{build_design, build_targets, SummaryBundle, SummaryError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid penalty parameters: {0}")]
    BadParams(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Ridge weight, penalty scale, confidence level, and approximation
/// margin for the pessimism penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub lambda: f64,
    pub c: f64,
    pub xi: f64,
    /// Misspecification/approximation margin; zero for an exact linear
    /// MDP, positive to widen the penalty additively and multiplicatively.
    pub eta: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            lambda: 1.0,
            c: 0.005,
            xi: 0.99,
            eta: 0.0,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.lambda > 0.0) {
            return Err(FitError::BadParams(format!("lambda = {}", self.lambda)));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(FitError::BadParams(format!("xi = {}", self.xi)));
        }
        if !(self.eta >= 0.0) {
            return Err(FitError::BadParams(format!("eta = {}", self.eta)));
        }
        Ok(())
    }

    /// Penalty scale `alpha = c d H sqrt(log(2 d H count / xi))`, with
    /// `count` the number of trajectories behind the fit.
    pub fn alpha(&self, d: usize, horizon: usize, count: usize) -> f64 {
        let zeta = (2.0 * d as f64 * horizon as f64 * count as f64 / self.xi).ln();
        self.c * d as f64 * horizon as f64 * zeta.sqrt()
    }
}

/// Per-step linear Q parameters: coefficients, the inverted penalized
/// Gram matrix, the (already widened) penalty scale, and the clip
/// ceiling for this step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPolicy {
    pub theta: DVector<f64>,
    /// `(penalized Gram)^{-1}`; SPD.
    pub m: DMatrix<f64>,
    pub alpha: f64,
    pub ceiling: f64,
}

/// A fitted pessimistic policy: greedy over clipped, penalized linear Q.
#[derive(Clone)]
pub struct PessimisticPolicy {
    pub steps: Vec<StepPolicy>,
    pub horizon: usize,
    pub map: Arc<dyn Features>,
    /// Additive penalty `(H + 1) * eta`; zero for exact linear MDPs.
    pub additive_penalty: f64,
}

impl std::fmt::Debug for PessimisticPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PessimisticPolicy")
            .field("horizon", &self.horizon)
            .field("d", &self.map.d())
            .field("additive_penalty", &self.additive_penalty)
            .finish_non_exhaustive()
    }
}

fn q_from_step(
    map: &dyn Features,
    step: &StepPolicy,
    additive_penalty: f64,
    x: &[f64],
    a: usize,
) -> f64 {
    let phi = map
        .stacked(x, a)
        .expect("state outside feature domain: simulator clipping bug");
    let fit = step.theta.dot(&phi);
    let quad = (phi.dot(&(&step.m * &phi))).max(0.0);
    let penalty = step.alpha * quad.sqrt() + additive_penalty;
    (fit - penalty).min(step.ceiling).max(0.0)
}

impl PessimisticPolicy {
    /// Pessimistic Q value `min{phi^T theta - Gamma, H - h}^+`.
    pub fn q_value(&self, h: usize, x: &[f64], a: usize) -> f64 {
        q_from_step(self.map.as_ref(), &self.steps[h], self.additive_penalty, x, a)
    }

    /// Greedy action; ties go to the smallest action index.
    pub fn greedy_action(&self, h: usize, x: &[f64]) -> usize {
        let mut best_a = 0;
        let mut best_q = f64::NEG_INFINITY;
        for a in 0..self.map.action_count() {
            let q = self.q_value(h, x, a);
            if q > best_q {
                best_q = q;
                best_a = a;
            }
        }
        best_a
    }

    /// Value of the greedy policy at step `h` (zero at the terminal
    /// step `h == horizon`).
    pub fn value(&self, h: usize, x: &[f64]) -> f64 {
        if h >= self.horizon {
            return 0.0;
        }
        let a = self.greedy_action(h, x);
        self.q_value(h, x, a)
    }

    pub fn export(&self) -> PolicyExport {
        PolicyExport {
            horizon: self.horizon,
            d: self.map.d(),
            additive_penalty: self.additive_penalty,
            steps: self
                .steps
                .iter()
                .map(|s| StepExport {
                    theta: s.theta.iter().cloned().collect(),
                    m_row_major: s.m.transpose().as_slice().to_vec(),
                    alpha: s.alpha,
                    ceiling: s.ceiling,
                })
                .collect(),
        }
    }
}

/// Serializable snapshot of a fitted policy (coefficients and penalty
/// matrices per step).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyExport {
    pub horizon: usize,
    pub d: usize,
    pub additive_penalty: f64,
    pub steps: Vec<StepExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepExport {
    pub theta: Vec<f64>,
    pub m_row_major: Vec<f64>,
    pub alpha: f64,
    pub ceiling: f64,
}

/// Fit the local pessimistic policy on one site's data.
///
/// Backward over steps: ridge-solve the Bellman targets built from the
/// policy's own value function one step ahead, then store the penalized
/// Q parameters for this step.
pub fn ldtr_fit(
    dataset: &SiteDataset,
    map: &Arc<dyn Features>,
    params: &PenaltyParams,
) -> Result<PessimisticPolicy, FitError> {
    params.validate()?;
    assert!(dataset.n() >= 1, "need at least one trajectory");
    let horizon = dataset.horizon;
    let d = map.d();
    let n = dataset.n();
    let alpha = params.alpha(d, horizon, n);
    let alpha_eff = alpha + (n as f64).sqrt() * (horizon as f64 + 1.0) * params.eta;
    let additive_penalty = (horizon as f64 + 1.0) * params.eta;

    let mut policy = PessimisticPolicy {
        steps: Vec::new(),
        horizon,
        map: map.clone(),
        additive_penalty,
    };
    // steps are built back to front, then reversed
    for h in (0..horizon).rev() {
        let (phi0, phi1) = build_design(dataset, map.as_ref(), h)?;
        let built = horizon - 1 - h; // steps already fitted
        let y = {
            let value_next = |x: &[f64]| -> f64 {
                if built == 0 {
                    0.0
                } else {
                    let step = &policy.steps[built - 1];
                    (0..map.action_count())
                        .map(|a| q_from_step(map.as_ref(), step, additive_penalty, x, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            };
            build_targets(dataset, &value_next, h)?
        };
        let bundle = SummaryBundle::from_designs(dataset.site_id, h, &phi0, &phi1, &y);
        let mut gram = bundle.lambda_block();
        for i in 0..d {
            gram[(i, i)] += params.lambda;
        }
        let m = spd_inverse(&gram)?;
        let theta = &m * bundle.moment_vector();
        policy.steps.push(StepPolicy {
            theta,
            m,
            alpha: alpha_eff,
            ceiling: (horizon - h) as f64,
        });
    }
    policy.steps.reverse();
    Ok(policy)
}
