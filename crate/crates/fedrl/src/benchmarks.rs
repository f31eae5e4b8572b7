//! Comparison methods: majority voting over per-site policies and
//! ordinary-least-squares fitted-Q baselines (one shared Q function, or
//! one per step).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::eval::Policy;
use crate::features::Features;
use crate::linalg::spd_solve;
use crate::mdp::SiteDataset;
use crate::pevi::{FitError, PessimisticPolicy};
use crate::summary::build_design;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QLearnVariant {
    /// A single Q function shared by every step, trained on pooled
    /// step-agnostic Bellman targets for `H` passes.
    One,
    /// Standard backward fitted-Q with a separate coefficient vector
    /// per step.
    PerStep,
}

/// OLS fitted-Q policy for one site.
#[derive(Clone)]
pub struct QLearnPolicy {
    pub map: Arc<dyn Features>,
    pub horizon: usize,
    pub variant: QLearnVariant,
    /// One entry per step for `PerStep`; a single shared entry for `One`.
    pub thetas: Vec<DVector<f64>>,
    /// Set when a singular design needed the ridge fallback.
    pub ridge_fallback_used: bool,
}

impl std::fmt::Debug for QLearnPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QLearnPolicy")
            .field("horizon", &self.horizon)
            .field("variant", &self.variant)
            .field("ridge_fallback_used", &self.ridge_fallback_used)
            .finish_non_exhaustive()
    }
}

impl QLearnPolicy {
    fn theta(&self, h: usize) -> &DVector<f64> {
        match self.variant {
            QLearnVariant::One => &self.thetas[0],
            QLearnVariant::PerStep => &self.thetas[h],
        }
    }

    pub fn q_value(&self, h: usize, x: &[f64], a: usize) -> f64 {
        let phi = self
            .map
            .stacked(x, a)
            .expect("state outside feature domain: simulator clipping bug");
        self.theta(h).dot(&phi)
    }

    pub fn greedy_action(&self, h: usize, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_q = f64::NEG_INFINITY;
        for a in 0..self.map.action_count() {
            let q = self.q_value(h, x, a);
            if q > best_q {
                best_q = q;
                best = a;
            }
        }
        best
    }
}

impl Policy for QLearnPolicy {
    fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64> {
        let mut probs = vec![0.0; self.map.action_count()];
        probs[self.greedy_action(h, x)] = 1.0;
        probs
    }

    fn action(&self, h: usize, x: &[f64]) -> usize {
        self.greedy_action(h, x)
    }
}

/// OLS solve of `Gram theta = rhs`; a singular design falls back to a
/// `1e-8` ridge and is flagged.
fn ols_solve(
    gram: &DMatrix<f64>,
    rhs: &DVector<f64>,
    fallback_used: &mut bool,
) -> Result<DVector<f64>, FitError> {
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    *fallback_used = true;
    let d = gram.nrows();
    let ridged = gram + DMatrix::identity(d, d) * 1e-8;
    let solved = spd_solve(&ridged, &DMatrix::from_column_slice(d, 1, rhs.as_slice()))?;
    Ok(solved.column(0).into_owned())
}

fn max_q(map: &dyn Features, theta: &DVector<f64>, x: &[f64]) -> f64 {
    (0..map.action_count())
        .map(|a| {
            let phi = map
                .stacked(x, a)
                .expect("state outside feature domain: simulator clipping bug");
            theta.dot(&phi)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fitted-Q iteration on one site's data.
pub fn fit_qlearn(
    dataset: &SiteDataset,
    map: &Arc<dyn Features>,
    variant: QLearnVariant,
) -> Result<QLearnPolicy, FitError> {
    assert!(dataset.n() >= 1, "need at least one trajectory");
    let horizon = dataset.horizon;
    let d = map.d();
    let mut fallback_used = false;

    let designs: Vec<DMatrix<f64>> = (0..horizon)
        .map(|h| {
            let (phi0, phi1) = build_design(dataset, map.as_ref(), h)?;
            let n = phi0.nrows();
            let mut phi = DMatrix::zeros(n, d);
            phi.view_mut((0, 0), (n, phi0.ncols())).copy_from(&phi0);
            phi.view_mut((0, phi0.ncols()), (n, phi1.ncols()))
                .copy_from(&phi1);
            Ok::<_, FitError>(phi)
        })
        .collect::<Result<_, _>>()?;

    let thetas = match variant {
        QLearnVariant::PerStep => {
            let mut thetas = vec![DVector::zeros(d); horizon];
            for h in (0..horizon).rev() {
                let phi = &designs[h];
                let mut y = DVector::zeros(dataset.n());
                for (tau, traj) in dataset.trajectories.iter().enumerate() {
                    let bootstrap = if h + 1 < horizon {
                        max_q(map.as_ref(), &thetas[h + 1], &traj.states[h + 1])
                    } else {
                        0.0
                    };
                    y[tau] = traj.rewards[h] + bootstrap;
                }
                let gram = phi.transpose() * phi;
                let rhs = phi.transpose() * &y;
                thetas[h] = ols_solve(&gram, &rhs, &mut fallback_used)?;
            }
            thetas
        }
        QLearnVariant::One => {
            // pooled rows over all steps; one regression per pass
            let rows: usize = dataset.n() * horizon;
            let mut phi = DMatrix::zeros(rows, d);
            for h in 0..horizon {
                phi.view_mut((h * dataset.n(), 0), (dataset.n(), d))
                    .copy_from(&designs[h]);
            }
            let gram = phi.transpose() * &phi;
            let mut theta = DVector::zeros(d);
            for _pass in 0..horizon {
                let mut y = DVector::zeros(rows);
                for h in 0..horizon {
                    for (tau, traj) in dataset.trajectories.iter().enumerate() {
                        let bootstrap = if h + 1 < horizon {
                            max_q(map.as_ref(), &theta, &traj.states[h + 1])
                        } else {
                            0.0
                        };
                        y[h * dataset.n() + tau] = traj.rewards[h] + bootstrap;
                    }
                }
                let rhs = phi.transpose() * &y;
                theta = ols_solve(&gram, &rhs, &mut fallback_used)?;
            }
            vec![theta]
        }
    };

    Ok(QLearnPolicy {
        map: map.clone(),
        horizon,
        variant,
        thetas,
        ridge_fallback_used: fallback_used,
    })
}

/// Most frequent vote; ties go to the smallest action index.
pub fn majority_vote(votes: impl IntoIterator<Item = usize>, n_actions: usize) -> usize {
    let mut counts = vec![0usize; n_actions];
    for v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    let mut best_count = 0;
    for (a, &count) in counts.iter().enumerate() {
        if count > best_count {
            best_count = count;
            best = a;
        }
    }
    best
}

/// The benchmark policy family.
#[derive(Debug, Clone)]
pub enum BenchmarkPolicy {
    /// Majority vote over `K` locally-fitted pessimistic policies.
    LdtrMv(Vec<PessimisticPolicy>),
    /// Single-site fitted-Q with one shared Q function.
    QLearn1(QLearnPolicy),
    /// Majority vote over `K` single-Q fits.
    QLearn1Mv(Vec<QLearnPolicy>),
    /// Single-site fitted-Q with per-step Q functions.
    QLearnH(QLearnPolicy),
}

impl BenchmarkPolicy {
    pub fn n_actions(&self) -> usize {
        match self {
            BenchmarkPolicy::LdtrMv(ps) => ps[0].map.action_count(),
            BenchmarkPolicy::QLearn1(p) | BenchmarkPolicy::QLearnH(p) => p.map.action_count(),
            BenchmarkPolicy::QLearn1Mv(ps) => ps[0].map.action_count(),
        }
    }
}

/// Majority vote over the member policies' greedy actions.
pub fn majority_vote_action(policies: &BenchmarkPolicy, h: usize, x: &[f64]) -> usize {
    match policies {
        BenchmarkPolicy::LdtrMv(members) => majority_vote(
            members.iter().map(|p| p.greedy_action(h, x)),
            policies.n_actions(),
        ),
        BenchmarkPolicy::QLearn1Mv(members) => majority_vote(
            members.iter().map(|p| p.greedy_action(h, x)),
            policies.n_actions(),
        ),
        BenchmarkPolicy::QLearn1(p) | BenchmarkPolicy::QLearnH(p) => p.greedy_action(h, x),
    }
}

impl Policy for BenchmarkPolicy {
    fn action_probs(&self, h: usize, x: &[f64]) -> Vec<f64> {
        let mut probs = vec![0.0; self.n_actions()];
        probs[majority_vote_action(self, h, x)] = 1.0;
        probs
    }

    fn action(&self, h: usize, x: &[f64]) -> usize {
        majority_vote_action(self, h, x)
    }
}
