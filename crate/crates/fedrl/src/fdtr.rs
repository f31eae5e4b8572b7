//! FDTR: federated pessimistic policy optimization. Each site combines
//! its own data with one round of foreign summary statistics (projected
//! homogeneous blocks built on the foreign sites' frozen local value
//! functions) and reruns backward pessimistic value iteration against
//! the widened matrix `Sigma_h = Lambda_h + lambda I + blockdiag(sum_j A_j, 0)`.
//!
//! The solver works on `d x d` blocks throughout; the full
//! `(d0 + K d1)`-dimensional normal-equation route exists only as a test
//! oracle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::features::Features;
use crate::linalg::{spd_inverse, spd_solve};
use crate::mdp::SiteDataset;
use crate::pevi::{FitError, PenaltyParams, PessimisticPolicy, StepPolicy};
use crate::summary::{
    build_design, build_targets, project_homogeneous, summarize, ProjectedHomogeneousStats,
    SummaryBundle,
};

/// Everything one federated fit consumes. Holding the foreign
/// statistics by value pins the single-communication-round semantics:
/// nothing can be re-requested after construction.
#[derive(Clone)]
pub struct FederatedFitInputs {
    pub dataset: SiteDataset,
    pub map: Arc<dyn Features>,
    pub params: PenaltyParams,
    /// `foreign_by_step[h]` lists the stats of every other site at step
    /// `h`, all built with those sites' frozen local value functions.
    pub foreign_by_step: Vec<Vec<ProjectedHomogeneousStats>>,
}

impl FederatedFitInputs {
    /// Total trajectory count `N` across all participating sites.
    pub fn total_n(&self) -> usize {
        let foreign: usize = self
            .foreign_by_step
            .first()
            .map(|stats| stats.iter().map(|s| s.n).sum())
            .unwrap_or(0);
        self.dataset.n() + foreign
    }

    fn validate(&self) -> Result<(), FitError> {
        if self.foreign_by_step.len() != self.dataset.horizon {
            return Err(FitError::Dimension(format!(
                "foreign stats cover {} steps, dataset horizon is {}",
                self.foreign_by_step.len(),
                self.dataset.horizon
            )));
        }
        let d0 = self.map.d0();
        for stats in &self.foreign_by_step {
            for s in stats {
                if s.a.nrows() != d0 || s.a.ncols() != d0 || s.b.len() != d0 {
                    return Err(FitError::Dimension(format!(
                        "foreign stats from site {} have homogeneous dim {}, expected {}",
                        s.site_id,
                        s.a.nrows(),
                        d0
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One site's federated fit: per-step coefficient blocks, the widened
/// penalty matrices, and the resulting pessimistic policy.
#[derive(Debug, Clone)]
pub struct FdtrFit {
    pub site_id: usize,
    /// `theta0_hat[h]`: homogeneous coefficients.
    pub theta0_hat: Vec<DVector<f64>>,
    /// `theta_site_hat[h]`: this site's heterogeneous coefficients.
    pub theta_site_hat: Vec<DVector<f64>>,
    /// `sigma[h]`: the `d x d` penalty matrix.
    pub sigma: Vec<DMatrix<f64>>,
    pub alpha: f64,
    pub policy: PessimisticPolicy,
}

/// `Sigma = Lambda + lambda I + blockdiag(sum_j A_j, 0)`.
pub fn assemble_sigma(
    local: &SummaryBundle,
    foreign: &[ProjectedHomogeneousStats],
    lambda: f64,
) -> Result<DMatrix<f64>, FitError> {
    let (d0, d1) = (local.d0(), local.d1());
    let d = d0 + d1;
    let mut sigma = local.lambda_block();
    for i in 0..d {
        sigma[(i, i)] += lambda;
    }
    for stats in foreign {
        if stats.a.nrows() != d0 {
            return Err(FitError::Dimension(format!(
                "foreign A block is {}x{}, expected {d0}x{d0}",
                stats.a.nrows(),
                stats.a.ncols()
            )));
        }
        let mut block = sigma.view_mut((0, 0), (d0, d0));
        block += &stats.a;
    }
    Ok(sigma)
}

/// Closed-form minimizer restricted to `(theta0, theta_k)`:
/// `Sigma^{-1} (sum_j b_j + Phi0^T Y; Phi1^T Y)`.
pub fn fdtr_solve_step(
    phi0: &DMatrix<f64>,
    phi1: &DMatrix<f64>,
    y: &DVector<f64>,
    foreign: &[ProjectedHomogeneousStats],
    lambda: f64,
) -> Result<(DVector<f64>, DVector<f64>), FitError> {
    let local = SummaryBundle::from_designs(0, 0, phi0, phi1, y);
    let sigma = assemble_sigma(&local, foreign, lambda)?;
    let (d0, d1) = (local.d0(), local.d1());
    let mut rhs = local.moment_vector();
    for stats in foreign {
        let mut head = rhs.rows_mut(0, d0);
        head += &stats.b;
    }
    let theta = spd_solve(&sigma, &DMatrix::from_column_slice(d0 + d1, 1, rhs.as_slice()))?;
    let theta = theta.column(0).into_owned();
    Ok((
        theta.rows(0, d0).into_owned(),
        theta.rows(d0, d1).into_owned(),
    ))
}

/// Run the backward federated fit for one site.
pub fn fdtr_fit(inputs: &FederatedFitInputs) -> Result<FdtrFit, FitError> {
    inputs.params.validate()?;
    inputs.validate()?;
    let dataset = &inputs.dataset;
    let map = &inputs.map;
    let horizon = dataset.horizon;
    let d = map.d();
    let (d0, d1) = (map.d0(), map.d1());
    let total_n = inputs.total_n();
    let alpha = inputs.params.alpha(d, horizon, total_n);
    let alpha_eff =
        alpha + (total_n as f64).sqrt() * (horizon as f64 + 1.0) * inputs.params.eta;
    let additive_penalty = (horizon as f64 + 1.0) * inputs.params.eta;

    let mut policy = PessimisticPolicy {
        steps: Vec::new(),
        horizon,
        map: map.clone(),
        additive_penalty,
    };
    let mut theta0_hat = vec![DVector::zeros(d0); horizon];
    let mut theta_site_hat = vec![DVector::zeros(d1); horizon];
    let mut sigmas = vec![DMatrix::zeros(d, d); horizon];

    for h in (0..horizon).rev() {
        let (phi0, phi1) = build_design(dataset, map.as_ref(), h)?;
        let built = horizon - 1 - h;
        let y = {
            let value_next = |x: &[f64]| -> f64 {
                if built == 0 {
                    0.0
                } else {
                    let step = &policy.steps[built - 1];
                    (0..map.action_count())
                        .map(|a| {
                            let phi = map
                                .stacked(x, a)
                                .expect("state outside feature domain: simulator clipping bug");
                            let quad = phi.dot(&(&step.m * &phi)).max(0.0);
                            (step.theta.dot(&phi) - step.alpha * quad.sqrt() - additive_penalty)
                                .min(step.ceiling)
                                .max(0.0)
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            };
            build_targets(dataset, &value_next, h)?
        };
        let local = SummaryBundle::from_designs(dataset.site_id, h, &phi0, &phi1, &y);
        let foreign = &inputs.foreign_by_step[h];
        let sigma = assemble_sigma(&local, foreign, inputs.params.lambda)?;
        let m = spd_inverse(&sigma)?;
        let mut rhs = local.moment_vector();
        for stats in foreign {
            let mut head = rhs.rows_mut(0, d0);
            head += &stats.b;
        }
        let theta = &m * rhs;
        theta0_hat[h] = theta.rows(0, d0).into_owned();
        theta_site_hat[h] = theta.rows(d0, d1).into_owned();
        sigmas[h] = sigma;
        policy.steps.push(StepPolicy {
            theta,
            m,
            alpha: alpha_eff,
            ceiling: (horizon - h) as f64,
        });
    }
    policy.steps.reverse();
    Ok(FdtrFit {
        site_id: dataset.site_id,
        theta0_hat,
        theta_site_hat,
        sigma: sigmas,
        alpha: alpha_eff,
        policy,
    })
}

/// The per-step projected statistics one site shares, built on its
/// frozen local value function.
pub fn compute_site_stats(
    dataset: &SiteDataset,
    map: &Arc<dyn Features>,
    local_policy: &PessimisticPolicy,
) -> Result<Vec<ProjectedHomogeneousStats>, FitError> {
    let mut out = Vec::with_capacity(dataset.horizon);
    for h in 0..dataset.horizon {
        let v_next = |x: &[f64]| local_policy.value(h + 1, x);
        let bundle = summarize(dataset, map.as_ref(), &v_next, h)?;
        out.push(project_homogeneous(&bundle));
    }
    Ok(out)
}

/// Entry-wise mean of the per-site homogeneous estimates, per step.
pub fn average_theta0(fits: &[FdtrFit]) -> Vec<DVector<f64>> {
    assert!(!fits.is_empty(), "need at least one fit");
    let horizon = fits[0].theta0_hat.len();
    let d0 = fits[0].theta0_hat[0].len();
    let mut out = vec![DVector::zeros(d0); horizon];
    for fit in fits {
        for h in 0..horizon {
            out[h] += &fit.theta0_hat[h];
        }
    }
    for v in &mut out {
        *v /= fits.len() as f64;
    }
    out
}

/// Convenience driver used by tests and the experiment runner when no
/// wire transport is involved: LDTR everywhere, stats from each site's
/// frozen value function, then one federated fit per site.
pub fn federated_pipeline(
    datasets: &[SiteDataset],
    map: &Arc<dyn Features>,
    params: &PenaltyParams,
) -> Result<(Vec<PessimisticPolicy>, Vec<FdtrFit>), FitError> {
    let local: Vec<PessimisticPolicy> = datasets
        .iter()
        .map(|d| crate::pevi::ldtr_fit(d, map, params))
        .collect::<Result<_, _>>()?;
    let stats: Vec<Vec<ProjectedHomogeneousStats>> = datasets
        .iter()
        .zip(&local)
        .map(|(d, p)| compute_site_stats(d, map, p))
        .collect::<Result<_, _>>()?;
    let horizon = datasets[0].horizon;
    let mut fits = Vec::with_capacity(datasets.len());
    for (k, dataset) in datasets.iter().enumerate() {
        let foreign_by_step: Vec<Vec<ProjectedHomogeneousStats>> = (0..horizon)
            .map(|h| {
                stats
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .map(|(_, s)| s[h].clone())
                    .collect()
            })
            .collect();
        let inputs = FederatedFitInputs {
            dataset: dataset.clone(),
            map: map.clone(),
            params: *params,
            foreign_by_step,
        };
        fits.push(fdtr_fit(&inputs)?);
    }
    Ok((local, fits))
}
