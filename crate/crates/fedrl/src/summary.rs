//! Per-(site, step) summary statistics: the Gram blocks and moment
//! vectors that are the only payload ever crossing site boundaries,
//! plus the projected homogeneous form consumed by the federated fit.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::features::{FeatureError, Features};
use crate::linalg::pinv;
use crate::mdp::SiteDataset;

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("value function output {value} outside [0, {hi}] (clipping bug upstream)")]
    RangeError { value: f64, hi: f64 },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Gram blocks and moment vectors of one site at one step:
/// `G00 = Phi0^T Phi0`, `G01 = Phi0^T Phi1`, `G11 = Phi1^T Phi1`,
/// `v0 = Phi0^T Y`, `v1 = Phi1^T Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryBundle {
    pub site_id: usize,
    pub h: usize,
    pub n: usize,
    pub g00: DMatrix<f64>,
    pub g01: DMatrix<f64>,
    pub g11: DMatrix<f64>,
    pub v0: DVector<f64>,
    pub v1: DVector<f64>,
}

impl SummaryBundle {
    pub fn d0(&self) -> usize {
        self.g00.nrows()
    }

    pub fn d1(&self) -> usize {
        self.g11.nrows()
    }

    pub fn from_designs(
        site_id: usize,
        h: usize,
        phi0: &DMatrix<f64>,
        phi1: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> Self {
        SummaryBundle {
            site_id,
            h,
            n: phi0.nrows(),
            g00: phi0.transpose() * phi0,
            g01: phi0.transpose() * phi1,
            g11: phi1.transpose() * phi1,
            v0: phi0.transpose() * y,
            v1: phi1.transpose() * y,
        }
    }

    /// The full `d x d` Gram matrix `[G00 G01; G01^T G11]`.
    pub fn lambda_block(&self) -> DMatrix<f64> {
        let (d0, d1) = (self.d0(), self.d1());
        let mut out = DMatrix::zeros(d0 + d1, d0 + d1);
        out.view_mut((0, 0), (d0, d0)).copy_from(&self.g00);
        out.view_mut((0, d0), (d0, d1)).copy_from(&self.g01);
        out.view_mut((d0, 0), (d1, d0))
            .copy_from(&self.g01.transpose());
        out.view_mut((d0, d0), (d1, d1)).copy_from(&self.g11);
        out
    }

    /// The stacked moment vector `(v0^T, v1^T)^T`.
    pub fn moment_vector(&self) -> DVector<f64> {
        let (d0, d1) = (self.d0(), self.d1());
        let mut out = DVector::zeros(d0 + d1);
        out.rows_mut(0, d0).copy_from(&self.v0);
        out.rows_mut(d0, d1).copy_from(&self.v1);
        out
    }

    /// Entry-wise sum; the additivity that makes federating by summary
    /// statistics sound.
    pub fn add(&self, other: &SummaryBundle) -> SummaryBundle {
        SummaryBundle {
            site_id: self.site_id,
            h: self.h,
            n: self.n + other.n,
            g00: &self.g00 + &other.g00,
            g01: &self.g01 + &other.g01,
            g11: &self.g11 + &other.g11,
            v0: &self.v0 + &other.v0,
            v1: &self.v1 + &other.v1,
        }
    }
}

/// What a foreign site actually needs: the Schur complement
/// `A = G00 - G01 G11^+ G01^T` and `b = v0 - G01 G11^+ v1`, computed at
/// the owning site. Equals `Phi0^T (I - P) Phi0` and `Phi0^T (I - P) Y`
/// for the orthogonal projector `P` onto the columns of `Phi1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedHomogeneousStats {
    pub site_id: usize,
    pub h: usize,
    pub n: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Row `tau` of each design is `phi_j(x_h^tau, a_h^tau)`.
pub fn build_design(
    dataset: &SiteDataset,
    map: &dyn Features,
    h: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SummaryError> {
    let n = dataset.n();
    let mut phi0 = DMatrix::zeros(n, map.d0());
    let mut phi1 = DMatrix::zeros(n, map.d1());
    for (tau, traj) in dataset.trajectories.iter().enumerate() {
        let (p0, p1) = map.eval(&traj.states[h], traj.actions[h])?;
        phi0.row_mut(tau).copy_from(&p0.transpose());
        phi1.row_mut(tau).copy_from(&p1.transpose());
    }
    Ok((phi0, phi1))
}

/// Regression targets `Y_tau = r_h^tau + V(x_{h+1}^tau)`.
///
/// `v_next` must map states into `[0, H]`; anything outside signals a
/// clipping bug upstream and is reported as a `RangeError`.
pub fn build_targets(
    dataset: &SiteDataset,
    v_next: &dyn Fn(&[f64]) -> f64,
    h: usize,
) -> Result<DVector<f64>, SummaryError> {
    let hi = dataset.horizon as f64;
    let mut y = DVector::zeros(dataset.n());
    for (tau, traj) in dataset.trajectories.iter().enumerate() {
        let v = v_next(&traj.states[h + 1]);
        if !(-1e-9..=hi + 1e-9).contains(&v) {
            return Err(SummaryError::RangeError { value: v, hi });
        }
        y[tau] = traj.rewards[h] + v;
    }
    Ok(y)
}

/// The five blocks from one site at one step; a pure function of
/// `(dataset, map, v_next, h)`.
pub fn summarize(
    dataset: &SiteDataset,
    map: &dyn Features,
    v_next: &dyn Fn(&[f64]) -> f64,
    h: usize,
) -> Result<SummaryBundle, SummaryError> {
    let (phi0, phi1) = build_design(dataset, map, h)?;
    let y = build_targets(dataset, v_next, h)?;
    Ok(SummaryBundle::from_designs(
        dataset.site_id,
        h,
        &phi0,
        &phi1,
        &y,
    ))
}

/// Schur complement of `G11` in the full Gram block. Uses the
/// pseudo-inverse, so rank-deficient `G11` (fewer rows than columns)
/// is handled.
pub fn project_homogeneous(bundle: &SummaryBundle) -> ProjectedHomogeneousStats {
    let g11_pinv = pinv(&bundle.g11);
    let mut a = &bundle.g00 - &bundle.g01 * &g11_pinv * bundle.g01.transpose();
    let b = &bundle.v0 - &bundle.g01 * &g11_pinv * &bundle.v1;
    // symmetrize away factorization round-off
    a = (&a + &a.transpose()) * 0.5;
    ProjectedHomogeneousStats {
        site_id: bundle.site_id,
        h: bundle.h,
        n: bundle.n,
        a,
        b,
    }
}
