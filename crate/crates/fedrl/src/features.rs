//! Feature maps splitting state-action pairs into a homogeneous part
//! `phi0` (effects shared by every site) and a heterogeneous part `phi1`
//! (site-specific effects). Includes the linear/quadratic action-interaction
//! maps used by the simulators and B-spline/Fourier tensor-product bases for
//! nonparametric fitting.
//!
//! Every map normalizes the stacked feature so that
//! `||phi0||^2 + ||phi1||^2 <= 1`: the raw vector is divided by
//! `max(1, raw l2 norm)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("state coordinate {coord} = {value} outside domain [{lo}, {hi}]")]
    DomainError {
        coord: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("action {action} out of range (action count {count})")]
    BadAction { action: usize, count: usize },
    #[error("invalid feature configuration: {0}")]
    ConfigError(String),
}

/// Axis-aligned bounding box for states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn unit(dim: usize) -> Self {
        DomainBox {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(self.hi.iter()).all(|v| v.is_finite())
            && self.lo.iter().zip(&self.hi).all(|(l, h)| l <= h)
    }

    pub fn contains(&self, x: &[f64]) -> Result<(), FeatureError> {
        // small slack for float round-off after clipping
        const EPS: f64 = 1e-12;
        for (i, &v) in x.iter().enumerate() {
            if v < self.lo[i] - EPS || v > self.hi[i] + EPS {
                return Err(FeatureError::DomainError {
                    coord: i,
                    value: v,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }
}

/// Anything that turns a `(state, action)` pair into the feature pair
/// `(phi0, phi1)`. Discrete actions are embedded as the real scalars
/// `0, 1, ..., |A|-1`.
pub trait Features: Send + Sync {
    fn d0(&self) -> usize;
    fn d1(&self) -> usize;
    fn action_count(&self) -> usize;
    fn eval(&self, x: &[f64], a: usize) -> Result<(DVector<f64>, DVector<f64>), FeatureError>;

    fn d(&self) -> usize {
        self.d0() + self.d1()
    }

    /// Stacked feature `(phi0^T, phi1^T)^T`.
    fn stacked(&self, x: &[f64], a: usize) -> Result<DVector<f64>, FeatureError> {
        let (p0, p1) = self.eval(x, a)?;
        Ok(stack_phi(&p0, &p1))
    }
}

/// Concatenate the homogeneous and heterogeneous parts.
pub fn stack_phi(phi0: &DVector<f64>, phi1: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(phi0.len() + phi1.len());
    out.rows_mut(0, phi0.len()).copy_from(phi0);
    out.rows_mut(phi0.len(), phi1.len()).copy_from(phi1);
    out
}

/// Inverse of [`stack_phi`].
pub fn split_phi(phi: &DVector<f64>, d0: usize) -> (DVector<f64>, DVector<f64>) {
    (
        phi.rows(0, d0).into_owned(),
        phi.rows(d0, phi.len() - d0).into_owned(),
    )
}

fn normalize_joint(phi0: &mut DVector<f64>, phi1: &mut DVector<f64>) {
    let raw = (phi0.norm_squared() + phi1.norm_squared()).sqrt();
    if raw > 1.0 {
        *phi0 /= raw;
        *phi1 /= raw;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFamily {
    BSpline,
    Fourier,
}

/// Configuration of a tensor-product basis over `(x, a)`.
///
/// `counts0` lists the number of univariate bases for each homogeneous
/// state coordinate followed by one entry for the action; `counts1` does
/// the same for the heterogeneous coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    /// B-spline degree (ignored for Fourier).
    pub degree: usize,
    pub m0: usize,
    pub m1: usize,
    pub counts0: Vec<usize>,
    pub counts1: Vec<usize>,
    pub domain: DomainBox,
    pub action_count: usize,
}

/// The feature maps known to the config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// `phi_l(x, a) = (x_l, a * x_l)`.
    LinearActionInteraction {
        m0: usize,
        m1: usize,
        domain: DomainBox,
        action_count: usize,
    },
    /// `phi_l(x, a) = (x_l, a * x_l, a^2 * x_l)`.
    QuadraticActionInteraction {
        m0: usize,
        m1: usize,
        domain: DomainBox,
        action_count: usize,
    },
    /// Tensor-product basis expansion (B-spline or Fourier).
    TensorBasis(BasisSpec),
}

impl FeatureMap {
    pub fn linear(m0: usize, m1: usize, action_count: usize) -> Self {
        FeatureMap::LinearActionInteraction {
            m0,
            m1,
            domain: DomainBox::unit(m0 + m1),
            action_count,
        }
    }

    pub fn quadratic(m0: usize, m1: usize, action_count: usize) -> Self {
        FeatureMap::QuadraticActionInteraction {
            m0,
            m1,
            domain: DomainBox::unit(m0 + m1),
            action_count,
        }
    }

    pub fn domain(&self) -> &DomainBox {
        match self {
            FeatureMap::LinearActionInteraction { domain, .. } => domain,
            FeatureMap::QuadraticActionInteraction { domain, .. } => domain,
            FeatureMap::TensorBasis(spec) => &spec.domain,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.domain().dim()
    }

    /// The spec'd evaluation entry point; same as [`Features::eval`].
    pub fn eval_phi(
        &self,
        x: &[f64],
        a: usize,
    ) -> Result<(DVector<f64>, DVector<f64>), FeatureError> {
        self.eval(x, a)
    }
}

fn interaction_part(x_l: &[f64], powers: &[f64]) -> DVector<f64> {
    let m = x_l.len();
    let mut out = DVector::zeros(m * powers.len());
    for (block, p) in powers.iter().enumerate() {
        for (i, &xi) in x_l.iter().enumerate() {
            out[block * m + i] = p * xi;
        }
    }
    out
}

impl Features for FeatureMap {
    fn d0(&self) -> usize {
        match self {
            FeatureMap::LinearActionInteraction { m0, .. } => 2 * m0,
            FeatureMap::QuadraticActionInteraction { m0, .. } => 3 * m0,
            FeatureMap::TensorBasis(spec) => spec.counts0.iter().product(),
        }
    }

    fn d1(&self) -> usize {
        match self {
            FeatureMap::LinearActionInteraction { m1, .. } => 2 * m1,
            FeatureMap::QuadraticActionInteraction { m1, .. } => 3 * m1,
            FeatureMap::TensorBasis(spec) => spec.counts1.iter().product(),
        }
    }

    fn action_count(&self) -> usize {
        match self {
            FeatureMap::LinearActionInteraction { action_count, .. } => *action_count,
            FeatureMap::QuadraticActionInteraction { action_count, .. } => *action_count,
            FeatureMap::TensorBasis(spec) => spec.action_count,
        }
    }

    fn eval(&self, x: &[f64], a: usize) -> Result<(DVector<f64>, DVector<f64>), FeatureError> {
        if a >= self.action_count() {
            return Err(FeatureError::BadAction {
                action: a,
                count: self.action_count(),
            });
        }
        self.domain().contains(x)?;
        let av = a as f64;
        let (mut p0, mut p1) = match self {
            FeatureMap::LinearActionInteraction { m0, .. } => {
                let powers = [1.0, av];
                (
                    interaction_part(&x[..*m0], &powers),
                    interaction_part(&x[*m0..], &powers),
                )
            }
            FeatureMap::QuadraticActionInteraction { m0, .. } => {
                let powers = [1.0, av, av * av];
                (
                    interaction_part(&x[..*m0], &powers),
                    interaction_part(&x[*m0..], &powers),
                )
            }
            FeatureMap::TensorBasis(spec) => eval_tensor_basis(spec, x, a),
        };
        normalize_joint(&mut p0, &mut p1);
        Ok((p0, p1))
    }
}

/// A map whose homogeneous part is the raw homogeneous state block
/// (no action interaction). With the homogeneous coordinates frozen per
/// site this realizes the site-level-covariate setting, where a single
/// site cannot identify the shared coefficients on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCovariateMap {
    pub m0: usize,
    pub m1: usize,
    pub domain: DomainBox,
    pub action_count: usize,
}

impl SiteCovariateMap {
    pub fn new(m0: usize, m1: usize, action_count: usize) -> Self {
        SiteCovariateMap {
            m0,
            m1,
            domain: DomainBox::unit(m0 + m1),
            action_count,
        }
    }
}

impl Features for SiteCovariateMap {
    fn d0(&self) -> usize {
        self.m0
    }

    fn d1(&self) -> usize {
        2 * self.m1
    }

    fn action_count(&self) -> usize {
        self.action_count
    }

    fn eval(&self, x: &[f64], a: usize) -> Result<(DVector<f64>, DVector<f64>), FeatureError> {
        if a >= self.action_count {
            return Err(FeatureError::BadAction {
                action: a,
                count: self.action_count,
            });
        }
        self.domain.contains(x)?;
        let mut p0 = DVector::from_column_slice(&x[..self.m0]);
        let mut p1 = interaction_part(&x[self.m0..], &[1.0, a as f64]);
        normalize_joint(&mut p0, &mut p1);
        Ok((p0, p1))
    }
}

/// Lookup-table features for finite state spaces. States are encoded as
/// one-element slices holding the state index. Construction guarantees
/// the joint-norm bound and (for the transition model) that `phi1` lies
/// on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularFeatures {
    pub state_count: usize,
    pub action_count: usize,
    /// `phi0[s][a]`
    pub phi0: Vec<Vec<DVector<f64>>>,
    /// `phi1[s][a]`, each a point of the simplex
    pub phi1: Vec<Vec<DVector<f64>>>,
}

impl TabularFeatures {
    pub fn state_index(x: &[f64]) -> usize {
        x[0].round() as usize
    }

    pub fn encode_state(s: usize) -> Vec<f64> {
        vec![s as f64]
    }
}

impl Features for TabularFeatures {
    fn d0(&self) -> usize {
        self.phi0[0][0].len()
    }

    fn d1(&self) -> usize {
        self.phi1[0][0].len()
    }

    fn action_count(&self) -> usize {
        self.action_count
    }

    fn eval(&self, x: &[f64], a: usize) -> Result<(DVector<f64>, DVector<f64>), FeatureError> {
        if a >= self.action_count {
            return Err(FeatureError::BadAction {
                action: a,
                count: self.action_count,
            });
        }
        let s = Self::state_index(x);
        if s >= self.state_count {
            return Err(FeatureError::DomainError {
                coord: 0,
                value: x[0],
                lo: 0.0,
                hi: (self.state_count - 1) as f64,
            });
        }
        Ok((self.phi0[s][a].clone(), self.phi1[s][a].clone()))
    }
}

// ── Univariate bases ────────────────────────────────────────────────────

/// Fourier basis on `[lo, hi]`: constant, then sin/cos pairs of
/// increasing frequency.
pub fn fourier_basis(t: f64, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let width = hi - lo;
    let u = if width > 0.0 { (t - lo) / width } else { 0.0 };
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        if j == 0 {
            out.push(1.0);
        } else {
            let freq = ((j + 1) / 2) as f64;
            let angle = 2.0 * std::f64::consts::PI * freq * u;
            out.push(if j % 2 == 1 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// B-spline basis of the given degree with clamped uniform knots on
/// `[lo, hi]`, evaluated by the Cox-de Boor recursion. The `count`
/// values are non-negative, bounded by one, and sum to one on the
/// domain (partition of unity). The degree is capped at `count - 1`.
pub fn bspline_basis(t: f64, lo: f64, hi: f64, count: usize, degree: usize) -> Vec<f64> {
    let p = degree.min(count.saturating_sub(1));
    let width = hi - lo;
    if width <= 0.0 {
        let mut out = vec![0.0; count];
        out[0] = 1.0;
        return out;
    }
    let t = t.clamp(lo, hi);
    // clamped knot vector: p+1 copies of lo, count-p-1 interior, p+1 copies of hi
    let n_interior = count - p - 1;
    let mut knots = Vec::with_capacity(count + p + 1);
    for _ in 0..=p {
        knots.push(lo);
    }
    for i in 1..=n_interior {
        knots.push(lo + width * i as f64 / (n_interior + 1) as f64);
    }
    for _ in 0..=p {
        knots.push(hi);
    }

    // degree-0 indicators with the last interval closed on the right
    let n_spans = knots.len() - 1;
    let mut basis = vec![0.0; n_spans];
    for j in 0..n_spans {
        let last_real_span = knots[j] < hi && knots[j + 1] >= hi;
        let hit = if last_real_span {
            t >= knots[j] && t <= knots[j + 1]
        } else {
            t >= knots[j] && t < knots[j + 1]
        };
        if hit && knots[j] < knots[j + 1] {
            basis[j] = 1.0;
        }
    }
    for deg in 1..=p {
        for j in 0..n_spans - deg {
            let left_den = knots[j + deg] - knots[j];
            let right_den = knots[j + deg + 1] - knots[j + 1];
            let left = if left_den > 0.0 {
                (t - knots[j]) / left_den * basis[j]
            } else {
                0.0
            };
            let right = if right_den > 0.0 {
                (knots[j + deg + 1] - t) / right_den * basis[j + 1]
            } else {
                0.0
            };
            basis[j] = left + right;
        }
    }
    basis.truncate(count);
    basis
}

fn univariate(spec: &BasisSpec, t: f64, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match spec.family {
        BasisFamily::Fourier => fourier_basis(t, lo, hi, count),
        BasisFamily::BSpline => bspline_basis(t, lo, hi, count, spec.degree),
    }
}

/// Tensor product over the listed coordinates (raw, before joint
/// normalization).
fn tensor_part(
    spec: &BasisSpec,
    coords: &[(f64, f64, f64)], // (value, lo, hi)
    counts: &[usize],
) -> DVector<f64> {
    let per_coord: Vec<Vec<f64>> = coords
        .iter()
        .zip(counts)
        .map(|(&(t, lo, hi), &c)| univariate(spec, t, lo, hi, c))
        .collect();
    let total: usize = counts.iter().product();
    let mut out = DVector::zeros(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut v = 1.0;
        for (vals, &c) in per_coord.iter().zip(counts) {
            v *= vals[rem % c];
            rem /= c;
        }
        out[idx] = v;
    }
    out
}

fn eval_tensor_basis(spec: &BasisSpec, x: &[f64], a: usize) -> (DVector<f64>, DVector<f64>) {
    let a_hi = (spec.action_count.max(1) - 1) as f64;
    let av = a as f64;
    let coords0: Vec<(f64, f64, f64)> = (0..spec.m0)
        .map(|i| (x[i], spec.domain.lo[i], spec.domain.hi[i]))
        .chain(std::iter::once((av, 0.0, a_hi)))
        .collect();
    let coords1: Vec<(f64, f64, f64)> = (0..spec.m1)
        .map(|i| {
            (
                x[spec.m0 + i],
                spec.domain.lo[spec.m0 + i],
                spec.domain.hi[spec.m0 + i],
            )
        })
        .chain(std::iter::once((av, 0.0, a_hi)))
        .collect();
    (
        tensor_part(spec, &coords0, &spec.counts0),
        tensor_part(spec, &coords1, &spec.counts1),
    )
}

/// Validate a [`BasisSpec`] and wrap it in a [`FeatureMap`].
pub fn build_tensor_basis(spec: BasisSpec) -> Result<FeatureMap, FeatureError> {
    if !spec.domain.is_bounded() {
        return Err(FeatureError::ConfigError(
            "tensor basis requires a bounded domain box".into(),
        ));
    }
    if spec.domain.dim() != spec.m0 + spec.m1 {
        return Err(FeatureError::ConfigError(format!(
            "domain dim {} != m0 + m1 = {}",
            spec.domain.dim(),
            spec.m0 + spec.m1
        )));
    }
    if spec.counts0.len() != spec.m0 + 1 || spec.counts1.len() != spec.m1 + 1 {
        return Err(FeatureError::ConfigError(
            "counts must list one entry per state coordinate plus the action".into(),
        ));
    }
    if spec.counts0.iter().chain(spec.counts1.iter()).any(|&c| c == 0) {
        return Err(FeatureError::ConfigError(
            "basis counts must be at least 1 per coordinate".into(),
        ));
    }
    if spec.action_count == 0 {
        return Err(FeatureError::ConfigError("action count must be >= 1".into()));
    }
    Ok(FeatureMap::TensorBasis(spec))
}

/// Number of basis functions suggested by the nonparametric rate:
/// `ceil(c * n^(m / (2 (m + q + 1))))` for `n` trajectories, input
/// dimension `m`, and smoothness order `q`.
pub fn basis_count_for_rate(c: f64, n: usize, m: u32, q: u32) -> usize {
    let expo = m as f64 / (2.0 * (m + q + 1) as f64);
    let raw = c * (n as f64).powf(expo);
    (raw.ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_small_values_unnormalized() {
        let map = FeatureMap::linear(1, 1, 2);
        let (p0, p1) = map.eval_phi(&[0.5, 0.2], 0).unwrap();
        // raw norm 0.539 < 1, so no scaling
        assert_eq!(p0.as_slice(), &[0.5, 0.0]);
        assert_eq!(p1.as_slice(), &[0.2, 0.0]);
    }

    #[test]
    fn zero_state_gives_zero_features() {
        let map = FeatureMap::linear(2, 2, 3);
        let (p0, p1) = map.eval_phi(&[0.0; 4], 0).unwrap();
        assert!(p0.iter().all(|v| *v == 0.0));
        assert!(p1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_map_power_pattern() {
        let map = FeatureMap::QuadraticActionInteraction {
            m0: 0,
            m1: 1,
            domain: DomainBox::unit(1),
            action_count: 3,
        };
        let (p0, p1) = map.eval_phi(&[1.0], 2).unwrap();
        assert_eq!(p0.len(), 0);
        // proportional to (1, 2, 4)
        let scale = p1[0];
        assert!(scale > 0.0);
        assert!((p1[1] / scale - 2.0).abs() < 1e-12);
        assert!((p1[2] / scale - 4.0).abs() < 1e-12);
    }

    #[test]
    fn domain_violation_is_an_error() {
        let map = FeatureMap::linear(1, 1, 2);
        let err = map.eval_phi(&[1.5, 0.0], 0).unwrap_err();
        assert!(matches!(err, FeatureError::DomainError { coord: 0, .. }));
    }

    #[test]
    fn bad_action_is_an_error() {
        let map = FeatureMap::linear(1, 1, 2);
        let err = map.eval_phi(&[0.5, 0.5], 2).unwrap_err();
        assert!(matches!(err, FeatureError::BadAction { action: 2, count: 2 }));
    }

    #[test]
    fn stack_and_split_round_trip() {
        let p0 = DVector::from_vec(vec![1.0, 2.0]);
        let p1 = DVector::from_vec(vec![3.0]);
        let stacked = stack_phi(&p0, &p1);
        assert_eq!(stacked.as_slice(), &[1.0, 2.0, 3.0]);
        let (q0, q1) = split_phi(&stacked, 2);
        assert_eq!(q0, p0);
        assert_eq!(q1, p1);

        let empty = DVector::zeros(0);
        let stacked = stack_phi(&empty, &p1);
        assert_eq!(stacked.as_slice(), &[3.0]);
    }

    #[test]
    fn fourier_single_basis_is_normalized_constant() {
        let spec = BasisSpec {
            family: BasisFamily::Fourier,
            degree: 0,
            m0: 1,
            m1: 1,
            counts0: vec![1, 1],
            counts1: vec![1, 1],
            domain: DomainBox::unit(2),
            action_count: 2,
        };
        let map = build_tensor_basis(spec).unwrap();
        let (p0, p1) = map.eval_phi(&[0.3, 0.7], 1).unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert_eq!(p0.len(), 1);
        assert!((p0[0] - inv_sqrt2).abs() < 1e-12);
        assert!((p1[0] - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn bspline_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = rng.gen_range(0.0..=1.0);
            let vals = bspline_basis(t, 0.0, 1.0, 4, 3);
            let sum: f64 = vals.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10, "sum {sum} at t={t}");
            for v in &vals {
                assert!(*v >= 0.0 && *v <= 1.0 + 1e-12);
            }
        }
        // endpoints included
        let at_end = bspline_basis(1.0, 0.0, 1.0, 5, 3);
        assert!((at_end.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!((at_end[4] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bspline_many_bases_partition_of_unity() {
        for &(count, degree) in &[(2usize, 1usize), (6, 2), (8, 3), (4, 0)] {
            for i in 0..=50 {
                let t = i as f64 / 50.0;
                let vals = bspline_basis(t, 0.0, 1.0, count, degree);
                let sum: f64 = vals.iter().sum();
                assert!(
                    (sum - 1.0).abs() < 1e-10,
                    "count={count} degree={degree} t={t} sum={sum}"
                );
            }
        }
    }

    #[test]
    fn basis_count_rate_helper() {
        assert_eq!(basis_count_for_rate(1.0, 256, 2, 1), 4);
        assert_eq!(basis_count_for_rate(1.0, 1, 2, 1), 1);
    }

    #[test]
    fn joint_norm_bound_holds_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps: Vec<Box<dyn Features>> = vec![
            Box::new(FeatureMap::linear(2, 2, 6)),
            Box::new(FeatureMap::quadratic(1, 2, 4)),
            Box::new(
                build_tensor_basis(BasisSpec {
                    family: BasisFamily::BSpline,
                    degree: 2,
                    m0: 1,
                    m1: 1,
                    counts0: vec![3, 2],
                    counts1: vec![4, 2],
                    domain: DomainBox::unit(2),
                    action_count: 3,
                })
                .unwrap(),
            ),
            Box::new(SiteCovariateMap::new(2, 1, 3)),
        ];
        for map in &maps {
            let sd = if map.action_count() == 6 || map.action_count() == 3 {
                2
            } else {
                3
            };
            for _ in 0..10_000 {
                let x: Vec<f64> = (0..sd).map(|_| rng.gen_range(0.0..=1.0)).collect();
                let x = if x.len() == 2 && map.d0() == 4 {
                    vec![x[0], x[1], rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)]
                } else {
                    x
                };
                let a = rng.gen_range(0..map.action_count());
                if let Ok((p0, p1)) = map.eval(&x, a) {
                    let n2 = p0.norm_squared() + p1.norm_squared();
                    assert!(n2 <= 1.0 + 1e-12, "norm^2 {n2}");
                }
            }
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let map = FeatureMap::linear(1, 2, 4);
        let x = [0.2, 0.9, 0.4];
        let (a0, a1) = map.eval_phi(&x, 3).unwrap();
        let (b0, b1) = map.eval_phi(&x, 3).unwrap();
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
    }

    #[test]
    fn tensor_basis_rejects_unbounded_domain() {
        let spec = BasisSpec {
            family: BasisFamily::Fourier,
            degree: 0,
            m0: 1,
            m1: 0,
            counts0: vec![2, 1],
            counts1: vec![1],
            domain: DomainBox {
                lo: vec![0.0],
                hi: vec![f64::INFINITY],
            },
            action_count: 2,
        };
        assert!(matches!(
            build_tensor_basis(spec),
            Err(FeatureError::ConfigError(_))
        ));
    }

    #[test]
    fn site_covariate_map_passthrough() {
        let map = SiteCovariateMap::new(2, 1, 2);
        let (p0, p1) = map.eval(&[0.3, 0.4, 0.5], 1).unwrap();
        assert_eq!(p0.as_slice(), &[0.3, 0.4]);
        assert_eq!(p1.as_slice(), &[0.5, 0.5]);
    }
}
