// probe: is the last-step theta0 error limited by the estimator or by the instance?
use std::sync::Arc;
use nalgebra::{DMatrix, DVector};
use fedrl::fdtr::federated_pipeline;
use fedrl::features::Features;
use fedrl::linalg::{min_eigenvalue, pinv};
use fedrl::mdp::{collect_dataset, sample_spec, BehaviorPolicy, SpecConfig};
use fedrl::pevi::PenaltyParams;
use fedrl::summary::{build_design, build_targets};
use fedrl::derive_seed;

fn errors_for(k_sites: usize, seed: u64) -> (f64, f64) {
    let h = 1; // terminal step: Y = r exactly
    let spec = sample_spec(
        &SpecConfig::Finite {
            state_count: 6, action_count: 3, d0: 4, d1: 4,
            k_sites, horizon: 2, stochastic_rewards: true,
        },
        derive_seed(&[seed, k_sites as u64, 0x5ca1e]),
    );
    let datasets: Vec<_> = (0..k_sites)
        .map(|k| collect_dataset(&spec, k, 100, &BehaviorPolicy::UniformRandom, derive_seed(&[seed, 0xd])).unwrap())
        .collect();
    let map: Arc<dyn Features> = spec.features();
    let (_, fits) = federated_pipeline(&datasets, &map, &PenaltyParams::default()).unwrap();
    let avg = fits.iter().fold(DVector::zeros(4), |acc, f| acc + &f.theta0_hat[h]) / k_sites as f64;
    let fdtr_err = (&avg - spec.theta0(h)).norm();

    // oracle: full joint least squares in the d_K embedding over raw pooled data
    let d0 = 4; let d1 = 4;
    let dk = d0 + k_sites * d1;
    let mut normal = DMatrix::<f64>::zeros(dk, dk);
    let mut rhs = DVector::<f64>::zeros(dk);
    for (j, d) in datasets.iter().enumerate() {
        let (phi0, phi1) = build_design(d, map.as_ref(), h).unwrap();
        let y = build_targets(d, &|_| 0.0, h).unwrap();
        let n_j = phi0.nrows();
        let mut emb = DMatrix::<f64>::zeros(n_j, dk);
        emb.view_mut((0, 0), (n_j, d0)).copy_from(&phi0);
        emb.view_mut((0, d0 + j * d1), (n_j, d1)).copy_from(&phi1);
        normal += emb.transpose() * &emb;
        rhs += emb.transpose() * &y;
    }
    let theta = pinv(&normal) * rhs;
    let oracle_err = (theta.rows(0, d0) - spec.theta0(h)).norm();
    (fdtr_err, oracle_err)
}

fn median(mut v: Vec<f64>) -> f64 { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] }

fn main() {
    for k in [4usize, 8, 16] {
        let pairs: Vec<(f64,f64)> = (0..40).map(|s| errors_for(k, s)).collect();
        let f: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let o: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        println!("K={k:2}  fdtr med={:.4}  pooled-ols med={:.4}", median(f), median(o));
    }
    // conditioning of one instance's stacked covariance
    let spec = sample_spec(&SpecConfig::Finite { state_count: 6, action_count: 3, d0: 4, d1: 4, k_sites: 4, horizon: 2, stochastic_rewards: true }, 1);
    let map: Arc<dyn Features> = spec.features();
    let ds = collect_dataset(&spec, 0, 4000, &BehaviorPolicy::UniformRandom, 2).unwrap();
    let (p0, p1) = build_design(&ds, map.as_ref(), 1).unwrap();
    let n = p0.nrows() as f64;
    let mut full = DMatrix::<f64>::zeros(8, 8);
    for t in 0..p0.nrows() {
        let mut phi = DVector::<f64>::zeros(8);
        phi.rows_mut(0, 4).copy_from(&p0.row(t).transpose());
        phi.rows_mut(4, 4).copy_from(&p1.row(t).transpose());
        full += &phi * phi.transpose() / n;
    }
    println!("lambda_min(C) one site = {:.5}", min_eigenvalue(&full));
}
