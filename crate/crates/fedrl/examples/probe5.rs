// probe: theta0 error scaling on finite instances
use std::sync::Arc;
use fedrl::fdtr::{average_theta0, federated_pipeline};
use fedrl::features::Features;
use fedrl::mdp::{collect_dataset, sample_spec, BehaviorPolicy, SpecConfig};
use fedrl::pevi::PenaltyParams;
use fedrl::derive_seed;

fn theta0_error_for(k_sites: usize, seed: u64, per_step: bool) -> Vec<f64> {
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
    let avg = average_theta0(&fits);
    let _ = per_step;
    (0..2).map(|h| (&avg[h] - spec.theta0(h)).norm()).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    for h in 0..2 {
        let e4: Vec<f64> = (0..50).map(|s| theta0_error_for(4, s, true)[h]).collect();
        let e8: Vec<f64> = (0..50).map(|s| theta0_error_for(8, s, true)[h]).collect();
        println!("h={} med4={:.4} med8={:.4} ratio={:.3}", h, median(e4.clone()), median(e8.clone()), median(e8)/median(e4));
    }
    let e4: Vec<f64> = (0..50).map(|s| { let e = theta0_error_for(4, s, true); (e[0]+e[1])/2.0 }).collect();
    let e8: Vec<f64> = (0..50).map(|s| { let e = theta0_error_for(8, s, true); (e[0]+e[1])/2.0 }).collect();
    println!("mean-h: med4={:.4} med8={:.4} ratio={:.3}", median(e4.clone()), median(e8.clone()), median(e8)/median(e4));
}
