// probe: what penalty scale does 5-fold CV pick on the default setup?
use std::sync::Arc;
use fedrl::eval::cross_validate_c;
use fedrl::experiment::default_config;
use fedrl::features::Features;
use fedrl::mdp::{collect_dataset, sample_spec};
use fedrl::pevi::PenaltyParams;

fn main() {
    let config = {
        let mut c = default_config();
        c.reward_noise_sd = 0.25;
        c.behavior = fedrl::experiment::BehaviorKind::Subset(vec![
            vec![0], vec![1, 2], vec![2, 3, 4], vec![4, 5], vec![5],
        ]);
        c
    };
    let behavior = config.behavior_policy();
    for seed in [11u64, 29, 47] {
        let spec = sample_spec(&config.spec_config(), seed);
        let datasets: Vec<_> = (0..5)
            .map(|k| collect_dataset(&spec, k, 100, &behavior, seed).unwrap())
            .collect();
        let map: Arc<dyn Features> = spec.features();
        let grid = [0.0005, 0.001, 0.005, 0.02];
        let best = cross_validate_c(
            &spec, &datasets, &map, &behavior, &grid, 5,
            &PenaltyParams::default(),
        )
        .unwrap();
        println!("seed {seed}: CV-selected c = {best}");
    }
}
