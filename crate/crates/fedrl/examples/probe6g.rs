// probe: ordering under uneven per-site action subsets
use fedrl::experiment::{default_config, run, BehaviorKind};

fn main() {
    let patterns: Vec<(&str, Vec<Vec<usize>>)> = vec![
        ("sizes 1-2-3-2-1", vec![vec![0], vec![1, 2], vec![2, 3, 4], vec![4, 5], vec![5]]),
        ("sizes 2-2-2-2-2 stride", vec![vec![0, 3], vec![1, 4], vec![2, 5], vec![0, 4], vec![1, 5]]),
        ("sizes 1-1-2-2-2", vec![vec![0], vec![1], vec![2, 3], vec![3, 4], vec![4, 5]]),
    ];
    for (name, subsets) in patterns {
        let dir = tempfile::tempdir().unwrap();
        let mut config = default_config();
        config.seeds = (0..10).collect();
        config.eval_rollouts = 300;
        config.reward_noise_sd = 0.25;
        config.c = 0.001;
        config.behavior = BehaviorKind::Subset(subsets);
        config.output = dir.path().to_path_buf();
        let report = run(&config).unwrap();
        println!("pattern: {name}");
        for &n in &config.n_grid {
            print!("n={n:4}");
            for method in ["fdtr", "ldtr", "qlearn1", "qlearn1_mv", "qlearnh"] {
                let vals: Vec<f64> = report
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.n == n)
                    .map(|r| r.value_mean)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                print!("  {method}={mean:.3}");
            }
            let mut diffs = Vec::new();
            for seed in &config.seeds {
                let f: f64 = report.rows.iter().filter(|r| r.method == "fdtr" && r.n == n && r.seed == *seed).map(|r| r.value_mean).sum::<f64>() / 5.0;
                let l: f64 = report.rows.iter().filter(|r| r.method == "ldtr" && r.n == n && r.seed == *seed).map(|r| r.value_mean).sum::<f64>() / 5.0;
                diffs.push(f - l);
            }
            let mean_d = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - mean_d) * (d - mean_d)).sum::<f64>() / (diffs.len() as f64 - 1.0);
            println!("  | gap={:.3} se={:.3}", mean_d, (var / diffs.len() as f64).sqrt());
        }
    }
}
