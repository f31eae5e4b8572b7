// probe: ordering under two-action subsets
use fedrl::experiment::{default_config, run, BehaviorKind};

fn main() {
    for (width, noise) in [(2usize, 0.25), (2, 0.5)] {
        let dir = tempfile::tempdir().unwrap();
        let mut config = default_config();
        config.seeds = (0..8).collect();
        config.eval_rollouts = 300;
        config.reward_noise_sd = noise;
        config.behavior = BehaviorKind::Subset(
            (0..5).map(|k| (0..width).map(|j| (k + j) % 6).collect()).collect(),
        );
        config.output = dir.path().to_path_buf();
        let report = run(&config).unwrap();
        println!("width={width} noise={noise}");
        for &n in &config.n_grid {
            print!("n={n:4}");
            for method in ["fdtr", "ldtr", "ldtr_mv", "qlearn1", "qlearn1_mv", "qlearnh"] {
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
