// probe: ordering under per-site action-subset behavior
use fedrl::experiment::{default_config, run, BehaviorKind};

fn main() {
    for noise in [0.5, 0.25] {
        let dir = tempfile::tempdir().unwrap();
        let mut config = default_config();
        config.seeds = (0..8).collect();
        config.eval_rollouts = 300;
        config.reward_noise_sd = noise;
        config.behavior = BehaviorKind::Subset(
            (0..5).map(|k| (0..3).map(|j| (k + j) % 6).collect()).collect(),
        );
        config.output = dir.path().to_path_buf();
        let t = std::time::Instant::now();
        let report = run(&config).unwrap();
        println!("noise={noise} elapsed {:?}", t.elapsed());
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
            // paired fdtr-ldtr gap and SE
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
