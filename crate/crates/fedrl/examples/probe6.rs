// probe: method ordering at the reference setting, small seed count
use fedrl::experiment::{default_config, run};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = default_config();
    config.seeds = (0..8).collect();
    config.eval_rollouts = 300;
    config.output = dir.path().to_path_buf();
    let t = std::time::Instant::now();
    let report = run(&config).unwrap();
    println!("elapsed {:?} for 8 seeds", t.elapsed());
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
        println!();
    }
}
