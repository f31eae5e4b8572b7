// probe: how much do actions matter under different domain scales?
use fedrl::features::{DomainBox, FeatureMap};
use fedrl::mdp::{sample_spec, LinearMdpSpec, SpecConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probe(hi: f64, noise: f64, seed: u64) {
    let m0 = 2;
    let m1 = 2;
    let map = FeatureMap::LinearActionInteraction {
        m0,
        m1,
        domain: DomainBox { lo: vec![0.0; 4], hi: vec![hi; 4] },
        action_count: 6,
    };
    let spec = sample_spec(
        &SpecConfig::Continuous { map, k_sites: 5, horizon: 15, reward_noise_sd: noise },
        seed,
    );
    let m = match &spec {
        LinearMdpSpec::Continuous(m) => m,
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut edge = 0.0;
    let mut mean_mean = 0.0;
    let n = 3000;
    for _ in 0..n {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..hi)).collect();
        let h = rng.gen_range(0..15);
        let vals: Vec<f64> = (0..6).map(|a| m.mean_reward(0, h, &x, a)).collect();
        let best = vals.iter().cloned().fold(f64::MIN, f64::max);
        let avg = vals.iter().sum::<f64>() / 6.0;
        edge += best - avg;
        mean_mean += avg;
    }
    // transition edge: spread of bump-mixture weights across actions
    let mut tv_edge = 0.0;
    for _ in 0..500 {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..hi)).collect();
        let h = rng.gen_range(0..15);
        let probe_pts: Vec<Vec<f64>> = (0..16).map(|_| (0..4).map(|_| rng.gen_range(0.0..hi)).collect()).collect();
        let mut per_action: Vec<Vec<f64>> = Vec::new();
        for a in 0..6 {
            let w: Vec<f64> = probe_pts.iter().map(|p| m.transition_density(h, &x, a, p)).collect();
            let s: f64 = w.iter().sum();
            per_action.push(w.iter().map(|v| v / s.max(1e-300)).collect());
        }
        let mut worst = 0.0_f64;
        for a in 1..6 {
            let tv: f64 = per_action[0].iter().zip(&per_action[a]).map(|(p, q)| (p - q).abs()).sum::<f64>() / 2.0;
            worst = worst.max(tv);
        }
        tv_edge += worst;
    }
    println!(
        "box hi={hi:<5} noise={noise}: reward edge E[max-avg]={:.4}  E[avg mean]={:.4}  max transition TV={:.4}",
        edge / n as f64,
        mean_mean / n as f64,
        tv_edge / 500.0
    );
}

fn main() {
    for &(hi, noise) in &[(1.0, 0.5), (1.0, 0.1), (0.3, 0.05), (0.1, 0.05)] {
        probe(hi, noise, 3);
    }
}
