//! Declarative experiment runner: parse a key-value config, generate
//! multi-site data, fit every requested method across seeds and sample
//! sizes, evaluate, and emit deterministic CSV results plus a JSON run
//! manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::{fit_qlearn, BenchmarkPolicy, QLearnVariant};
use crate::derive_seed;
use crate::eval::{evaluate_exact_mean, evaluate_mc, suboptimality, Policy};
use crate::fdtr::{average_theta0, fdtr_fit, compute_site_stats, FederatedFitInputs, FdtrFit};
use crate::features::{FeatureMap, Features};
use crate::mdp::{collect_dataset, sample_spec, BehaviorPolicy, LinearMdpSpec, SpecConfig};
use crate::pevi::{ldtr_fit, PenaltyParams, PessimisticPolicy};
use crate::transport::{
    FederationHub, RoundManifest, SiteRoundInput, TransportError, TransportKind, DEFAULT_TIMEOUT,
};

pub const ALL_METHODS: [&str; 6] = ["fdtr", "ldtr", "ldtr_mv", "qlearn1", "qlearn1_mv", "qlearnh"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Fit(#[from] crate::pevi::FitError),
    #[error("{0}")]
    Run(String),
}

impl ExperimentError {
    /// Process exit code category: config 2, io 3, transport 4, other 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            ExperimentError::Io { .. } => 3,
            ExperimentError::Transport(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantKind {
    Continuous,
    Finite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorKind {
    Uniform,
    EpsGreedy(f64),
    /// Per-site allowed action lists.
    Subset(Vec<Vec<usize>>),
}

/// Everything one experiment run needs, parsed from the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: VariantKind,
    pub map: MapKind,
    pub d0: usize,
    pub d1: usize,
    pub state_count: usize,
    pub actions: usize,
    pub horizon: usize,
    pub sites: usize,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub lambda: f64,
    pub xi: f64,
    pub c: f64,
    pub eta: f64,
    pub reward_noise_sd: f64,
    pub behavior: BehaviorKind,
    pub transport: TransportKind,
    pub eval_rollouts: usize,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::Config { line: 0, msg });
        if self.d0 == 0 || self.d1 == 0 || self.actions == 0 || self.horizon == 0 || self.sites == 0
        {
            return fail("d0, d1, actions, horizon, sites must all be at least 1".into());
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return fail(format!("xi = {} outside (0, 1)", self.xi));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("n_grid must be non-empty and strictly ascending".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        if self.methods.is_empty() {
            return fail("methods must be non-empty".into());
        }
        for m in &self.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return fail(format!("unknown method {m:?}"));
            }
        }
        if self.variant == VariantKind::Continuous {
            let div = match self.map {
                MapKind::Linear => 2,
                MapKind::Quadratic => 3,
            };
            if self.d0 % div != 0 || self.d1 % div != 0 {
                return fail(format!(
                    "continuous variant with this map needs d0 and d1 divisible by {div}"
                ));
            }
        }
        if self.variant == VariantKind::Finite && self.state_count == 0 {
            return fail("finite variant needs state_count >= 1".into());
        }
        if let BehaviorKind::Subset(allowed) = &self.behavior {
            if allowed.len() != self.sites {
                return fail("behavior subset must list one action group per site".into());
            }
        }
        Ok(())
    }

    pub fn penalty_params(&self) -> PenaltyParams {
        PenaltyParams {
            lambda: self.lambda,
            c: self.c,
            xi: self.xi,
            eta: self.eta,
        }
    }

    pub fn behavior_policy(&self) -> BehaviorPolicy {
        match &self.behavior {
            BehaviorKind::Uniform => BehaviorPolicy::UniformRandom,
            BehaviorKind::EpsGreedy(eps) => BehaviorPolicy::EpsilonGreedyOnTruth { epsilon: *eps },
            BehaviorKind::Subset(allowed) => BehaviorPolicy::ActionSubset {
                allowed: allowed.clone(),
            },
        }
    }

    pub fn spec_config(&self) -> SpecConfig {
        match self.variant {
            VariantKind::Continuous => {
                let div = match self.map {
                    MapKind::Linear => 2,
                    MapKind::Quadratic => 3,
                };
                let (m0, m1) = (self.d0 / div, self.d1 / div);
                let map = match self.map {
                    MapKind::Linear => FeatureMap::linear(m0, m1, self.actions),
                    MapKind::Quadratic => FeatureMap::quadratic(m0, m1, self.actions),
                };
                SpecConfig::Continuous {
                    map,
                    k_sites: self.sites,
                    horizon: self.horizon,
                    reward_noise_sd: self.reward_noise_sd,
                }
            }
            VariantKind::Finite => SpecConfig::Finite {
                state_count: self.state_count,
                action_count: self.actions,
                d0: self.d0,
                d1: self.d1,
                k_sites: self.sites,
                horizon: self.horizon,
                stochastic_rewards: self.reward_noise_sd > 0.0,
            },
        }
    }

    /// Canonical text form; `parse_config` of this text reproduces the
    /// config exactly.
    pub fn serialize(&self) -> String {
        let behavior = match &self.behavior {
            BehaviorKind::Uniform => "uniform".to_string(),
            BehaviorKind::EpsGreedy(e) => format!("epsgreedy:{e}"),
            BehaviorKind::Subset(groups) => {
                let parts: Vec<String> = groups
                    .iter()
                    .map(|g| {
                        g.iter()
                            .map(|a| a.to_string())
                            .collect::<Vec<_>>()
                            .join(",")
                    })
                    .collect();
                format!("subset:{}", parts.join(";"))
            }
        };
        let transport = match &self.transport {
            TransportKind::InProcess => "inprocess".to_string(),
            TransportKind::Socket(addr) => format!("socket:{addr}"),
        };
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "variant = {}\nmap = {}\nd0 = {}\nd1 = {}\nstate_count = {}\nactions = {}\n\
             horizon = {}\nsites = {}\nn_grid = {}\nseeds = {}\nmethods = {}\nlambda = {}\n\
             xi = {}\nc = {}\neta = {}\nreward_noise_sd = {}\nbehavior = {}\ntransport = {}\n\
             eval_rollouts = {}\noutput = {}\n",
            match self.variant {
                VariantKind::Continuous => "continuous",
                VariantKind::Finite => "finite",
            },
            match self.map {
                MapKind::Linear => "linear",
                MapKind::Quadratic => "quadratic",
            },
            self.d0,
            self.d1,
            self.state_count,
            self.actions,
            self.horizon,
            self.sites,
            list(&self.n_grid),
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", "),
            self.methods.join(", "),
            self.lambda,
            self.xi,
            self.c,
            self.eta,
            self.reward_noise_sd,
            behavior,
            transport,
            self.eval_rollouts,
            self.output.display(),
        )
    }

    /// FNV-1a over the canonical serialization.
    pub fn hash(&self) -> String {
        let mut state: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.serialize().as_bytes() {
            state ^= *byte as u64;
            state = state.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{state:016x}")
    }
}

/// Parse the line-based `key = value` config format. Unknown keys are
/// rejected; errors carry the offending line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig {
        variant: VariantKind::Continuous,
        map: MapKind::Linear,
        d0: 0,
        d1: 0,
        state_count: 0,
        actions: 0,
        horizon: 0,
        sites: 0,
        n_grid: Vec::new(),
        seeds: Vec::new(),
        methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
        lambda: 1.0,
        xi: 0.99,
        c: 0.005,
        eta: 0.0,
        reward_noise_sd: 0.5,
        behavior: BehaviorKind::Uniform,
        transport: TransportKind::InProcess,
        eval_rollouts: 400,
        output: PathBuf::from("results"),
    };
    let mut required: BTreeMap<&str, bool> = ["d0", "d1", "actions", "horizon", "sites", "n_grid", "seeds"]
        .into_iter()
        .map(|k| (k, false))
        .collect();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ExperimentError::Config {
            line: line_no,
            msg: format!("expected `key = value`, got {raw:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |msg: String| ExperimentError::Config { line: line_no, msg };
        let parse_usize = |v: &str, key: &str| {
            v.parse::<usize>()
                .map_err(|e| bad(format!("key {key}: {e}")))
        };
        let parse_f64 =
            |v: &str, key: &str| v.parse::<f64>().map_err(|e| bad(format!("key {key}: {e}")));
        if let Some(flag) = required.get_mut(key) {
            *flag = true;
        }
        match key {
            "variant" => {
                cfg.variant = match value {
                    "continuous" => VariantKind::Continuous,
                    "finite" => VariantKind::Finite,
                    other => return Err(bad(format!("unknown variant {other:?}"))),
                }
            }
            "map" => {
                cfg.map = match value {
                    "linear" => MapKind::Linear,
                    "quadratic" => MapKind::Quadratic,
                    other => return Err(bad(format!("unknown map {other:?}"))),
                }
            }
            "d0" => cfg.d0 = parse_usize(value, key)?,
            "d1" => cfg.d1 = parse_usize(value, key)?,
            "state_count" => cfg.state_count = parse_usize(value, key)?,
            "actions" => cfg.actions = parse_usize(value, key)?,
            "horizon" => cfg.horizon = parse_usize(value, key)?,
            "sites" => cfg.sites = parse_usize(value, key)?,
            "n_grid" => {
                cfg.n_grid = value
                    .split(',')
                    .map(|t| parse_usize(t.trim(), key))
                    .collect::<Result<_, _>>()?;
            }
            "seeds" => {
                cfg.seeds = value
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<u64>()
                            .map_err(|e| bad(format!("key seeds: {e}")))
                    })
                    .collect::<Result<_, _>>()?;
            }
            "methods" => {
                cfg.methods = value.split(',').map(|t| t.trim().to_string()).collect();
            }
            "lambda" => cfg.lambda = parse_f64(value, key)?,
            "xi" => cfg.xi = parse_f64(value, key)?,
            "c" => cfg.c = parse_f64(value, key)?,
            "eta" => cfg.eta = parse_f64(value, key)?,
            "reward_noise_sd" => cfg.reward_noise_sd = parse_f64(value, key)?,
            "behavior" => {
                cfg.behavior = if value == "uniform" {
                    BehaviorKind::Uniform
                } else if let Some(eps) = value.strip_prefix("epsgreedy:") {
                    BehaviorKind::EpsGreedy(parse_f64(eps, key)?)
                } else if let Some(groups) = value.strip_prefix("subset:") {
                    let allowed: Vec<Vec<usize>> = groups
                        .split(';')
                        .map(|g| {
                            g.split(',')
                                .filter(|t| !t.trim().is_empty())
                                .map(|t| parse_usize(t.trim(), key))
                                .collect::<Result<Vec<_>, _>>()
                        })
                        .collect::<Result<_, _>>()?;
                    BehaviorKind::Subset(allowed)
                } else {
                    return Err(bad(format!("unknown behavior {value:?}")));
                }
            }
            "transport" => {
                cfg.transport = if value == "inprocess" {
                    TransportKind::InProcess
                } else if let Some(addr) = value.strip_prefix("socket:") {
                    TransportKind::Socket(addr.to_string())
                } else {
                    return Err(bad(format!("unknown transport {value:?}")));
                }
            }
            "eval_rollouts" => cfg.eval_rollouts = parse_usize(value, key)?,
            "output" => cfg.output = PathBuf::from(value),
            other => {
                return Err(bad(format!("unknown key {other:?}")));
            }
        }
    }
    if let Some((key, _)) = required.iter().find(|(_, seen)| !**seen) {
        return Err(ExperimentError::Config {
            line: 0,
            msg: format!("missing required key {key:?}"),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

// ── Report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub k_sites: usize,
    pub n: usize,
    pub seed: u64,
    pub site: usize,
    pub value_mean: f64,
    pub value_se: f64,
    pub subopt: Option<f64>,
    pub bound: Option<f64>,
    pub theta0_err: Option<f64>,
    pub wall_time_ms: f64,
}

pub const CSV_HEADER: &str =
    "method,k,n,seed,site,value_mean,value_se,subopt,bound,theta0_err,wall_time_ms";

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.12e},{:.12e},{},{},{},{:.3}",
            self.method,
            self.k_sites,
            self.n,
            self.seed,
            self.site,
            self.value_mean,
            self.value_se,
            opt(&self.subopt),
            opt(&self.bound),
            opt(&self.theta0_err),
            self.wall_time_ms
        )
    }

    /// The row without its wall-time column (the only nondeterministic
    /// field), used for determinism checks.
    pub fn deterministic_csv(&self) -> String {
        let full = self.to_csv();
        match full.rfind(',') {
            Some(i) => full[..i].to_string(),
            None => full,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifestFile {
    pub config_hash: String,
    pub crate_version: String,
    pub rounds: Vec<RoundManifest>,
    pub total_round_bytes: usize,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub config_hash: String,
    pub rounds: Vec<RoundManifest>,
    pub csv_path: PathBuf,
}

// ── Runner ──────────────────────────────────────────────────────────────

struct CellOutput {
    rows: Vec<ReportRow>,
    manifest: Option<RoundManifest>,
}

fn evaluate_policy(
    config: &ExperimentConfig,
    spec: &LinearMdpSpec,
    k: usize,
    policy: &dyn Policy,
    eval_seed: u64,
) -> (f64, f64) {
    match spec.as_finite() {
        Some(m) => (evaluate_exact_mean(m, k, policy), 0.0),
        None => {
            let est = evaluate_mc(spec, k, policy, config.eval_rollouts, eval_seed);
            (est.mean, est.std_error)
        }
    }
}

fn pessimistic_extras(
    spec: &LinearMdpSpec,
    k: usize,
    policy: &PessimisticPolicy,
    theta0_err: f64,
    bound_seed: u64,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    match spec.as_finite() {
        Some(m) => {
            // mean over initial states of the exact gap; bound from
            // optimal-policy rollouts out of uniform initial states
            let mut subopt_sum = 0.0;
            let mut bound_sum = 0.0;
            for s in 0..m.state_count {
                let report = suboptimality(m, k, policy, s, 200, derive_seed(&[bound_seed, s as u64]));
                subopt_sum += report.subopt;
                bound_sum += report.bound;
            }
            let states = m.state_count as f64;
            (
                Some(subopt_sum / states),
                Some(bound_sum / states),
                Some(theta0_err),
            )
        }
        None => (None, None, Some(theta0_err)),
    }
}

fn theta0_error(spec: &LinearMdpSpec, theta0_hat: &[nalgebra::DVector<f64>]) -> f64 {
    let horizon = spec.horizon();
    let mut total = 0.0;
    for (h, estimate) in theta0_hat.iter().enumerate().take(horizon) {
        total += (estimate - spec.theta0(h)).norm();
    }
    total / horizon as f64
}

fn run_cell(
    config: &ExperimentConfig,
    seed: u64,
    n: usize,
) -> Result<CellOutput, ExperimentError> {
    let cell_seed = derive_seed(&[seed, n as u64, 0xce11]);
    let spec = sample_spec(&config.spec_config(), cell_seed);
    let map: Arc<dyn Features> = spec.features();
    let behavior = config.behavior_policy();
    let params = config.penalty_params();
    let k_sites = config.sites;
    let horizon = config.horizon;

    let datasets: Vec<_> = (0..k_sites)
        .map(|k| {
            collect_dataset(&spec, k, n, &behavior, derive_seed(&[cell_seed, 0xda7a]))
                .map_err(|e| ExperimentError::Run(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let want = |m: &str| config.methods.iter().any(|x| x == m);
    let need_ldtr = want("ldtr") || want("ldtr_mv") || want("fdtr");
    let need_qlearn1 = want("qlearn1") || want("qlearn1_mv");

    let mut rows = Vec::new();
    let mut manifest = None;

    let ldtr_fits: Vec<PessimisticPolicy> = if need_ldtr {
        datasets
            .iter()
            .map(|d| ldtr_fit(d, &map, &params))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let fdtr_fits: Vec<FdtrFit> = if want("fdtr") {
        // one federation round through the configured transport
        let inputs: Vec<SiteRoundInput> = datasets
            .iter()
            .zip(&ldtr_fits)
            .map(|(d, p)| {
                compute_site_stats(d, &map, p).map(|stats| SiteRoundInput::from_projected(d.site_id, &stats))
            })
            .collect::<Result<_, _>>()?;
        let mut hub = FederationHub::new();
        let outcome = hub.exchange_round(cell_seed, &inputs, &config.transport, DEFAULT_TIMEOUT)?;
        manifest = Some(outcome.manifest.clone());
        datasets
            .iter()
            .enumerate()
            .map(|(k, dataset)| {
                let fit_inputs = FederatedFitInputs {
                    dataset: dataset.clone(),
                    map: map.clone(),
                    params,
                    foreign_by_step: outcome.foreign_by_step(k, horizon),
                };
                fdtr_fit(&fit_inputs)
            })
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let mut push_rows = |method: &str, per_site: &dyn Fn(usize) -> (f64, f64, Option<f64>, Option<f64>, Option<f64>), wall: f64| {
        for k in 0..k_sites {
            let (value_mean, value_se, subopt, bound, theta0_err) = per_site(k);
            rows.push(ReportRow {
                method: method.to_string(),
                k_sites,
                n,
                seed,
                site: k,
                value_mean,
                value_se,
                subopt,
                bound,
                theta0_err,
                wall_time_ms: wall,
            });
        }
    };

    let eval_seed_base = derive_seed(&[cell_seed, 0xe7a1]);
    if want("fdtr") {
        let start = Instant::now();
        let avg = average_theta0(&fdtr_fits);
        let avg_err = theta0_error(&spec, &avg);
        let _ = avg_err;
        let per_site = |k: usize| {
            let fit = &fdtr_fits[k];
            let (mean, se) = evaluate_policy(config, &spec, k, &fit.policy, derive_seed(&[eval_seed_base, 0xfd, k as u64]));
            let t_err = theta0_error(&spec, &fit.theta0_hat);
            let (subopt, bound, theta0_err) =
                pessimistic_extras(&spec, k, &fit.policy, t_err, derive_seed(&[cell_seed, 0xb0, k as u64]));
            (mean, se, subopt, bound, theta0_err)
        };
        push_rows("fdtr", &per_site, start.elapsed().as_secs_f64() * 1e3);
    }
    if want("ldtr") {
        let start = Instant::now();
        let per_site = |k: usize| {
            let policy = &ldtr_fits[k];
            let (mean, se) = evaluate_policy(config, &spec, k, policy, derive_seed(&[eval_seed_base, 0x1d, k as u64]));
            let theta0_hat: Vec<nalgebra::DVector<f64>> = policy
                .steps
                .iter()
                .map(|s| s.theta.rows(0, map.d0()).into_owned())
                .collect();
            let t_err = theta0_error(&spec, &theta0_hat);
            let (subopt, bound, theta0_err) =
                pessimistic_extras(&spec, k, policy, t_err, derive_seed(&[cell_seed, 0xb1, k as u64]));
            (mean, se, subopt, bound, theta0_err)
        };
        push_rows("ldtr", &per_site, start.elapsed().as_secs_f64() * 1e3);
    }
    if want("ldtr_mv") {
        let start = Instant::now();
        let mv = BenchmarkPolicy::LdtrMv(ldtr_fits.clone());
        let per_site = |k: usize| {
            let (mean, se) = evaluate_policy(config, &spec, k, &mv, derive_seed(&[eval_seed_base, 0x2d, k as u64]));
            (mean, se, None, None, None)
        };
        push_rows("ldtr_mv", &per_site, start.elapsed().as_secs_f64() * 1e3);
    }
    let qlearn1_fits: Vec<crate::benchmarks::QLearnPolicy> = if need_qlearn1 {
        datasets
            .iter()
            .map(|d| fit_qlearn(d, &map, QLearnVariant::One))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    if want("qlearn1") {
        let start = Instant::now();
        let per_site = |k: usize| {
            let (mean, se) = evaluate_policy(config, &spec, k, &qlearn1_fits[k], derive_seed(&[eval_seed_base, 0x31, k as u64]));
            (mean, se, None, None, None)
        };
        push_rows("qlearn1", &per_site, start.elapsed().as_secs_f64() * 1e3);
    }
    if want("qlearn1_mv") {
        let start = Instant::now();
        let mv = BenchmarkPolicy::QLearn1Mv(qlearn1_fits.clone());
        let per_site = |k: usize| {
            let (mean, se) = evaluate_policy(config, &spec, k, &mv, derive_seed(&[eval_seed_base, 0x3a, k as u64]));
            (mean, se, None, None, None)
        };
        push_rows("qlearn1_mv", &per_site, start.elapsed().as_secs_f64() * 1e3);
    }
    if want("qlearnh") {
        let start = Instant::now();
        let fits: Vec<crate::benchmarks::QLearnPolicy> = datasets
            .iter()
            .map(|d| fit_qlearn(d, &map, QLearnVariant::PerStep))
            .collect::<Result<_, _>>()?;
        let per_site = |k: usize| {
            let (mean, se) = evaluate_policy(config, &spec, k, &fits[k], derive_seed(&[eval_seed_base, 0x4a, k as u64]));
            (mean, se, None, None, None)
        };
        push_rows("qlearnh", &per_site, start.elapsed().as_secs_f64() * 1e3);
    }

    // canonical row order inside a cell
    rows.sort_by(|a, b| (a.method.as_str(), a.site).cmp(&(b.method.as_str(), b.site)));
    Ok(CellOutput { rows, manifest })
}

/// Run the whole experiment: every `(seed, n)` cell, seeds in parallel,
/// CSV written incrementally in ascending seed order. Fully
/// deterministic given the config (wall-time column aside).
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let out_dir = &config.output;
    std::fs::create_dir_all(out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let csv_path = out_dir.join("results.csv");
    let mut writer =
        std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(|source| {
            ExperimentError::Io {
                path: csv_path.clone(),
                source,
            }
        })?);
    writeln!(writer, "{CSV_HEADER}").map_err(|source| ExperimentError::Io {
        path: csv_path.clone(),
        source,
    })?;

    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<CellOutput>, ExperimentError>)>();
    let seeds = config.seeds.clone();
    let config_ref = config.clone();
    let worker = std::thread::spawn(move || {
        seeds
            .par_iter()
            .enumerate()
            .for_each_with(tx, |tx, (idx, &seed)| {
                let result: Result<Vec<CellOutput>, ExperimentError> = config_ref
                    .n_grid
                    .iter()
                    .map(|&n| run_cell(&config_ref, seed, n))
                    .collect();
                // receiver hangup means the run already failed
                let _ = tx.send((idx, result));
            });
    });

    // write in ascending seed order as chunks become available
    let mut pending: BTreeMap<usize, Vec<CellOutput>> = BTreeMap::new();
    let mut next = 0usize;
    let mut rows = Vec::new();
    let mut rounds = Vec::new();
    let mut first_err: Option<ExperimentError> = None;
    for (idx, result) in rx {
        match result {
            Ok(cells) => {
                pending.insert(idx, cells);
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
                pending.insert(idx, Vec::new());
            }
        }
        while let Some(cells) = pending.remove(&next) {
            for cell in cells {
                for row in &cell.rows {
                    writeln!(writer, "{}", row.to_csv()).map_err(|source| ExperimentError::Io {
                        path: csv_path.clone(),
                        source,
                    })?;
                }
                rows.extend(cell.rows);
                if let Some(m) = cell.manifest {
                    rounds.push(m);
                }
            }
            writer.flush().map_err(|source| ExperimentError::Io {
                path: csv_path.clone(),
                source,
            })?;
            next += 1;
        }
    }
    worker.join().expect("seed worker panicked");
    if let Some(e) = first_err {
        return Err(e);
    }

    let manifest_path = out_dir.join("manifest.json");
    let manifest_file = RunManifestFile {
        config_hash: config.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        total_round_bytes: rounds.iter().map(|r| r.total_bytes).sum(),
        rounds: rounds.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest_file)
        .map_err(|e| ExperimentError::Run(e.to_string()))?;
    std::fs::write(&manifest_path, json).map_err(|source| ExperimentError::Io {
        path: manifest_path,
        source,
    })?;

    Ok(ExperimentReport {
        rows,
        config_hash: config.hash(),
        rounds,
        csv_path,
    })
}

/// The desk-scale default setup mirroring the synthetic-benchmark
/// experiment: feature dimension 8 (split 4/4), 6 actions, horizon 15,
/// 5 sites whose behavior policies cover uneven action subsets (sites
/// with a narrow formulary are where federation matters most). The
/// penalty scale is calibrated to this instance's reward scale; note
/// that `alpha = c d H sqrt(zeta)` already carries the `d H = 120`
/// factor.
pub fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        variant: VariantKind::Continuous,
        map: MapKind::Linear,
        d0: 4,
        d1: 4,
        state_count: 0,
        actions: 6,
        horizon: 15,
        sites: 5,
        n_grid: vec![25, 50, 100, 200, 400],
        seeds: (0..30).collect(),
        methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
        lambda: 1.0,
        xi: 0.99,
        c: 0.001,
        eta: 0.0,
        reward_noise_sd: 0.25,
        behavior: BehaviorKind::Subset(vec![
            vec![0],
            vec![1, 2],
            vec![2, 3, 4],
            vec![4, 5],
            vec![5],
        ]),
        transport: TransportKind::InProcess,
        eval_rollouts: 400,
        output: PathBuf::from("results"),
    }
}
