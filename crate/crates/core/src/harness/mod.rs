//! Experiment configuration, seeded Monte-Carlo trials and MSE reports.
//!
//! Seeds: the dataset of a cell comes from `(master, n, "dataset")`, trial
//! `t` of the cell from `(master, n, ε, t)`, so the results do not depend
//! on the number of worker threads.

mod dataset;
mod report;

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{build_workload, WorkloadSpec};
use crate::protocols::{
    quadratic_form_pipeline, JlPolicy, ProjectionOptions, ProtocolEstimate, QfPipeline, QfProtocol, RunParams,
    ThreeRoundOptions,
};
use crate::randomizers::BudgetLedger;
use crate::rng::{Round, SeedPath};
use crate::statistics::{PairwiseSetup, StatisticSpec};
use crate::workload::{histogram_of, linear_queries_exact, quadratic_form_exact, Dataset};

pub use dataset::{generate_dataset, DatasetSpec};
pub use report::{loglog_slope, mse_report, summarize_errors, CellSummary, TrialResult, BOOTSTRAP_RESAMPLES};

/// Environment variable read for the default worker count.
pub const THREADS_ENV: &str = "LDP_PAIRWISE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[serde(rename = "noninteractive")]
    NonInteractive,
    ThreeRound,
    LinearQuery,
    Reduction,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::NonInteractive => "noninteractive",
            ProtocolKind::ThreeRound => "three_round",
            ProtocolKind::LinearQuery => "linear_query",
            ProtocolKind::Reduction => "reduction",
        }
    }

    pub fn is_vector(self) -> bool {
        matches!(self, ProtocolKind::LinearQuery | ProtocolKind::Reduction)
    }
}

/// What the trials are scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// `hᵀWh` for scalar protocols, `Wh` for vector ones.
    #[default]
    Workload,
    /// The pairwise statistic (U-statistic) of a kernel.
    Statistic,
}

fn default_fw_iters() -> usize {
    ProjectionOptions::default().max_iters
}

fn default_jl_policy() -> JlPolicy {
    JlPolicy::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Workload name, or statistic name when `estimand` is `statistic`.
    #[serde(alias = "statistic")]
    pub workload: String,
    #[serde(default)]
    pub estimand: Estimand,
    /// Domain size for workloads that do not fix their own.
    pub k: usize,
    pub n: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub protocol: ProtocolKind,
    #[serde(default = "default_jl_policy")]
    pub jl_policy: JlPolicy,
    pub trials: usize,
    pub master_seed: u64,
    pub dataset: String,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Optional per-trial CSV.
    #[serde(default)]
    pub trial_output: Option<PathBuf>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub noise_off: bool,
    #[serde(default = "default_fw_iters")]
    pub fw_iters: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.trials == 0 {
            return bad("trials must be ≥ 1".into());
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return bad("n must be a non-empty list of positive sizes".into());
        }
        if self.epsilon.is_empty() || self.epsilon.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("epsilon must be a non-empty list of positive reals".into());
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be ≥ 1".into());
        }
        DatasetSpec::parse(&self.dataset)?;
        match self.estimand {
            Estimand::Workload => {
                WorkloadSpec::parse(&self.workload)?;
            }
            Estimand::Statistic => {
                StatisticSpec::parse(&self.workload)?;
                if self.protocol.is_vector() {
                    return bad(format!(
                        "statistic estimates need a scalar protocol, got {}",
                        self.protocol.as_str()
                    ));
                }
                if self.n.contains(&1) {
                    return bad("pairwise statistics need n ≥ 2".into());
                }
            }
        }
        Ok(())
    }

    fn qf_protocol(&self) -> QfProtocol {
        match self.protocol {
            ProtocolKind::ThreeRound => QfProtocol::ThreeRound(ThreeRoundOptions {
                projection: ProjectionOptions {
                    max_iters: self.fw_iters,
                    ..Default::default()
                },
                mu_override: None,
            }),
            _ => QfProtocol::NonInteractive,
        }
    }

    fn cell_seed(&self, n: usize, epsilon: f64) -> SeedPath {
        SeedPath::root(self.master_seed)
            .child(n as u64)
            .child(epsilon.to_bits())
    }

    fn dataset_seed(&self, n: usize) -> SeedPath {
        SeedPath::root(self.master_seed).child(n as u64).tagged(Round::Dataset)
    }
}

pub fn default_parallelism() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&p| p > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()))
}

/// A cell ready to run: the protocol closure and the exact answer.
enum Prepared {
    Workload(QfPipeline),
    Statistic(PairwiseSetup),
}

impl Prepared {
    fn new(cfg: &ExperimentConfig, n: usize, epsilon: f64) -> Result<Self> {
        let jl_seed = cfg.cell_seed(n, epsilon).tagged(Round::JlProjection);
        Ok(match cfg.estimand {
            Estimand::Workload => {
                let built = build_workload(&cfg.workload, cfg.k)?;
                Prepared::Workload(quadratic_form_pipeline(built, epsilon, n, cfg.jl_policy, jl_seed)?)
            }
            Estimand::Statistic => Prepared::Statistic(PairwiseSetup::new(
                StatisticSpec::parse(&cfg.workload)?,
                cfg.k,
                epsilon,
                n,
                cfg.jl_policy,
                jl_seed,
            )?),
        })
    }

    fn domain(&self) -> usize {
        match self {
            Prepared::Workload(p) => p.workload.k(),
            Prepared::Statistic(s) => s.domain(),
        }
    }

    fn exact(&self, kind: ProtocolKind, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            Prepared::Workload(p) => {
                let h = histogram_of(data);
                let w = p.workload.target.entries();
                if kind.is_vector() {
                    linear_queries_exact(w, &h)
                } else {
                    Ok(vec![quadratic_form_exact(w, &h)?])
                }
            }
            Prepared::Statistic(s) => Ok(vec![s.exact(data)?]),
        }
    }

    fn transcript(
        &self,
        kind: ProtocolKind,
        qf: &QfProtocol,
        data: &Dataset,
        params: RunParams,
    ) -> Result<ProtocolEstimate> {
        match (self, kind) {
            (Prepared::Workload(p), ProtocolKind::LinearQuery) => p.run_linear(data, params),
            (Prepared::Workload(p), ProtocolKind::Reduction) => p.run_reduction(qf, data, params),
            (Prepared::Workload(p), _) => p.run(qf, data, params),
            (Prepared::Statistic(s), _) => s.pipeline.run(qf, data, params),
        }
    }

    fn run(
        &self,
        kind: ProtocolKind,
        qf: &QfProtocol,
        data: &Dataset,
        params: RunParams,
    ) -> Result<(Vec<f64>, BudgetLedger)> {
        match self {
            Prepared::Workload(p) => {
                let est: ProtocolEstimate = match kind {
                    ProtocolKind::LinearQuery => p.run_linear(data, params)?,
                    ProtocolKind::Reduction => p.run_reduction(qf, data, params)?,
                    _ => p.run(qf, data, params)?,
                };
                Ok((est.value.as_slice().to_vec(), est.ledger))
            }
            Prepared::Statistic(s) => {
                let est = s.run(qf, data, params)?;
                Ok((vec![est.value], est.ledger))
            }
        }
    }
}

/// Everything produced by one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub summaries: Vec<CellSummary>,
    pub trials: Vec<Vec<TrialResult>>,
    pub csv: String,
    /// `(ε, slope)` of `ln mse` against `ln n`.
    pub slopes: Vec<(f64, f64)>,
}

impl ExperimentReport {
    pub fn trial_csv(&self) -> String {
        let mut out = String::from("n,epsilon,trial,estimate,exact,squared_error\n");
        for (s, rows) in self.summaries.iter().zip(&self.trials) {
            for r in rows {
                let est = r.estimate.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
                let exact = r.exact.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
                out.push_str(&format!(
                    "{},{},{},{est},{exact},{}\n",
                    s.n, s.epsilon, r.trial, r.squared_error
                ));
            }
        }
        out
    }
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.unwrap_or_else(default_parallelism))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Runs `trials` independent executions on one dataset.
fn run_cell(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    kind: ProtocolKind,
    data: &Dataset,
    epsilon: f64,
    seed: SeedPath,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<TrialResult>, CellSummary)> {
    let exact = prepared.exact(kind, data)?;
    let qf = cfg.qf_protocol();
    let outcomes: Vec<Result<(TrialResult, BudgetLedger)>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let params = RunParams::new(epsilon, seed.child(t as u64)).noise_off(cfg.noise_off);
                let start = Instant::now();
                let (estimate, ledger) = prepared.run(kind, &qf, data, params).map_err(|e| Error::TrialFailed {
                    trial: t,
                    message: e.to_string(),
                })?;
                let mut result = TrialResult::new(t, estimate, exact.clone());
                result.wall_time = start.elapsed();
                Ok((result, ledger))
            })
            .collect()
    });
    let mut results = Vec::with_capacity(cfg.trials);
    let mut ledger = BudgetLedger::default();
    for o in outcomes {
        let (r, l) = o?;
        ledger = l;
        results.push(r);
    }
    let (mse, bias, std, lo, hi) = summarize_errors(&results, seed.tagged(Round::Bootstrap))?;
    let summary = CellSummary {
        statistic: cfg.workload.clone(),
        protocol: kind.as_str().to_string(),
        k: prepared.domain(),
        n: data.n(),
        epsilon,
        trials: cfg.trials,
        mse,
        mse_ci_lo: lo,
        mse_ci_hi: hi,
        bias,
        seed: cfg.master_seed,
        std,
        ledger,
    };
    Ok((results, summary))
}

/// Runs the whole `n × ε` grid.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pool = pool(cfg)?;
    let mut summaries = Vec::new();
    let mut trials = Vec::new();
    for &n in &cfg.n {
        for &eps in &cfg.epsilon {
            let prepared = Prepared::new(cfg, n, eps)?;
            let data = generate_dataset(&cfg.dataset, prepared.domain(), n, cfg.dataset_seed(n))?;
            let (rows, summary) = run_cell(cfg, &prepared, cfg.protocol, &data, eps, cfg.cell_seed(n, eps), &pool)?;
            summaries.push(summary);
            trials.push(rows);
        }
    }
    let (csv, slopes) = mse_report(&summaries)?;
    Ok(ExperimentReport {
        summaries,
        trials,
        csv,
        slopes,
    })
}

/// Reruns trial 0 of the first grid cell and keeps its per-round aggregates.
pub fn first_trial_transcript(cfg: &ExperimentConfig) -> Result<ProtocolEstimate> {
    cfg.validate()?;
    let (n, eps) = (cfg.n[0], cfg.epsilon[0]);
    let prepared = Prepared::new(cfg, n, eps)?;
    let data = generate_dataset(&cfg.dataset, prepared.domain(), n, cfg.dataset_seed(n))?;
    let params = RunParams::new(eps, cfg.cell_seed(n, eps).child(0)).noise_off(cfg.noise_off);
    prepared.transcript(cfg.protocol, &cfg.qf_protocol(), &data, params)
}

/// Linear queries through the reduction compared with the quadratic-form
/// protocol it is built from, at `(ε/2, n)` and `(ε/2, 2n)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionSummary {
    pub n: usize,
    pub epsilon: f64,
    pub mmse: f64,
    pub qf_mse_n: f64,
    pub qf_mse_2n: f64,
    /// `mmse / (qf_mse_n + qf_mse_2n)`.
    pub ratio: f64,
}

pub fn run_reduction_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReductionSummary>> {
    cfg.validate()?;
    if cfg.estimand != Estimand::Workload {
        return Err(Error::InvalidArgument(
            "the reduction experiment scores linear queries".into(),
        ));
    }
    let pool = pool(cfg)?;
    let mut out = Vec::new();
    for &n in &cfg.n {
        for &eps in &cfg.epsilon {
            let seed = cfg.cell_seed(n, eps);
            let prepared = Prepared::new(cfg, n, eps)?;
            let data = generate_dataset(&cfg.dataset, prepared.domain(), n, cfg.dataset_seed(n))?;
            let (_, lq) = run_cell(cfg, &prepared, ProtocolKind::Reduction, &data, eps, seed, &pool)?;
            let half = Prepared::new(cfg, n, eps / 2.0)?;
            let (_, qf_n) = run_cell(
                cfg,
                &half,
                ProtocolKind::NonInteractive,
                &data,
                eps / 2.0,
                seed.child(1),
                &pool,
            )?;
            let doubled = data.concat(&data)?;
            let (_, qf_2n) = run_cell(
                cfg,
                &half,
                ProtocolKind::NonInteractive,
                &doubled,
                eps / 2.0,
                seed.child(2),
                &pool,
            )?;
            out.push(ReductionSummary {
                n,
                epsilon: eps,
                mmse: lq.mse,
                qf_mse_n: qf_n.mse,
                qf_mse_2n: qf_2n.mse,
                ratio: lq.mse / (qf_n.mse + qf_2n.mse),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(json: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(json).unwrap()
    }

    const BASE: &str = r#"{"workload": "gini_diversity", "k": 6, "n": [50, 200], "epsilon": [1.0],
        "protocol": "noninteractive", "trials": 20, "master_seed": 3, "dataset": "uniform", "parallelism": 2}"#;

    #[test]
    fn config_validation() {
        let cfg = config(BASE);
        assert_eq!(cfg.protocol, ProtocolKind::NonInteractive);
        assert_eq!(cfg.jl_policy, JlPolicy::None);
        assert_eq!(cfg.fw_iters, 2000);
        for bad in [
            BASE.replace("\"trials\": 20", "\"trials\": 0"),
            BASE.replace("[50, 200]", "[]"),
            BASE.replace("[1.0]", "[-1.0]"),
            BASE.replace("uniform", "zipf"),
            BASE.replace("gini_diversity", "nope"),
            BASE.replace("\"k\": 6", "\"k\": 6, \"colour\": 1"),
        ] {
            assert!(ExperimentConfig::from_json(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn noise_off_single_trial_is_exact() {
        let json = BASE.replace("\"trials\": 20", "\"trials\": 1, \"noise_off\": true");
        for protocol in ["noninteractive", "three_round", "linear_query", "reduction"] {
            let cfg = config(&json.replace("noninteractive", protocol));
            let report = run_trials(&cfg).unwrap();
            for s in &report.summaries {
                assert!(s.mse <= 1e-18, "{protocol}: {}", s.mse);
                assert_eq!(s.ledger.total(), 1.0);
            }
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let a = run_trials(&config(BASE)).unwrap();
        let b = run_trials(&config(&BASE.replace("\"parallelism\": 2", "\"parallelism\": 1"))).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.trial_csv(), b.trial_csv());
        let mean: f64 = a.trials[0].iter().map(|r| r.squared_error).sum::<f64>() / 20.0;
        assert!((a.summaries[0].mse - mean).abs() <= 1e-12);
        assert_eq!(a.slopes.len(), 1);
    }

    #[test]
    fn statistic_estimand() {
        let json = r#"{"statistic": "auc:4", "estimand": "statistic", "k": 0, "n": [40], "epsilon": [1.0],
            "protocol": "noninteractive", "trials": 1, "master_seed": 1, "dataset": "halves_extremes",
            "noise_off": true}"#;
        let report = run_trials(&config(json)).unwrap();
        assert_eq!(report.trials[0][0].exact, vec![1.0]);
        assert!(report.summaries[0].mse < 1e-18);
        assert_eq!(report.summaries[0].k, 8);
        let vector = json.replace("\"noninteractive\"", "\"linear_query\"");
        assert!(ExperimentConfig::from_json(&vector).is_err());
    }

    #[test]
    fn reduction_experiment_reports_ratio() {
        let json = BASE
            .replace("[50, 200]", "[100]")
            .replace("noninteractive", "reduction");
        let out = run_reduction_experiment(&config(&json)).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].ratio.is_finite() && out[0].ratio > 0.0);
    }
}
